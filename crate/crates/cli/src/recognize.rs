use anyhow::{bail, Context};
use kalchas::imaging::{load_gray, prepare_whole};
use kalchas::model::io::load_model;
use serde::Serialize;

use crate::{OcrArgs, UsageError};

#[derive(Serialize)]
struct OcrLine {
    image: String,
    text: String,
    confidence: f64,
}

pub fn ocr(args: OcrArgs) -> anyhow::Result<()> {
    if args.chunk == 0 {
        bail!(UsageError("--chunk must be at least 1".into()));
    }
    let model = load_model(&args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let mut lines = Vec::with_capacity(args.images.len());
    for path in &args.images {
        let img = load_gray(path).with_context(|| format!("reading image {}", path.display()))?;
        lines.push(prepare_whole(&img));
    }
    let (results, rate) = model.ocr_timed(&lines, args.chunk);
    eprintln!("{} line(s) at {rate:.2} lines/sec", lines.len());
    if args.json {
        let out: Vec<OcrLine> = args
            .images
            .iter()
            .zip(results)
            .map(|(p, (text, confidence))| OcrLine {
                image: p.display().to_string(),
                text,
                confidence,
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        for (text, _) in results {
            println!("{text}");
        }
    }
    Ok(())
}
