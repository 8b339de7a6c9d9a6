use std::fs;

use anyhow::{bail, Context};
use kalchas::dataset::{generate_corpus, GlyphAtlas, StyleRanges};
use kalchas::imaging::{deskew, load_gray, otsu_binarize, segment_lines};
use kalchas::verify::{check, CheckReport, CHECKS, GRAD_TOLERANCE};
use kalchas::LineBox;
use kalchas_service::ServiceConfig;
use serde::Serialize;

use crate::{GradcheckArgs, SegmentArgs, ServeArgs, SynthArgs, UsageError};

pub fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let atlas = match &a.atlas {
        Some(p) => GlyphAtlas::load_pair(p).with_context(|| format!("loading atlas {}", p.display()))?,
        None => GlyphAtlas::polytonic(),
    };
    let ranges: StyleRanges = match &a.style {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading style {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| UsageError(format!("style {}: {e}", p.display())))?
        }
        None => StyleRanges::default(),
    };
    let texts: Vec<String> = fs::read_to_string(&a.texts)
        .with_context(|| format!("reading texts {}", a.texts.display()))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect();
    let report = generate_corpus(&atlas, &texts, &ranges, a.seed, &a.out)?;
    for e in &report.errors {
        eprintln!("skipped {}: {}", e.location, e.message);
    }
    if a.json {
        println!(
            "{}",
            serde_json::json!({
                "manifest": report.manifest,
                "lines": report.entries.len(),
                "errors": report.errors.iter().map(|e| format!("{}: {}", e.location, e.message)).collect::<Vec<_>>(),
            })
        );
    } else {
        println!("{}", report.manifest.display());
    }
    if report.entries.is_empty() && !texts.is_empty() {
        bail!("no line could be rendered");
    }
    Ok(())
}

#[derive(Serialize)]
struct SegmentedLine {
    #[serde(rename = "box")]
    bbox: LineBox,
    image: String,
}

pub fn segment(a: SegmentArgs) -> anyhow::Result<()> {
    if a.min_gap == 0 || a.min_height == 0 {
        bail!(UsageError("--min-gap and --min-height must be at least 1".into()));
    }
    if let Some(d) = a.deskew {
        if !(d > 0.0 && d <= 15.0) {
            bail!(UsageError(format!("--deskew {d} must lie in (0, 15]")));
        }
    }
    let page = load_gray(&a.image).with_context(|| format!("reading image {}", a.image.display()))?;
    let mut binary = otsu_binarize(&page);
    let mut source = page;
    if let Some(max) = a.deskew {
        let (rotated, angle) = deskew(&binary, max);
        eprintln!("deskewed by {angle} degrees");
        if angle != 0.0 {
            source = rotated.as_gray().clone();
        }
        binary = rotated;
    }
    let boxes = segment_lines(&binary, a.min_gap, a.min_height);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut out = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        let path = a.out.join(format!("line_{i:03}.png"));
        source.crop(b)?.save_png(&path).with_context(|| format!("writing {}", path.display()))?;
        out.push(SegmentedLine {
            bbox: *b,
            image: path.display().to_string(),
        });
    }
    eprintln!("{} line(s)", out.len());
    if a.json {
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        for l in &out {
            println!("{}\t{}\t{}\t{}\t{}", l.bbox.x, l.bbox.y, l.bbox.width, l.bbox.height, l.image);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckSummary {
    name: String,
    seeds: u64,
    max_error: f64,
    checked: usize,
    skipped: usize,
    passed: bool,
}

pub fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    if a.seeds == 0 {
        bail!(UsageError("--seeds must be at least 1".into()));
    }
    let names: Vec<String> = if a.checks.is_empty() {
        CHECKS.iter().map(|s| s.to_string()).collect()
    } else {
        for c in &a.checks {
            if !CHECKS.contains(&c.as_str()) {
                bail!(UsageError(format!("unknown check {c:?}; known: {}", CHECKS.join(", "))));
            }
        }
        a.checks.clone()
    };
    let mut summaries = Vec::with_capacity(names.len());
    for name in names {
        let mut s = CheckSummary {
            name,
            seeds: a.seeds,
            max_error: 0.0,
            checked: 0,
            skipped: 0,
            passed: true,
        };
        for seed in 0..a.seeds {
            let r: CheckReport = check(&s.name, seed)?;
            s.max_error = s.max_error.max(r.max_error);
            s.checked += r.checked;
            s.skipped += r.skipped;
            s.passed &= r.passed;
        }
        summaries.push(s);
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&summaries)?);
    } else {
        println!("{:<16} {:>12} {:>9} {:>8}  result", "check", "max error", "checked", "skipped");
        for s in &summaries {
            println!(
                "{:<16} {:>12.3e} {:>9} {:>8}  {}",
                s.name,
                s.max_error,
                s.checked,
                s.skipped,
                if s.passed { "ok" } else { "FAIL" }
            );
        }
    }
    let failed: Vec<&str> = summaries.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient error above {GRAD_TOLERANCE:e} in: {}", failed.join(", "));
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let config = ServiceConfig::load(&a.config).map_err(|e| UsageError(e.to_string()))?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(kalchas_service::serve(config, async {
        let _ = tokio::signal::ctrl_c().await;
    }))?;
    Ok(())
}
