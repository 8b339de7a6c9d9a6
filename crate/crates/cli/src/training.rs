use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use kalchas::dataset::{load_manifest, load_samples, ManifestEntry, Sample};
use kalchas::imaging::{load_gray, prepare_whole};
use kalchas::metrics::EvalReport;
use kalchas::model::io::{load_model, save_model};
use kalchas::model::{ArchConfig, CrnnModel, Provenance};
use kalchas::train::{
    curves_csv, fit, split_dataset, CurvePoint, TrainConfig, TrainState, BEST_MODEL, CURVES_FILE, LAST_MODEL,
    LAST_STATE,
};
use kalchas::{Charset, Real};
use log::warn;
use serde::Serialize;

use crate::{Arch, EvalArgs, Precision, TrainArgs, UsageError};

fn train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        split_fraction: a.split,
        seed: a.seed,
        gradient_clip_norm: (a.clip > 0.0).then_some(a.clip),
        eval_every: a.eval_every,
        checkpoint_dir: Some(a.out.clone()),
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

/// Prepares each entry on its own so one bad entry is reported and skipped
/// rather than aborting ingestion.
fn ingest(entries: &[ManifestEntry], cs: &Charset, timesteps: usize, errors: &mut Vec<String>) -> Vec<Sample> {
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        match load_samples(std::slice::from_ref(e), cs, timesteps) {
            Ok(mut s) => out.append(&mut s),
            Err(err) => errors.push(format!("{}: {err}", e.image.display())),
        }
    }
    out
}

/// Honors `split` labels when the manifest has any; otherwise splits at
/// random by `--split`, or keeps everything for training with `--no-val`.
fn split_entries(entries: Vec<ManifestEntry>, a: &TrainArgs, cfg: &TrainConfig) -> anyhow::Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    if a.no_val {
        return Ok((entries, Vec::new()));
    }
    if entries.iter().any(|e| e.split.is_some()) {
        let (val, train) = entries
            .into_iter()
            .partition(|e| matches!(e.split.as_deref(), Some("val" | "validation")));
        return Ok((train, val));
    }
    Ok(split_dataset(&entries, cfg.split_fraction, cfg.seed)?)
}

#[derive(Serialize)]
struct TrainSummary {
    out: String,
    train_samples: usize,
    val_samples: usize,
    skipped: Vec<String>,
    epochs: usize,
    best_epoch: usize,
    best_metric: Option<f64>,
    last: Option<CurvePoint>,
}

fn base_model<R: Real>(a: &TrainArgs) -> anyhow::Result<CrnnModel<R>> {
    if let Some(init) = &a.init {
        let m = load_model(init).with_context(|| format!("loading initial model {}", init.display()))?;
        return Ok(m.cast());
    }
    let cs = match &a.charset {
        Some(p) => Charset::load(p).with_context(|| format!("reading charset {}", p.display()))?,
        None => Charset::polytonic(),
    };
    let config = match a.arch {
        Arch::Default => ArchConfig::default_for(cs.size()),
        Arch::Small => ArchConfig::small(cs.size()),
    };
    let mut m = CrnnModel::build(config, cs, a.seed)?;
    m.metadata.name = a.name.clone();
    Ok(m)
}

fn run_training<R: Real>(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = train_config(a)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut state: TrainState<R> = if a.resume {
        let path = a.out.join(LAST_STATE);
        let mut state: TrainState<R> =
            TrainState::load(&path).with_context(|| format!("resuming from {}", path.display()))?;
        // The state file predates the provenance recorded when that run ended.
        if let Ok(last) = load_model(a.out.join(LAST_MODEL)) {
            state.model.metadata = last.metadata;
        }
        state
    } else {
        TrainState::new(base_model::<R>(a)?)
    };
    let manifest = load_manifest(&a.manifest).with_context(|| format!("loading manifest {}", a.manifest.display()))?;
    let mut skipped: Vec<String> = manifest.errors.iter().map(|e| format!("{}: {}", e.location, e.message)).collect();
    let (train_entries, val_entries) = split_entries(manifest.entries, a, &cfg)?;
    let t = state.model.timesteps();
    let cs = state.model.charset().clone();
    let train = ingest(&train_entries, &cs, t, &mut skipped);
    let val = ingest(&val_entries, &cs, t, &mut skipped);
    for s in &skipped {
        warn!("skipped {s}");
    }
    if train.is_empty() {
        bail!("no valid training samples in {} ({} entries rejected)", a.manifest.display(), skipped.len());
    }
    eprintln!(
        "training on {} line(s), validating on {}, {} rejected",
        train.len(),
        val.len(),
        skipped.len()
    );
    let start_epoch = state.epoch;
    fit(&mut state, &train, &val, &cfg, &mut |p| {
        let val = match (p.val_loss, p.val_cer) {
            (Some(l), Some(c)) => format!("  val loss {l:.4} cer {:.2}%", c * 100.0),
            _ => String::new(),
        };
        eprintln!(
            "epoch {:4}  loss {:.4} cer {:.2}%{val}",
            p.epoch,
            p.train_loss,
            p.train_cer * 100.0
        );
    })?;
    if state.epoch > start_epoch {
        let record = Provenance {
            event: "train".into(),
            epochs: state.epoch - start_epoch,
            samples: train.len(),
            seed: cfg.seed,
            note: String::new(),
        };
        state.model.metadata.provenance.push(record.clone());
        save_model(&state.model, a.out.join(LAST_MODEL))?;
        let best_path = a.out.join(BEST_MODEL);
        let mut best = load_model(&best_path).with_context(|| format!("reloading {}", best_path.display()))?;
        best.metadata.provenance.push(record);
        save_model(&best, &best_path)?;
    } else if !a.out.join(BEST_MODEL).exists() {
        // Nothing trained: the initial model is both checkpoints.
        save_model(&state.model, a.out.join(BEST_MODEL))?;
        save_model(&state.model, a.out.join(LAST_MODEL))?;
        state.save(a.out.join(LAST_STATE))?;
        fs::write(a.out.join(CURVES_FILE), curves_csv(&state.curves))?;
    }
    let summary = TrainSummary {
        out: a.out.display().to_string(),
        train_samples: train.len(),
        val_samples: val.len(),
        skipped,
        epochs: state.epoch,
        best_epoch: state.best_epoch,
        best_metric: state.best_metric,
        last: state.curves.last().cloned(),
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        println!("wrote {}", Path::new(&summary.out).join(LAST_MODEL).display());
        if let Some(m) = summary.best_metric {
            println!("best epoch {} ({:.2}% CER)", summary.best_epoch, m * 100.0);
        }
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> anyhow::Result<()> {
    match a.precision {
        Precision::F32 => run_training::<f32>(&a),
        Precision::F64 => run_training::<f64>(&a),
    }
}

pub fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let manifest = load_manifest(&a.manifest).with_context(|| format!("loading manifest {}", a.manifest.display()))?;
    let mut refs = Vec::with_capacity(manifest.len());
    let mut lines = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        match load_gray(&e.image) {
            Ok(img) => {
                refs.push(kalchas::charset::normalize(&e.text));
                lines.push(prepare_whole(&img));
            }
            Err(err) => warn!("skipped {}: {err}", e.image.display()),
        }
    }
    if lines.is_empty() {
        bail!("no readable entries in {}", a.manifest.display());
    }
    let hyps: Vec<String> = model.ocr(&lines).into_iter().map(|(t, _)| t).collect();
    let report = EvalReport::compute(&refs, &hyps, a.top_k)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}
