//! RMSProp training under CTC loss.
//!
//! Samples are processed one at a time and their gradients accumulated, so
//! a batch of `B` costs `B` single-sample passes; GroupNorm makes this
//! exactly equal to a batched pass. Each epoch's shuffle is seeded from
//! `(seed, epoch)`, which keeps resumed runs identical to uninterrupted ones.

mod state;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use state::{TrainState, STATE_MAGIC};

use crate::ctc::{ctc_loss, greedy_decode, LogitSeq};
use crate::dataset::{load_samples, DatasetError, ManifestEntry, Sample};
use crate::imaging::LineImage;
use crate::metrics::cer;
use crate::model::io::{save_model, ModelIoError};
use crate::model::{CrnnModel, ModelError, Provenance, OCR_CHUNK};
use crate::nn::{ParamTensor, Real, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("cannot split an empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] ModelIoError),
    #[error("non-finite {what} in epoch {epoch}, batch {batch}: {samples:?}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
        samples: Vec<String>,
    },
    #[error("ctc: {0}")]
    Ctc(String),
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(ModelIoError::Io(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,
    pub split_fraction: f64,
    pub seed: u64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub gradient_clip_norm: Option<f64>,
    pub eval_every: usize,
    /// Where `best.klch`, `last.klch`, `last.state` and `curves.csv` go.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-4,
            rmsprop_alpha: 0.99,
            rmsprop_eps: 1e-8,
            split_fraction: 0.9,
            seed: 0,
            gradient_clip_norm: Some(5.0),
            eval_every: 1,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("split_fraction must lie strictly between 0 and 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.rmsprop_eps > 0.0) {
            return bad("learning_rate and rmsprop_eps must be positive");
        }
        if !(self.rmsprop_alpha > 0.0 && self.rmsprop_alpha < 1.0) {
            return bad("rmsprop_alpha must lie strictly between 0 and 1");
        }
        if let Some(c) = self.gradient_clip_norm {
            if !(c > 0.0) {
                return bad("gradient_clip_norm must be positive");
            }
        }
        Ok(())
    }
}

/// One row of `curves.csv`. Validation fields are `None` when there is no
/// validation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub train_cer: f64,
    pub val_cer: Option<f64>,
}

pub const CURVES_HEADER: &str = "epoch,train_loss,val_loss,train_cer,val_cer";

pub fn curves_csv(points: &[CurvePoint]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
    let mut s = String::from(CURVES_HEADER);
    s.push('\n');
    for p in points {
        s.push_str(&format!(
            "{},{:.8},{},{:.8},{}\n",
            p.epoch,
            p.train_loss,
            opt(p.val_loss),
            p.train_cer,
            opt(p.val_cer)
        ));
    }
    s
}

/// Seeded shuffle; the first `ceil(fraction * n)` items train, the rest validate.
pub fn split_dataset<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), TrainError> {
    if items.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TrainError::Config("split fraction must lie strictly between 0 and 1".into()));
    }
    let n = items.len();
    // the epsilon absorbs products like 0.7 * 10 = 7.000000000000001
    let n_train = ((fraction * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = idx[..n_train].iter().map(|&i| items[i].clone()).collect();
    let val = idx[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, val))
}

/// `v <- a v + (1 - a) g^2; theta <- theta - lr g / (sqrt(v) + eps)`, then
/// zeroes the gradients.
pub fn rmsprop_step<R: Real>(
    params: &mut [ParamTensor<R>],
    accum: &mut [Tensor<R>],
    lr: f64,
    alpha: f64,
    eps: f64,
) -> Result<(), String> {
    if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
        return Err(format!("gradient of {} is not finite", p.name));
    }
    let (lr, alpha, eps) = (R::of(lr), R::of(alpha), R::of(eps));
    let one = R::one();
    for (p, v) in params.iter_mut().zip(accum.iter_mut()) {
        let ParamTensor { value, grad, .. } = p;
        for ((theta, g), acc) in value.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
            *acc = alpha * *acc + (one - alpha) * *g * *g;
            *theta -= lr * *g / (acc.sqrt() + eps);
        }
        grad.fill(R::zero());
    }
    Ok(())
}

pub fn global_grad_norm<R: Real>(params: &[ParamTensor<R>]) -> f64 {
    params.iter().map(|p| p.grad.sum_sq()).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<R: Real>(params: &mut [ParamTensor<R>], max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if norm > max_norm {
        let s = R::of(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.scale(s);
        }
    }
    norm
}

/// Mean CTC loss and CER of `model` on `samples` (greedy decoding).
pub fn evaluate<R: Real>(model: &CrnnModel<R>, samples: &[Sample]) -> Result<(f64, f64, Vec<String>), TrainError> {
    let mut total = 0.0;
    let mut hyps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(OCR_CHUNK) {
        let lines: Vec<&LineImage> = chunk.iter().map(|s| &s.image).collect();
        for (s, lp) in chunk.iter().zip(model.logits(&lines)?) {
            total += ctc_loss(&lp, &s.labels).map_err(|e| TrainError::Ctc(e.to_string()))?.loss;
            hyps.push(greedy_decode(&lp, model.charset()).0);
        }
    }
    let refs: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
    let hyp_refs: Vec<&str> = hyps.iter().map(String::as_str).collect();
    let rate = cer(&refs, &hyp_refs).unwrap_or(0.0);
    Ok((total / samples.len().max(1) as f64, rate, hyps))
}

/// Runs epochs `state.epoch + 1 ..= config.epochs`, calling `progress` with
/// each new curve point.
pub fn fit<R: Real>(
    state: &mut TrainState<R>,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    progress: &mut dyn FnMut(&CurvePoint),
) -> Result<(), TrainError> {
    config.validate()?;
    if train.is_empty() && state.epoch < config.epochs {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let c = state.model.config().num_classes;
    while state.epoch < config.epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut hyps = vec![String::new(); train.len()];
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            state.model.zero_grad();
            for &i in batch {
                let s = &train[i];
                let input = state.model.batch_lines(&[&s.image])?;
                let (lp, cache) = state.model.forward_train(&input)?;
                let seq = LogitSeq::from_batch(&lp, 0).map_err(|e| TrainError::Ctc(e.to_string()))?;
                let r = ctc_loss(&seq, &s.labels).map_err(|e| TrainError::Ctc(e.to_string()))?;
                hyps[i] = greedy_decode(&seq, state.model.charset()).0;
                batch_loss += r.loss;
                let grad = Tensor::from_vec(
                    &[seq.timesteps(), 1, c],
                    r.grad.iter().map(|g| R::of(g * scale)).collect(),
                )
                .expect("ctc gradient is [T, C]");
                state.model.backward(&cache, &grad, false)?;
            }
            let ids = || batch.iter().map(|&i| train[i].id.clone()).collect::<Vec<_>>();
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "loss",
                    epoch,
                    batch: b,
                    samples: ids(),
                });
            }
            loss_sum += batch_loss;
            if let Some(max) = config.gradient_clip_norm {
                clip_grad_norm(state.model.params_mut(), max);
            }
            let (params, accum) = state.params_and_accum();
            rmsprop_step(params, accum, config.learning_rate, config.rmsprop_alpha, config.rmsprop_eps).map_err(
                |_| TrainError::NonFinite {
                    what: "gradient",
                    epoch,
                    batch: b,
                    samples: ids(),
                },
            )?;
        }
        state.epoch = epoch;

        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let refs: Vec<&str> = train.iter().map(|s| s.text.as_str()).collect();
            let hyp_refs: Vec<&str> = hyps.iter().map(String::as_str).collect();
            let train_cer = cer(&refs, &hyp_refs).unwrap_or(0.0);
            let (val_loss, val_cer) = if val.is_empty() {
                (None, None)
            } else {
                let (l, r, _) = evaluate(&state.model, val)?;
                (Some(l), Some(r))
            };
            let point = CurvePoint {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                val_loss,
                train_cer,
                val_cer,
            };
            info!(
                "epoch {epoch}: train loss {:.4} cer {:.4}{}",
                point.train_loss,
                point.train_cer,
                val_cer.map(|v| format!(", val cer {v:.4}")).unwrap_or_default()
            );
            let metric = val_cer.unwrap_or(train_cer);
            let improved = state.best_metric.map_or(true, |best| metric < best);
            if improved {
                state.best_metric = Some(metric);
                state.best_epoch = epoch;
            }
            state.curves.push(point.clone());
            progress(&point);
            if let Some(dir) = &config.checkpoint_dir {
                write_checkpoints(state, dir, improved)?;
            }
        }
    }
    Ok(())
}

pub const BEST_MODEL: &str = "best.klch";
pub const LAST_MODEL: &str = "last.klch";
pub const LAST_STATE: &str = "last.state";
pub const CURVES_FILE: &str = "curves.csv";

fn write_checkpoints<R: Real>(state: &TrainState<R>, dir: &Path, best: bool) -> Result<(), TrainError> {
    save_model(&state.model, dir.join(LAST_MODEL))?;
    if best {
        save_model(&state.model, dir.join(BEST_MODEL))?;
    }
    state.save(dir.join(LAST_STATE))?;
    let mut f = fs::File::create(dir.join(CURVES_FILE))?;
    f.write_all(curves_csv(&state.curves).as_bytes())?;
    Ok(())
}

/// Result of [`train`].
pub struct TrainOutcome<R: Real> {
    pub model: CrnnModel<R>,
    pub curves: Vec<CurvePoint>,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
}

/// Trains `model` from scratch accumulators on `train`, validating on `val`.
pub fn train<R: Real>(
    model: CrnnModel<R>,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    progress: &mut dyn FnMut(&CurvePoint),
) -> Result<TrainOutcome<R>, TrainError> {
    let samples = train.len();
    let mut state = TrainState::new(model);
    fit(&mut state, train, val, config, progress)?;
    if config.epochs > 0 {
        state.model.metadata.provenance.push(Provenance {
            event: "train".into(),
            epochs: config.epochs,
            samples,
            seed: config.seed,
            note: String::new(),
        });
    }
    Ok(TrainOutcome {
        model: state.model,
        curves: state.curves,
        best_epoch: state.best_epoch,
        best_metric: state.best_metric,
    })
}

/// Loads a manifest's entries, splits them and encodes against `model`.
pub fn prepare_split<R: Real>(
    model: &CrnnModel<R>,
    entries: &[ManifestEntry],
    config: &TrainConfig,
) -> Result<(Vec<Sample>, Vec<Sample>), TrainError> {
    let (tr, va) = split_dataset(entries, config.split_fraction, config.seed)?;
    let t = model.timesteps();
    Ok((load_samples(&tr, model.charset(), t)?, load_samples(&va, model.charset(), t)?))
}

/// Continues training an existing model on new samples with fresh optimizer
/// state and no validation split. Zero epochs returns the model unchanged.
pub fn fine_tune<R: Real>(
    model: CrnnModel<R>,
    samples: &[Sample],
    config: &TrainConfig,
    note: &str,
    progress: &mut dyn FnMut(&CurvePoint),
) -> Result<CrnnModel<R>, TrainError> {
    if config.epochs == 0 {
        return Ok(model);
    }
    for (i, s) in samples.iter().enumerate() {
        let missing = model.charset().missing_chars(&s.text);
        if !missing.is_empty() {
            return Err(DatasetError::OutOfCharset {
                index: i,
                id: s.id.clone(),
                chars: missing,
            }
            .into());
        }
    }
    let mut state = TrainState::new(model);
    fit(&mut state, samples, &[], config, progress)?;
    state.model.metadata.provenance.push(Provenance {
        event: "fine_tune".into(),
        epochs: config.epochs,
        samples: samples.len(),
        seed: config.seed,
        note: note.to_string(),
    });
    Ok(state.model)
}
