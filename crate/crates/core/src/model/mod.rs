//! The CRNN recognizer: conv stack with GroupNorm, map-to-sequence,
//! bidirectional LSTM stack, linear projection, log-softmax.

mod config;
pub mod io;
pub mod registry;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{default_groups, ArchConfig, ConvStage, Geometry, PoolSpec};

use crate::charset::Charset;
use crate::ctc::{greedy_decode, LogitSeq};
use crate::imaging::{LineImage, LINE_HEIGHT, LINE_WIDTH};
use crate::nn::{
    bilstm, bilstm_backward, conv2d, conv2d_backward, group_norm, group_norm_backward, linear, linear_backward,
    log_softmax, maxpool2d, maxpool2d_backward, relu_backward, relu_inplace, BiLstmCache, GroupNormCache, LstmWeights,
    NnError, ParamTensor, PoolCache, Real, Tensor,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture at stage {stage}: {msg}")]
    Config { stage: usize, msg: String },
    #[error("model has {model} classes but the charset needs {charset}")]
    ClassMismatch { model: usize, charset: usize },
    #[error("input geometry {got:?} does not match the model's {want:?}")]
    Geometry { got: Vec<usize>, want: Vec<usize> },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// One step in a model's training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub event: String,
    pub epochs: usize,
    pub samples: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub name: String,
    #[serde(default)]
    pub provenance: Vec<Provenance>,
}

/// CRNN parameters plus the charset they were trained against.
#[derive(Debug, Clone)]
pub struct CrnnModel<R: Real = f32> {
    config: ArchConfig,
    charset: Charset,
    params: Vec<ParamTensor<R>>,
    pub metadata: ModelMetadata,
}

struct StageCache<R: Real> {
    input: Tensor<R>,
    norm: GroupNormCache<R>,
    /// Post-ReLU activation (pre-pool).
    act: Tensor<R>,
    pool: Option<PoolCache>,
}

/// Intermediate values needed by [`CrnnModel::backward`].
pub struct ForwardCache<R: Real> {
    stages: Vec<StageCache<R>>,
    conv_out_shape: Vec<usize>,
    lstm: Vec<BiLstmCache<R>>,
    fc_input: Tensor<R>,
}

impl<R: Real> ForwardCache<R> {
    /// Hash of every ReLU on/off decision and pool argmax. Two inputs with
    /// the same signature lie in the same smooth piece of the network.
    pub fn activation_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in &self.stages {
            for v in s.act.data() {
                (*v > R::zero()).hash(&mut h);
            }
            if let Some(p) = &s.pool {
                p.argmax.hash(&mut h);
            }
        }
        h.finish()
    }
}

impl<R: Real> CrnnModel<R> {
    /// Fresh model. Conv and linear weights are Kaiming-uniform
    /// (`bound = sqrt(6 / fan_in)`), biases zero; LSTM tensors uniform in
    /// `±1/sqrt(H)`; GroupNorm gamma 1, beta 0. Deterministic in `seed`.
    pub fn build(config: ArchConfig, charset: Charset, seed: u64) -> Result<Self, ModelError> {
        if config.num_classes != charset.size() {
            return Err(ModelError::ClassMismatch {
                model: config.num_classes,
                charset: charset.size(),
            });
        }
        let shapes = config.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm_bound = 1.0 / (config.hidden as f64).sqrt();
        let params = shapes
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.starts_with("lstm") {
                    Tensor::<f64>::uniform(&shape, lstm_bound, &mut rng)
                } else if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    Tensor::uniform(&shape, (6.0 / fan_in as f64).sqrt(), &mut rng)
                } else if name.ends_with(".gamma") {
                    Tensor::full(&shape, 1.0)
                } else {
                    Tensor::zeros(&shape)
                };
                ParamTensor::new(name, value.cast())
            })
            .collect();
        Ok(CrnnModel {
            config,
            charset,
            params,
            metadata: ModelMetadata::default(),
        })
    }

    /// Assembles a model from stored tensors; names and shapes must match
    /// the config exactly.
    pub fn from_parts(
        config: ArchConfig,
        charset: Charset,
        tensors: Vec<(String, Tensor<R>)>,
        metadata: ModelMetadata,
    ) -> Result<Self, ModelError> {
        if config.num_classes != charset.size() {
            return Err(ModelError::ClassMismatch {
                model: config.num_classes,
                charset: charset.size(),
            });
        }
        let shapes = config.param_shapes()?;
        if shapes.len() != tensors.len() {
            return Err(NnError::Shape(format!("expected {} tensors, got {}", shapes.len(), tensors.len())).into());
        }
        let mut params = Vec::with_capacity(shapes.len());
        for ((name, shape), (got_name, t)) in shapes.into_iter().zip(tensors) {
            if name != got_name || shape != t.shape() {
                return Err(NnError::Shape(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                ))
                .into());
            }
            params.push(ParamTensor::new(name, t));
        }
        Ok(CrnnModel {
            config,
            charset,
            params,
            metadata,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn charset(&self) -> &Charset {
        &self.charset
    }

    pub fn params(&self) -> &[ParamTensor<R>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor<R>] {
        &mut self.params
    }

    pub fn name(&self) -> &str {
        &self.metadata.name
    }

    pub fn timesteps(&self) -> usize {
        self.config.timesteps().expect("validated at construction")
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(ParamTensor::zero_grad);
    }

    /// Same model in another precision.
    pub fn cast<S: Real>(&self) -> CrnnModel<S> {
        CrnnModel {
            config: self.config.clone(),
            charset: self.charset.clone(),
            params: self.params.iter().map(ParamTensor::cast).collect(),
            metadata: self.metadata.clone(),
        }
    }

    fn p(&self, i: usize) -> &Tensor<R> {
        &self.params[i].value
    }

    fn lstm_base(&self, layer: usize) -> usize {
        4 * self.config.stages.len() + 6 * layer
    }

    fn lstm_weights(&self, layer: usize) -> (LstmWeights<'_, R>, LstmWeights<'_, R>) {
        let b = self.lstm_base(layer);
        let w = |o: usize| LstmWeights {
            w_ih: self.p(b + o),
            w_hh: self.p(b + o + 1),
            bias: self.p(b + o + 2),
        };
        (w(0), w(3))
    }

    fn fc_index(&self) -> usize {
        self.lstm_base(self.config.lstm_layers)
    }

    fn check_input(&self, batch: &Tensor<R>) -> Result<usize, ModelError> {
        let want = [1, self.config.input_height, self.config.input_width];
        match batch.shape() {
            [n, rest @ ..] if rest == want => Ok(*n),
            other => Err(ModelError::Geometry {
                got: other.to_vec(),
                want: [&[0usize][..], &want].concat(),
            }),
        }
    }

    /// Pre-softmax class scores `[T, N, C]` for a `[N, 1, H, W]` batch.
    fn scores(&self, batch: &Tensor<R>, keep: bool) -> Result<(Tensor<R>, Option<ForwardCache<R>>), ModelError> {
        let n = self.check_input(batch)?;
        let mut x = batch.clone();
        let mut stages = Vec::new();
        for (i, s) in self.config.stages.iter().enumerate() {
            let y = conv2d(&x, self.p(4 * i), self.p(4 * i + 1), s.stride, s.padding)?;
            let (mut a, norm) = group_norm(&y, s.groups, self.p(4 * i + 2), self.p(4 * i + 3), self.config.norm_eps)?;
            relu_inplace(&mut a);
            let (next, pool) = match s.pool {
                Some(p) => {
                    let (o, c) = maxpool2d(&a, p.kernel, p.stride)?;
                    (o, Some(c))
                }
                None => (a.clone(), None),
            };
            if keep {
                stages.push(StageCache {
                    input: x,
                    norm,
                    act: a,
                    pool,
                });
            }
            x = next;
        }
        let conv_out_shape = x.shape().to_vec();
        let &[_, c, _, t] = x.shape() else { unreachable!() };
        // [N, C, 1, T] -> [T, N, C]
        let mut seq = Tensor::zeros(&[t, n, c]);
        {
            let src = x.data();
            let dst = seq.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    for step in 0..t {
                        dst[(step * n + s) * c + ch] = src[(s * c + ch) * t + step];
                    }
                }
            }
        }
        let mut lstm = Vec::new();
        for l in 0..self.config.lstm_layers {
            let (f, b) = self.lstm_weights(l);
            let (out, cache) = bilstm(&seq, f, b)?;
            if keep {
                lstm.push(cache);
            }
            seq = out;
        }
        let fc = self.fc_index();
        let scores = linear(&seq, self.p(fc), self.p(fc + 1))?;
        let cache = keep.then(|| ForwardCache {
            stages,
            conv_out_shape,
            lstm,
            fc_input: seq,
        });
        Ok((scores, cache))
    }

    /// Log-probabilities `[T, N, C]` for a `[N, 1, H, W]` batch.
    pub fn forward(&self, batch: &Tensor<R>) -> Result<Tensor<R>, ModelError> {
        Ok(log_softmax(&self.scores(batch, false)?.0))
    }

    /// As [`forward`](Self::forward), also returning what backward needs.
    pub fn forward_train(&self, batch: &Tensor<R>) -> Result<(Tensor<R>, ForwardCache<R>), ModelError> {
        let (scores, cache) = self.scores(batch, true)?;
        Ok((log_softmax(&scores), cache.expect("cache requested")))
    }

    /// Backpropagates `grad` (with respect to the pre-softmax scores, as
    /// produced by CTC) and adds parameter gradients into each `grad` slot.
    /// Returns the input gradient when `want_input` is set.
    pub fn backward(
        &mut self,
        cache: &ForwardCache<R>,
        grad: &Tensor<R>,
        want_input: bool,
    ) -> Result<Option<Tensor<R>>, ModelError> {
        let fc = self.fc_index();
        let g = linear_backward(&cache.fc_input, self.p(fc), grad)?;
        self.params[fc].accumulate(&g.weight);
        self.params[fc + 1].accumulate(&g.bias);
        let mut dseq = g.input;
        for l in (0..self.config.lstm_layers).rev() {
            let (f, b) = self.lstm_weights(l);
            let gl = bilstm_backward(&cache.lstm[l], f, b, &dseq)?;
            let base = self.lstm_base(l);
            for (o, lg) in [(0, &gl.fwd), (3, &gl.bwd)] {
                self.params[base + o].accumulate(&lg.w_ih);
                self.params[base + o + 1].accumulate(&lg.w_hh);
                self.params[base + o + 2].accumulate(&lg.bias);
            }
            dseq = gl.input;
        }
        let &[_, c, _, t] = cache.conv_out_shape.as_slice() else { unreachable!() };
        let n = dseq.shape()[1];
        let mut dx = Tensor::zeros(&cache.conv_out_shape);
        {
            let src = dseq.data();
            let dst = dx.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    for step in 0..t {
                        dst[(s * c + ch) * t + step] = src[(step * n + s) * c + ch];
                    }
                }
            }
        }
        for (i, s) in self.config.stages.clone().iter().enumerate().rev() {
            let sc = &cache.stages[i];
            let mut da = match &sc.pool {
                Some(p) => maxpool2d_backward(p, &dx)?,
                None => dx,
            };
            relu_backward(&sc.act, &mut da);
            let gn = group_norm_backward(&sc.norm, self.p(4 * i + 2), &da)?;
            self.params[4 * i + 2].accumulate(&gn.gamma);
            self.params[4 * i + 3].accumulate(&gn.beta);
            let need_input = i > 0 || want_input;
            let gc = conv2d_backward(&sc.input, self.p(4 * i), &gn.input, s.stride, s.padding, need_input)?;
            self.params[4 * i].accumulate(&gc.weight);
            self.params[4 * i + 1].accumulate(&gc.bias);
            dx = match gc.input {
                Some(t) => t,
                None => return Ok(None),
            };
        }
        Ok(Some(dx))
    }

    /// Stacks line images into a `[N, 1, 80, 760]` batch.
    pub fn batch_lines(&self, lines: &[&LineImage]) -> Result<Tensor<R>, ModelError> {
        if self.config.input_height != LINE_HEIGHT || self.config.input_width != LINE_WIDTH {
            return Err(ModelError::Geometry {
                got: vec![LINE_HEIGHT, LINE_WIDTH],
                want: vec![self.config.input_height, self.config.input_width],
            });
        }
        let mut data = Vec::with_capacity(lines.len() * LINE_HEIGHT * LINE_WIDTH);
        for l in lines {
            data.extend(l.data().iter().map(|&v| R::of(v as f64)));
        }
        Ok(Tensor::from_vec(&[lines.len(), 1, LINE_HEIGHT, LINE_WIDTH], data)?)
    }

    /// Per-sample log-probabilities for prepared lines.
    pub fn logits(&self, lines: &[&LineImage]) -> Result<Vec<LogitSeq>, ModelError> {
        if lines.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.forward(&self.batch_lines(lines)?)?;
        Ok((0..lines.len())
            .map(|i| LogitSeq::from_batch(&out, i).expect("model output is [T,N,C] and normalized"))
            .collect())
    }

    /// Greedy-decoded transcript and mean best-path probability per line,
    /// in input order.
    pub fn ocr(&self, lines: &[LineImage]) -> Vec<(String, f64)> {
        self.ocr_timed(lines, OCR_CHUNK).0
    }

    /// [`ocr`](Self::ocr) plus throughput in lines per second.
    pub fn ocr_timed(&self, lines: &[LineImage], chunk: usize) -> (Vec<(String, f64)>, f64) {
        let start = Instant::now();
        let mut out = Vec::with_capacity(lines.len());
        for group in lines.chunks(chunk.max(1)) {
            let refs: Vec<&LineImage> = group.iter().collect();
            let logits = self.logits(&refs).expect("line geometry matches the model");
            out.extend(logits.iter().map(|l| greedy_decode(l, &self.charset)));
        }
        let secs = start.elapsed().as_secs_f64();
        let rate = if secs > 0.0 { lines.len() as f64 / secs } else { f64::INFINITY };
        (out, rate)
    }
}

/// Lines per forward batch during inference.
pub const OCR_CHUNK: usize = 8;

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(classes: usize) -> ArchConfig {
        ArchConfig {
            input_height: 8,
            input_width: 12,
            stages: vec![
                ConvStage::same3(2, Some(PoolSpec::square(2))),
                ConvStage::same3(4, Some(PoolSpec::tall())),
                ConvStage {
                    out_channels: 4,
                    kernel: (2, 1),
                    stride: (1, 1),
                    padding: (0, 0),
                    pool: None,
                    groups: 2,
                },
            ],
            hidden: 3,
            lstm_layers: 1,
            num_classes: classes,
            norm_eps: 1e-5,
        }
    }

    fn abc() -> Charset {
        Charset::from_chars("abc".chars()).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = CrnnModel::<f32>::build(tiny_config(4), abc(), 42).unwrap();
        let b = CrnnModel::<f32>::build(tiny_config(4), abc(), 42).unwrap();
        let c = CrnnModel::<f32>::build(tiny_config(4), abc(), 43).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.value, y.value);
        }
        assert_ne!(a.params()[0].value, c.params()[0].value);
    }

    #[test]
    fn class_count_must_match_charset() {
        assert!(matches!(
            CrnnModel::<f32>::build(tiny_config(5), abc(), 1),
            Err(ModelError::ClassMismatch { .. })
        ));
    }

    #[test]
    fn forward_shape_and_normalization() {
        let m = CrnnModel::<f64>::build(tiny_config(4), abc(), 7).unwrap();
        let x = Tensor::<f64>::zeros(&[2, 1, 8, 12]);
        let out = m.forward(&x).unwrap();
        assert_eq!(out.shape(), &[6, 2, 4]);
        assert!(out.all_finite());
        for row in out.data().chunks(4) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_geometry_is_rejected() {
        let m = CrnnModel::<f32>::build(tiny_config(4), abc(), 7).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros(&[1, 1, 8, 13])),
            Err(ModelError::Geometry { .. })
        ));
    }

    #[test]
    fn ocr_of_nothing() {
        let m = CrnnModel::<f32>::build(ArchConfig::small(4), abc(), 7).unwrap();
        assert!(m.ocr(&[]).is_empty());
    }
}
