use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CurvePoint;
use crate::charset::Charset;
use crate::model::io::{read_container, write_atomic, write_container, ModelIoError};
use crate::model::{ArchConfig, CrnnModel, ModelMetadata};
use crate::nn::{ParamTensor, Real, Tensor};

pub const STATE_MAGIC: &[u8; 8] = b"KLCHTS01";
const STATE_VERSION: u32 = 1;

/// Everything needed to continue a run: parameters and RMSProp
/// accumulators at training precision, progress counters and curves.
#[derive(Debug, Clone)]
pub struct TrainState<R: Real> {
    pub model: CrnnModel<R>,
    accum: Vec<Tensor<R>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Lowest CER seen at an evaluation (validation CER when available).
    pub best_metric: Option<f64>,
    pub best_epoch: usize,
    pub curves: Vec<CurvePoint>,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    format_version: u32,
    dtype: String,
    epoch: usize,
    best_metric: Option<f64>,
    best_epoch: usize,
    curves: Vec<CurvePoint>,
    arch: ArchConfig,
    charset: Vec<u32>,
    metadata: ModelMetadata,
    tensors: Vec<(String, Vec<usize>)>,
}

impl<R: Real> TrainState<R> {
    pub fn new(model: CrnnModel<R>) -> Self {
        let accum = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        TrainState {
            model,
            accum,
            epoch: 0,
            best_metric: None,
            best_epoch: 0,
            curves: Vec::new(),
        }
    }

    pub fn accumulators(&self) -> &[Tensor<R>] {
        &self.accum
    }

    pub(crate) fn params_and_accum(&mut self) -> (&mut [ParamTensor<R>], &mut [Tensor<R>]) {
        (self.model.params_mut(), &mut self.accum)
    }

    fn elem_size() -> usize {
        std::mem::size_of::<R>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: String, t: &Tensor<R>| {
            tensors.push((name, t.shape().to_vec()));
            for v in t.data() {
                if Self::elem_size() == 4 {
                    payload.extend_from_slice(&(v.f64() as f32).to_le_bytes());
                } else {
                    payload.extend_from_slice(&v.f64().to_le_bytes());
                }
            }
        };
        for p in self.model.params() {
            push(p.name.clone(), &p.value);
        }
        for (p, a) in self.model.params().iter().zip(&self.accum) {
            push(format!("accum.{}", p.name), a);
        }
        let header = StateHeader {
            format_version: STATE_VERSION,
            dtype: R::NAME.to_string(),
            epoch: self.epoch,
            best_metric: self.best_metric,
            best_epoch: self.best_epoch,
            curves: self.curves.clone(),
            arch: self.model.config().clone(),
            charset: self.model.charset().code_points(),
            metadata: self.model.metadata.clone(),
            tensors,
        };
        write_container(STATE_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelIoError> {
        let (header, payload) = read_container::<StateHeader, _>(bytes, STATE_MAGIC, |h| {
            if h.format_version != STATE_VERSION {
                return Err(ModelIoError::Format(format!("unsupported state version {}", h.format_version)));
            }
            if h.dtype != R::NAME {
                return Err(ModelIoError::Format(format!(
                    "state holds {} tensors, expected {}",
                    h.dtype,
                    R::NAME
                )));
            }
            let elems: usize = h.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
            Ok(elems * Self::elem_size())
        })?;
        let mut values = payload.chunks_exact(Self::elem_size()).map(|c| {
            if c.len() == 4 {
                R::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            } else {
                R::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))
            }
        });
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let t = Tensor::from_vec(&shape, values.by_ref().take(n).collect())
                .map_err(|e| ModelIoError::Corruption(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if tensors.len() % 2 != 0 {
            return Err(ModelIoError::Corruption("parameter and accumulator counts differ".into()));
        }
        let accum_part = tensors.split_off(tensors.len() / 2);
        let charset = Charset::from_code_points(&header.charset)?;
        let model = CrnnModel::from_parts(header.arch, charset, tensors, header.metadata)?;
        let mut accum = Vec::with_capacity(accum_part.len());
        for (p, (name, t)) in model.params().iter().zip(accum_part) {
            if name != format!("accum.{}", p.name) || t.shape() != p.value.shape() {
                return Err(ModelIoError::Corruption(format!("accumulator {name} does not match {}", p.name)));
            }
            accum.push(t);
        }
        Ok(TrainState {
            model,
            accum,
            epoch: header.epoch,
            best_metric: header.best_metric,
            best_epoch: header.best_epoch,
            curves: header.curves,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelIoError> {
        write_atomic(path.as_ref(), &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelIoError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
