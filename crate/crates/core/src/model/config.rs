use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::imaging::{LINE_HEIGHT, LINE_WIDTH};
use crate::nn::{conv_output_size, pool_output_size};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl PoolSpec {
    pub fn square(k: usize) -> Self {
        PoolSpec {
            kernel: (k, k),
            stride: (k, k),
        }
    }

    /// Halves height only.
    pub fn tall() -> Self {
        PoolSpec {
            kernel: (2, 1),
            stride: (2, 1),
        }
    }
}

/// One conv -> GroupNorm -> ReLU -> optional max-pool block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub pool: Option<PoolSpec>,
    pub groups: usize,
}

impl ConvStage {
    /// 3x3, stride 1, padding 1, with the default group rule.
    pub fn same3(out_channels: usize, pool: Option<PoolSpec>) -> Self {
        ConvStage {
            out_channels,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (1, 1),
            pool,
            groups: default_groups(out_channels),
        }
    }
}

/// 32 groups, or one group per channel below 32 channels.
pub fn default_groups(channels: usize) -> usize {
    if channels < 32 {
        channels
    } else {
        32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub stages: Vec<ConvStage>,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub num_classes: usize,
    pub norm_eps: f64,
}

/// Derived layer geometry of a validated config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Geometry {
    /// `(channels, height, width)` entering each stage, plus the final output.
    pub maps: Vec<(usize, usize, usize)>,
    pub timesteps: usize,
    pub features: usize,
}

impl ArchConfig {
    /// Seven stages (64..512 channels) collapsing 80x760 to a 1x190 sequence,
    /// then two bidirectional LSTM layers of 256 units.
    pub fn default_for(num_classes: usize) -> Self {
        Self::with_channels(num_classes, [64, 128, 256, 256, 512, 512, 512], 256)
    }

    /// The default topology with custom channel widths and LSTM size; used
    /// for desk-scale experiments.
    pub fn with_channels(num_classes: usize, channels: [usize; 7], hidden: usize) -> Self {
        let sq = Some(PoolSpec::square(2));
        let tall = Some(PoolSpec::tall());
        let mut stages = vec![
            ConvStage::same3(channels[0], sq),
            ConvStage::same3(channels[1], sq),
            ConvStage::same3(channels[2], None),
            ConvStage::same3(channels[3], tall),
            ConvStage::same3(channels[4], tall),
            ConvStage::same3(channels[5], tall),
        ];
        stages.push(ConvStage {
            out_channels: channels[6],
            kernel: (2, 1),
            stride: (1, 1),
            padding: (0, 0),
            pool: None,
            groups: default_groups(channels[6]),
        });
        ArchConfig {
            input_height: LINE_HEIGHT,
            input_width: LINE_WIDTH,
            stages,
            hidden,
            lstm_layers: 2,
            num_classes,
            norm_eps: 1e-5,
        }
    }

    /// Narrow variant (4..32 channels, 32 LSTM units) that trains in seconds.
    pub fn small(num_classes: usize) -> Self {
        Self::with_channels(num_classes, [4, 8, 16, 16, 32, 32, 32], 32)
    }

    /// Walks the stack, checking every stage fits and the height collapses to 1.
    pub fn geometry(&self) -> Result<Geometry, ModelError> {
        let cfg = |stage: usize, msg: String| ModelError::Config { stage, msg };
        if self.stages.is_empty() {
            return Err(cfg(0, "at least one conv stage is required".into()));
        }
        if self.hidden == 0 || self.lstm_layers == 0 {
            return Err(cfg(self.stages.len(), "hidden size and LSTM layers must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(cfg(self.stages.len(), "need the blank plus at least one character".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(cfg(0, "norm_eps must be positive".into()));
        }
        let (mut c, mut h, mut w) = (1usize, self.input_height, self.input_width);
        let mut maps = Vec::with_capacity(self.stages.len() + 1);
        for (i, s) in self.stages.iter().enumerate() {
            maps.push((c, h, w));
            if s.out_channels == 0 {
                return Err(cfg(i, "zero output channels".into()));
            }
            if s.groups == 0 || s.out_channels % s.groups != 0 {
                return Err(cfg(i, format!("{} groups do not divide {} channels", s.groups, s.out_channels)));
            }
            let oh = conv_output_size(h, s.kernel.0, s.stride.0, s.padding.0);
            let ow = conv_output_size(w, s.kernel.1, s.stride.1, s.padding.1);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(cfg(i, format!("kernel {:?} does not fit a {h}x{w} map", s.kernel)));
            };
            (c, h, w) = (s.out_channels, oh, ow);
            if let Some(p) = s.pool {
                let ph = pool_output_size(h, p.kernel.0, p.stride.0);
                let pw = pool_output_size(w, p.kernel.1, p.stride.1);
                let (Some(ph), Some(pw)) = (ph, pw) else {
                    return Err(cfg(i, format!("pool {:?} does not fit a {h}x{w} map", p.kernel)));
                };
                (h, w) = (ph, pw);
            }
        }
        maps.push((c, h, w));
        if h != 1 {
            return Err(cfg(
                self.stages.len() - 1,
                format!("conv stack leaves height {h}, expected 1"),
            ));
        }
        Ok(Geometry {
            maps,
            timesteps: w,
            features: c,
        })
    }

    pub fn timesteps(&self) -> Result<usize, ModelError> {
        Ok(self.geometry()?.timesteps)
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
        let geo = self.geometry()?;
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            let cin = geo.maps[i].0;
            out.push((format!("conv{i}.weight"), vec![s.out_channels, cin, s.kernel.0, s.kernel.1]));
            out.push((format!("conv{i}.bias"), vec![s.out_channels]));
            out.push((format!("norm{i}.gamma"), vec![s.out_channels]));
            out.push((format!("norm{i}.beta"), vec![s.out_channels]));
        }
        let h = self.hidden;
        for l in 0..self.lstm_layers {
            let d = if l == 0 { geo.features } else { 2 * h };
            for dir in ["fwd", "bwd"] {
                out.push((format!("lstm{l}.{dir}.w_ih"), vec![4 * h, d]));
                out.push((format!("lstm{l}.{dir}.w_hh"), vec![4 * h, h]));
                out.push((format!("lstm{l}.{dir}.bias"), vec![4 * h]));
            }
        }
        out.push(("fc.weight".into(), vec![self.num_classes, 2 * h]));
        out.push(("fc.bias".into(), vec![self.num_classes]));
        Ok(out)
    }
}
