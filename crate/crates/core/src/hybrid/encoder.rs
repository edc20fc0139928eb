use rand::Rng;
use serde::{Deserialize, Serialize};

use super::HybridError;
use crate::tensor::{
    BatchNorm, Conv2d, Dense, GlobalAvgPool, Layer, Mode, Param, Relu, Sequential, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockConfig {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub blocks: Vec<ConvBlockConfig>,
    pub feature_dim: usize,
    /// Use depthwise + pointwise convolutions after the stem block.
    pub separable: bool,
    pub batchnorm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            blocks: vec![
                ConvBlockConfig { channels: 8, stride: 2 },
                ConvBlockConfig { channels: 16, stride: 2 },
                ConvBlockConfig { channels: 32, stride: 2 },
            ],
            feature_dim: 128,
            separable: true,
            batchnorm: true,
        }
    }
}

impl EncoderConfig {
    /// Two plain conv blocks, the small supervised-only reference network.
    pub fn simple_baseline(height: usize, width: usize, feature_dim: usize) -> Self {
        Self {
            height,
            width,
            blocks: vec![
                ConvBlockConfig { channels: 8, stride: 2 },
                ConvBlockConfig { channels: 16, stride: 2 },
            ],
            feature_dim,
            separable: false,
            batchnorm: true,
        }
    }

    pub fn validate(&self) -> Result<(), HybridError> {
        if self.blocks.is_empty() {
            return Err(HybridError::Config("encoder needs at least one conv block".into()));
        }
        if self.blocks.iter().any(|b| b.channels == 0 || b.stride == 0) {
            return Err(HybridError::Config("conv block channels and stride must be positive".into()));
        }
        if self.feature_dim == 0 || self.height == 0 || self.width == 0 {
            return Err(HybridError::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Conv stack → global average pool → dense to `feature_dim`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub blocks: Vec<Sequential>,
    /// Global average pool followed by the output dense layer.
    pub out: Sequential,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self, HybridError> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut cin = 1;
        for (i, b) in config.blocks.iter().enumerate() {
            let mut layers = Vec::new();
            if i == 0 || !config.separable {
                layers.push(Layer::Conv2d(Conv2d::new(cin, b.channels, 3, b.stride, 1, 1, rng)));
            } else {
                layers.push(Layer::Conv2d(Conv2d::new(cin, cin, 3, b.stride, 1, cin, rng)));
                layers.push(Layer::Conv2d(Conv2d::new(cin, b.channels, 1, 1, 0, 1, rng)));
            }
            if config.batchnorm {
                layers.push(Layer::BatchNorm(BatchNorm::new(b.channels)));
            }
            layers.push(Layer::Relu(Relu::default()));
            blocks.push(Sequential::new(layers));
            cin = b.channels;
        }
        let out = Sequential::new(vec![
            Layer::GlobalAvgPool(GlobalAvgPool::default()),
            Layer::Dense(Dense::new(cin, config.feature_dim, rng)),
        ]);
        Ok(Self { config, blocks, out })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Number of trainable groups: one per conv block plus the output layer.
    pub fn num_groups(&self) -> usize {
        self.blocks.len() + 1
    }

    pub fn group(&self, i: usize) -> &Sequential {
        if i < self.blocks.len() {
            &self.blocks[i]
        } else {
            &self.out
        }
    }

    pub fn group_mut(&mut self, i: usize) -> &mut Sequential {
        if i < self.blocks.len() {
            &mut self.blocks[i]
        } else {
            &mut self.out
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for i in 0..self.num_groups() {
            self.group_mut(i).set_mode(mode);
        }
    }

    /// Accepts `[N, H, W]` or `[N, 1, H, W]`.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, HybridError> {
        let s = x.shape();
        let (h, w) = match s.len() {
            3 => (s[1], s[2]),
            4 if s[1] == 1 => (s[2], s[3]),
            _ => {
                return Err(HybridError::Resolution {
                    expected: vec![self.config.height, self.config.width],
                    actual: s.to_vec(),
                })
            }
        };
        if (h, w) != (self.config.height, self.config.width) {
            return Err(HybridError::Resolution {
                expected: vec![self.config.height, self.config.width],
                actual: vec![h, w],
            });
        }
        let mut cur = x.clone().reshape(vec![s[0], 1, h, w])?;
        for i in 0..self.num_groups() {
            cur = self.group_mut(i).forward(&cur)?;
        }
        Ok(cur)
    }

    /// Backpropagates through groups `first_group..`; earlier groups are
    /// skipped and no input gradient is produced for them.
    pub fn backward(&mut self, grad: &Tensor, first_group: usize) -> Result<Option<Tensor>, HybridError> {
        let mut cur = grad.clone();
        for i in (first_group..self.num_groups()).rev() {
            cur = self.group_mut(i).backward(&cur)?;
        }
        Ok((first_group == 0).then_some(cur))
    }

    pub fn params(&self) -> Vec<&Param> {
        (0..self.num_groups()).flat_map(|i| self.group(i).params()).collect()
    }

    pub fn zero_grad(&mut self) {
        for i in 0..self.num_groups() {
            self.group_mut(i).zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        (0..self.num_groups()).map(|i| self.group(i).parameter_count()).sum()
    }
}
