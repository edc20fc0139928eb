//! Contrastive self-supervision: augmentation family, projection head and
//! the NT-Xent objective.

mod augment;
mod contrastive;

pub use augment::{make_views, AugmentParams, AugmentationConfig, CropParams};
pub use contrastive::{
    ntxent_loss, ntxent_loss_unchecked, similarity, ContrastiveConfig, EmbeddingBatch,
};

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Dense, L2Normalize, Layer, Param, Relu, Sequential, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SslError {
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("invalid embedding batch: {0}")]
    Batch(String),
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `dense → relu → dense → l2normalize`, used only during pretraining.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub layers: Sequential,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: &ContrastiveConfig, rng: &mut R) -> Self {
        Self {
            layers: Sequential::new(vec![
                Layer::Dense(Dense::new(input_dim, cfg.hidden_dim, rng)),
                Layer::Relu(Relu::default()),
                Layer::Dense(Dense::new(cfg.hidden_dim, cfg.embed_dim, rng)),
                Layer::L2Normalize(L2Normalize::default()),
            ]),
        }
    }

    /// Projects `[N, d]` features onto the unit sphere.
    pub fn project(&mut self, h: &Tensor) -> Result<Tensor, TensorError> {
        self.layers.forward(h)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor, TensorError> {
        self.layers.backward(grad)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.params_mut()
    }

    pub fn zero_grad(&mut self) {
        self.layers.zero_grad();
    }
}
