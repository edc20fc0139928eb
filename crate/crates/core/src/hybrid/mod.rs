//! Encoder, quantum feature enhancement with residual fusion, and the
//! classification head.

mod checkpoint;
mod encoder;
mod fusion;
mod model;

pub use checkpoint::{Checkpoint, NamedTensor, RngState, FORMAT_VERSION};
pub use encoder::{ConvBlockConfig, Encoder, EncoderConfig};
pub use fusion::QuantumFusion;
pub use model::{
    classify, cross_entropy, softmax_rows, ClassifierHead, FreezePolicy, HybridModel, InitSeeds,
    ModelConfig, Optimizer, NUM_CLASSES,
};

use thiserror::Error;

use crate::qsim::QsimError;
use crate::ssl::SslError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HybridError {
    #[error("input resolution mismatch: expected {expected:?}, got {actual:?}")]
    Resolution { expected: Vec<usize>, actual: Vec<usize> },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {0} is not 0 or 1")]
    Label(u8),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Qsim(#[from] QsimError),
    #[error(transparent)]
    Ssl(#[from] SslError),
}

impl HybridError {
    /// True when the failure is a numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            HybridError::NonFinite(_) | HybridError::Tensor(TensorError::NonFinite { .. })
        )
    }
}
