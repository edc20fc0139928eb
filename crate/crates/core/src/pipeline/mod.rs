//! Two-stage training (contrastive pretraining, supervised fine-tuning),
//! baseline and ablation runs, and run records.

mod config;
mod matrix;
mod train;

pub use config::{apply_override, Ablation, DataConfig, ExperimentConfig, TrainingConfig, Variant};
pub use matrix::{run_matrix, run_variant, MatrixOutput, RunRecord, VariantSummary};
pub use train::{
    evaluate_model, finetune, init_model, predict, pretrain, EpochRecord, FinetuneRecord, FinetuneSpec,
    PretrainOutput,
};

use std::path::Path;

use thiserror::Error;

use crate::data::{self, generate_synthetic, split_by_patient, DataError, Dataset, SplitManifest};
use crate::eval::EvalError;
use crate::hybrid::HybridError;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("{0} split contains a single class")]
    SingleClass(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] HybridError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Data(DataError::Config(_)) => 1,
            PipelineError::Model(e) if e.is_numeric() => 3,
            PipelineError::Model(HybridError::Config(_)) => 1,
            PipelineError::Model(HybridError::Ssl(crate::ssl::SslError::Config(_))) => 1,
            PipelineError::Model(HybridError::Ssl(crate::ssl::SslError::Temperature(_))) => 1,
            PipelineError::Model(HybridError::Qsim(_)) => 1,
            PipelineError::Eval(EvalError::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}

impl From<crate::ssl::SslError> for PipelineError {
    fn from(e: crate::ssl::SslError) -> Self {
        PipelineError::Model(e.into())
    }
}

/// Sink for single-line progress events.
pub trait Progress: Sync {
    fn event(&self, event: serde_json::Value);
}

/// Discards all events.
pub struct Silent;

impl Progress for Silent {
    fn event(&self, _: serde_json::Value) {}
}

/// A dataset together with its patient-level split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub manifest: SplitManifest,
}

pub const SPLIT_FILE: &str = "split.json";

impl Prepared {
    /// Generates the synthetic dataset and splits it, both from `cfg.seed`.
    pub fn synthetic(cfg: &ExperimentConfig) -> Result<Self, PipelineError> {
        let dataset = generate_synthetic(&cfg.data.synthetic, cfg.seed)?;
        Self::split(cfg, dataset)
    }

    pub fn split(cfg: &ExperimentConfig, dataset: Dataset) -> Result<Self, PipelineError> {
        let manifest = split_by_patient(&dataset, cfg.data.ratios, cfg.data.max_labeled_ratio, cfg.seed)?;
        Ok(Self { dataset, manifest })
    }

    /// Loads a PGM directory; uses its `split.json` when present and
    /// splits by `cfg` otherwise.
    pub fn load(cfg: &ExperimentConfig, dir: &Path) -> Result<Self, PipelineError> {
        let dataset = data::load_image_dir(dir)?;
        let split_path = dir.join(SPLIT_FILE);
        if split_path.exists() {
            let manifest: SplitManifest = data::read_json(&split_path)?;
            manifest.verify(&dataset)?;
            Ok(Self { dataset, manifest })
        } else {
            Self::split(cfg, dataset)
        }
    }

    pub fn unlabeled(&self) -> Result<Vec<Tensor>, PipelineError> {
        Ok(self.dataset.unlabeled_images(&self.manifest.unlabeled)?)
    }

    pub fn labeled(&self) -> Result<(Vec<Tensor>, Vec<u8>), PipelineError> {
        Ok(self.dataset.labeled(&self.manifest.labeled)?)
    }

    pub fn validation(&self) -> Result<(Vec<Tensor>, Vec<u8>), PipelineError> {
        Ok(self.dataset.labeled(&self.manifest.validation)?)
    }

    pub fn test(&self) -> Result<(Vec<Tensor>, Vec<u8>), PipelineError> {
        Ok(self.dataset.labeled(&self.manifest.test)?)
    }
}
