use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{evaluate_model, finetune, init_model, predict, pretrain, FinetuneRecord, FinetuneSpec, PretrainOutput};
use super::{ExperimentConfig, PipelineError, Prepared, Progress, Variant};
use crate::data::write_json;
use crate::eval::{self, emit_reports, MetricsReport};
use crate::hybrid::{EncoderConfig, FreezePolicy, HybridModel, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub parameter_count: usize,
    /// Empty for variants without pretraining.
    pub pretrain_losses: Vec<f64>,
    pub finetune: FinetuneRecord,
    pub test_ids: Vec<String>,
    pub test_scores: Vec<f64>,
    pub report: MetricsReport,
}

fn variant_model_config(cfg: &ExperimentConfig, variant: Variant) -> ModelConfig {
    let mut model = cfg.model.clone();
    if variant == Variant::SimpleBaseline {
        let e = &cfg.model.encoder;
        model.encoder = EncoderConfig::simple_baseline(e.height, e.width, e.feature_dim);
    }
    model
}

/// Fine-tunes and tests one variant. SSL variants start from `pretrained`,
/// which must then be given; the others start from fresh weights and train
/// every layer.
pub fn run_variant(
    cfg: &ExperimentConfig,
    data: &Prepared,
    variant: Variant,
    run_seed: u64,
    pretrained: Option<&PretrainOutput>,
    progress: &dyn Progress,
) -> Result<(RunRecord, HybridModel), PipelineError> {
    let (model, losses, policy) = if variant.uses_ssl() {
        let p = pretrained.ok_or_else(|| PipelineError::Config(format!("{} needs a pretrained model", variant.name())))?;
        (p.model.clone(), p.losses.clone(), cfg.training.freeze_policy)
    } else {
        (init_model(&variant_model_config(cfg, variant), run_seed)?, Vec::new(), FreezePolicy::AllUnfrozen)
    };
    let (train_x, train_y) = data.labeled()?;
    let (val_x, val_y) = data.validation()?;
    let (test_x, test_y) = data.test()?;
    let spec = FinetuneSpec {
        quantum: variant.uses_quantum(),
        policy,
    };
    let (mut model, record) = finetune(
        cfg,
        model,
        spec,
        (&train_x, &train_y),
        (&val_x, &val_y),
        run_seed,
        variant.name(),
        progress,
    )?;
    let test_scores = predict(&mut model, &test_x)?;
    let report = evaluate_model(cfg, &mut model, variant.name(), &test_x, &test_y)?;
    progress.event(serde_json::json!({
        "event": "variant_done", "variant": variant.name(), "seed": run_seed,
        "test_auc": report.auc, "test_accuracy": report.metrics.accuracy
    }));
    let parameter_count = if variant.uses_quantum() {
        model.parameter_count()
    } else {
        let fusion: usize = model.fusion.params().iter().map(|(_, p)| p.value.len()).sum();
        model.parameter_count() - fusion
    };
    Ok((
        RunRecord {
            variant,
            seed: run_seed,
            config_hash: cfg.hash(),
            parameter_count,
            pretrain_losses: losses,
            finetune: record,
            test_ids: data.manifest.test.clone(),
            test_scores,
            report,
        },
        model,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub aucs: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixOutput {
    pub config_hash: String,
    pub records: Vec<RunRecord>,
    pub summary: Vec<VariantSummary>,
    /// One report per variant over the test predictions of all seeds.
    pub pooled: Vec<MetricsReport>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl MatrixOutput {
    pub fn summary_for(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }

    /// Writes pooled reports at the top of `dir`, per-seed reports under
    /// `seed-<s>/`, plus runs.json and summary.json.
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        emit_reports(&self.pooled, dir)?;
        let mut seeds: Vec<u64> = self.records.iter().map(|r| r.seed).collect();
        seeds.dedup();
        for s in seeds {
            let reports: Vec<MetricsReport> =
                self.records.iter().filter(|r| r.seed == s).map(|r| r.report.clone()).collect();
            emit_reports(&reports, &dir.join(format!("seed-{s}")))?;
        }
        write_json(&dir.join("runs.json"), &self.records)?;
        write_json(
            &dir.join("summary.json"),
            &serde_json::json!({"config_hash": self.config_hash, "variants": self.summary}),
        )?;
        Ok(())
    }
}

/// Every configured variant for every run seed over one shared split. SSL
/// variants of a seed share a single pretraining run.
pub fn run_matrix(cfg: &ExperimentConfig, data: &Prepared, progress: &dyn Progress) -> Result<MatrixOutput, PipelineError> {
    cfg.validate()?;
    let mut records = Vec::new();
    for &run_seed in &cfg.run_seeds {
        let pretrained = if cfg.variants.iter().any(|v| v.uses_ssl()) {
            Some(pretrain(cfg, &data.unlabeled()?, run_seed, progress)?)
        } else {
            None
        };
        for &variant in &cfg.variants {
            let (record, _) = run_variant(cfg, data, variant, run_seed, pretrained.as_ref(), progress)?;
            records.push(record);
        }
    }

    let (_, test_y) = data.test()?;
    let mut summary = Vec::new();
    let mut pooled = Vec::new();
    for &variant in &cfg.variants {
        let runs: Vec<&RunRecord> = records.iter().filter(|r| r.variant == variant).collect();
        let aucs: Vec<f64> = runs.iter().map(|r| r.report.auc).collect();
        let accuracies: Vec<f64> = runs.iter().map(|r| r.report.metrics.accuracy).collect();
        let m = mean(&aucs);
        let var = aucs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / aucs.len() as f64;
        summary.push(VariantSummary {
            variant,
            seeds: runs.iter().map(|r| r.seed).collect(),
            mean_auc: m,
            std_auc: var.sqrt(),
            mean_accuracy: mean(&accuracies),
            aucs,
            accuracies,
        });
        let labels: Vec<u8> = runs.iter().flat_map(|_| test_y.iter().copied()).collect();
        let scores: Vec<f64> = runs.iter().flat_map(|r| r.test_scores.iter().copied()).collect();
        pooled.push(eval::evaluate(variant.name(), &cfg.hash(), &labels, &scores, cfg.training.threshold)?);
    }
    Ok(MatrixOutput {
        config_hash: cfg.hash(),
        records,
        summary,
        pooled,
    })
}
