use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, PipelineError, Progress};
use crate::eval::{self, MetricsReport};
use crate::hybrid::{Checkpoint, FreezePolicy, HybridModel, ModelConfig, Optimizer};
use crate::seed;
use crate::ssl::make_views;
use crate::tensor::{AdamConfig, Tensor};

/// Images scored per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

fn stream(run_seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed::derive(run_seed, &[seed::tag(label)]))
}

/// Fresh model for `run_seed`; every variant with the same seed starts from
/// the same weights.
pub fn init_model(model: &ModelConfig, run_seed: u64) -> Result<HybridModel, PipelineError> {
    Ok(HybridModel::new(model.clone(), seed::derive(run_seed, &[seed::tag("model")]))?)
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub model: HybridModel,
    /// Mean contrastive loss per epoch.
    pub losses: Vec<f64>,
    pub steps: u64,
    pub checkpoint: Checkpoint,
}

/// Contrastive pretraining on label-free images. View `k` of sample `i` in
/// epoch `e` comes from a stream seeded by `(run_seed, i, e)`, so the views
/// do not depend on batch composition or thread count.
pub fn pretrain(
    cfg: &ExperimentConfig,
    images: &[Tensor],
    run_seed: u64,
    progress: &dyn Progress,
) -> Result<PretrainOutput, PipelineError> {
    if images.is_empty() {
        return Err(PipelineError::EmptySplit("unlabeled"));
    }
    let t = &cfg.training;
    let mut model = init_model(&cfg.model, run_seed)?;
    let mut optimizer = Optimizer::new(AdamConfig {
        learning_rate: t.pretrain_lr,
        ..AdamConfig::default()
    });
    let mut order_rng = stream(run_seed, "pretrain-order");
    let augment_seed = seed::derive(run_seed, &[seed::tag("augment")]);
    let tau = cfg.model.contrastive.temperature;
    let batch = t.pretrain_batch.min(images.len());
    let mut losses = Vec::with_capacity(t.pretrain_epochs);
    let mut steps = 0u64;
    for epoch in 0..t.pretrain_epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            // NT-Xent needs at least two pairs.
            if chunk.len() < 2 {
                continue;
            }
            let views: Vec<[Tensor; 2]> = chunk
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(augment_seed, &[i as u64, epoch as u64]));
                    let (a, b, _, _) = make_views(&images[i], &cfg.augmentation, &mut rng)?;
                    Ok([a, b])
                })
                .collect::<Result<_, crate::ssl::SslError>>()
                .map_err(crate::hybrid::HybridError::from)?;
            let flat: Vec<Tensor> = views.into_iter().flatten().collect();
            let x = Tensor::stack(&flat).map_err(crate::hybrid::HybridError::from)?;
            total += model.pretrain_step(&x, tau, t.pretrain_quantum, &mut optimizer)?;
            batches += 1;
            steps += 1;
        }
        let mean = total / batches.max(1) as f64;
        progress.event(serde_json::json!({
            "event": "pretrain_epoch", "seed": run_seed, "epoch": epoch + 1, "loss": mean
        }));
        losses.push(mean);
    }
    model.set_eval();
    let checkpoint = Checkpoint::capture(&model, cfg.to_value(), &cfg.hash(), "pretrain", steps, &order_rng);
    Ok(PretrainOutput {
        model,
        losses,
        steps,
        checkpoint,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub epochs_configured: usize,
    pub epochs: Vec<EpochRecord>,
    /// 0 means the initial weights were never beaten.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct FinetuneSpec {
    pub quantum: bool,
    pub policy: FreezePolicy,
}

fn check_labels(labels: &[u8], split: &'static str) -> Result<(), PipelineError> {
    if labels.is_empty() {
        return Err(PipelineError::EmptySplit(split));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(PipelineError::SingleClass(split));
    }
    Ok(())
}

/// Positive-class probabilities in eval mode.
pub fn predict(model: &mut HybridModel, images: &[Tensor]) -> Result<Vec<f64>, PipelineError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let x = Tensor::stack(chunk).map_err(crate::hybrid::HybridError::from)?;
        out.extend(model.predict_proba(&x)?);
    }
    Ok(out)
}

fn validation_score(
    model: &mut HybridModel,
    images: &[Tensor],
    labels: &[u8],
    threshold: f64,
) -> Result<(f64, f64), PipelineError> {
    let scores = predict(model, images)?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| u8::from(s >= threshold) == y)
        .count();
    let (auc, _) = eval::roc_auc(labels, &scores)?;
    Ok((correct as f64 / labels.len() as f64, auc))
}

/// Supervised fine-tuning with early stopping. Selection is by validation
/// accuracy, then AUC; on a tie the earlier epoch is kept.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    cfg: &ExperimentConfig,
    mut model: HybridModel,
    spec: FinetuneSpec,
    train: (&[Tensor], &[u8]),
    val: (&[Tensor], &[u8]),
    run_seed: u64,
    tag: &str,
    progress: &dyn Progress,
) -> Result<(HybridModel, FinetuneRecord), PipelineError> {
    let t = &cfg.training;
    check_labels(train.1, "labeled")?;
    check_labels(val.1, "validation")?;
    model.quantum_enabled = spec.quantum;
    let mut optimizer = Optimizer::new(AdamConfig {
        learning_rate: t.finetune_lr,
        ..AdamConfig::default()
    });
    let mut order_rng = stream(run_seed, "finetune-order");
    let (mut best_acc, mut best_auc) = validation_score(&mut model, val.0, val.1, t.threshold)?;
    let mut best = model.clone();
    let mut record = FinetuneRecord {
        epochs_configured: t.finetune_epochs,
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let n = train.1.len();
    for epoch in 1..=t.finetune_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        let mut ranges: Vec<std::ops::Range<usize>> =
            (0..n).step_by(t.finetune_batch).map(|s| s..(s + t.finetune_batch).min(n)).collect();
        // A trailing single sample would give batchnorm zero variance.
        if ranges.len() > 1 && ranges[ranges.len() - 1].len() == 1 {
            let last = ranges.pop().expect("len > 1");
            ranges.last_mut().expect("len > 1").end = last.end;
        }
        let mut total = 0.0;
        for range in &ranges {
            let idx = &order[range.clone()];
            let imgs: Vec<Tensor> = idx.iter().map(|&i| train.0[i].clone()).collect();
            let labels: Vec<u8> = idx.iter().map(|&i| train.1[i]).collect();
            let x = Tensor::stack(&imgs).map_err(crate::hybrid::HybridError::from)?;
            total += model.finetune_step(&x, &labels, spec.policy, &mut optimizer)?;
        }
        let train_loss = total / ranges.len() as f64;
        let (acc, auc) = validation_score(&mut model, val.0, val.1, t.threshold)?;
        progress.event(serde_json::json!({
            "event": "finetune_epoch", "variant": tag, "seed": run_seed, "epoch": epoch,
            "loss": train_loss, "val_accuracy": acc, "val_auc": auc
        }));
        record.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy: acc,
            val_auc: auc,
        });
        if acc > best_acc || (acc == best_acc && auc > best_auc) {
            best_acc = acc;
            best_auc = auc;
            best = model.clone();
            record.best_epoch = epoch;
        } else if epoch - record.best_epoch >= t.patience {
            record.stopped_early = epoch < t.finetune_epochs;
            break;
        }
    }
    best.set_eval();
    Ok((best, record))
}

/// Test-set report for a trained model.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &mut HybridModel,
    name: &str,
    images: &[Tensor],
    labels: &[u8],
) -> Result<MetricsReport, PipelineError> {
    check_labels(labels, "test")?;
    let scores = predict(model, images)?;
    Ok(eval::evaluate(name, &cfg.hash(), labels, &scores, cfg.training.threshold)?)
}
