use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Encoder, EncoderConfig, HybridError, QuantumFusion};
use crate::qsim::CircuitSpec;
use crate::ssl::{ntxent_loss_unchecked, ContrastiveConfig, ProjectionHead};
use crate::tensor::{AdamConfig, AdamState, BatchNorm, Dense, Dropout, Mode, Param, Tensor};

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub circuit: CircuitSpec,
    pub contrastive: ContrastiveConfig,
    pub alpha_init: f64,
    pub bound_angles: bool,
    pub dropout: f64,
    pub head_batchnorm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            circuit: CircuitSpec::default(),
            contrastive: ContrastiveConfig::default(),
            alpha_init: 0.1,
            bound_angles: false,
            dropout: Dropout::DEFAULT_RATE,
            head_batchnorm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), HybridError> {
        self.encoder.validate()?;
        self.circuit.validate()?;
        self.contrastive.validate()?;
        if self.encoder.feature_dim < self.circuit.num_qubits {
            return Err(HybridError::Config(format!(
                "feature_dim {} must be >= num_qubits {}",
                self.encoder.feature_dim, self.circuit.num_qubits
            )));
        }
        if !self.alpha_init.is_finite() {
            return Err(HybridError::Config("alpha_init must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HybridError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Which encoder groups receive updates during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FreezePolicy {
    AllFrozen,
    #[default]
    LastBlockUnfrozen,
    AllUnfrozen,
}

impl FreezePolicy {
    /// Index of the first trainable encoder group (`groups` means none).
    pub fn first_trainable(self, groups: usize) -> usize {
        match self {
            FreezePolicy::AllFrozen => groups,
            FreezePolicy::LastBlockUnfrozen => groups.saturating_sub(2),
            FreezePolicy::AllUnfrozen => 0,
        }
    }
}

/// Batchnorm → dropout → dense to two logits.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub batchnorm: Option<BatchNorm>,
    pub dropout: Dropout,
    pub dense: Dense,
}

impl ClassifierHead {
    fn new<R: Rng + ?Sized>(d: usize, cfg: &ModelConfig, dropout_seed: u64, rng: &mut R) -> Self {
        Self {
            batchnorm: cfg.head_batchnorm.then(|| BatchNorm::new(d)),
            dropout: Dropout::new(cfg.dropout, dropout_seed),
            dense: Dense::new(d, NUM_CLASSES, rng),
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        if let Some(bn) = &mut self.batchnorm {
            bn.set_mode(mode);
        }
        self.dropout.set_mode(mode);
    }

    fn forward(&mut self, h: &Tensor) -> Result<Tensor, HybridError> {
        let mut cur = h.clone();
        if let Some(bn) = &mut self.batchnorm {
            cur = bn.forward(&cur)?;
        }
        cur = self.dropout.forward(&cur)?;
        Ok(self.dense.forward(&cur)?)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor, HybridError> {
        let mut cur = self.dense.backward(grad)?;
        cur = self.dropout.backward(&cur)?;
        if let Some(bn) = &mut self.batchnorm {
            cur = bn.backward(&cur)?;
        }
        Ok(cur)
    }

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        if let Some(bn) = &self.batchnorm {
            out.extend([&bn.gamma, &bn.beta]);
        }
        out.extend([&self.dense.weight, &self.dense.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        if let Some(bn) = &mut self.batchnorm {
            out.extend([&mut bn.gamma, &mut bn.beta]);
        }
        out.extend([&mut self.dense.weight, &mut self.dense.bias]);
        out
    }

    fn buffers(&self) -> Vec<&Tensor> {
        self.batchnorm
            .as_ref()
            .map(|bn| vec![&bn.running_mean, &bn.running_var])
            .unwrap_or_default()
    }
}

/// Row-wise softmax of `W_c h̃ + b_c` style logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.shape().last().copied().unwrap_or(1);
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// `Softmax(W_c h̃ + b_c)` for a single feature vector.
pub fn classify(h: &[f64], w_c: &Tensor, b_c: &Tensor) -> Result<Vec<f64>, HybridError> {
    let d = h.len();
    w_c.expect_shape("classify", &[b_c.len(), d])?;
    let logits: Vec<f64> = (0..b_c.len())
        .map(|k| b_c.data()[k] + w_c.data()[k * d..(k + 1) * d].iter().zip(h).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    Ok(softmax_rows(&Tensor::new(vec![1, logits.len()], logits)?).into_data())
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor), HybridError> {
    let n = labels.len();
    if n == 0 {
        return Err(HybridError::EmptyBatch);
    }
    logits.expect_shape("cross_entropy", &[n, NUM_CLASSES])?;
    let probs = softmax_rows(logits);
    let mut grad = probs.data().to_vec();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= NUM_CLASSES {
            return Err(HybridError::Label(y));
        }
        let row = logits.item(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y as usize];
        grad[i * NUM_CLASSES + y as usize] -= 1.0;
    }
    grad.iter_mut().for_each(|g| *g /= n as f64);
    Ok((loss / n as f64, Tensor::new(vec![n, NUM_CLASSES], grad)?))
}

/// Separate Adam state per named parameter group.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Optimizer {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    pub fn step_group(&mut self, name: &str, params: &mut [&mut Param]) -> Result<(), HybridError> {
        let config = self.config;
        self.states
            .entry(name.to_string())
            .or_insert_with(|| AdamState::new(config))
            .step(params)?;
        Ok(())
    }
}

/// The full model: encoder, projection head, quantum fusion, classifier.
#[derive(Debug, Clone)]
pub struct HybridModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub projection: ProjectionHead,
    pub fusion: QuantumFusion,
    pub head: ClassifierHead,
    pub quantum_enabled: bool,
}

/// Per-component seeds so that toggling one part never shifts the
/// initialization of another.
#[derive(Debug, Clone, Copy)]
pub struct InitSeeds {
    pub encoder: u64,
    pub projection: u64,
    pub fusion: u64,
    pub head: u64,
    pub dropout: u64,
}

impl InitSeeds {
    pub fn from_seed(seed: u64) -> Self {
        let mix = |tag: u64| crate::seed::derive(seed, &[tag]);
        Self {
            encoder: mix(1),
            projection: mix(2),
            fusion: mix(3),
            head: mix(4),
            dropout: mix(5),
        }
    }
}

impl HybridModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, HybridError> {
        Self::with_seeds(config, InitSeeds::from_seed(seed))
    }

    pub fn with_seeds(config: ModelConfig, seeds: InitSeeds) -> Result<Self, HybridError> {
        config.validate()?;
        let rng = |s: u64| ChaCha8Rng::seed_from_u64(s);
        let encoder = Encoder::new(config.encoder.clone(), &mut rng(seeds.encoder))?;
        let d = encoder.feature_dim();
        let projection = ProjectionHead::new(d, &config.contrastive, &mut rng(seeds.projection));
        let fusion = QuantumFusion::new(
            d,
            config.circuit.clone(),
            config.alpha_init,
            config.bound_angles,
            &mut rng(seeds.fusion),
        )?;
        let head = ClassifierHead::new(d, &config, seeds.dropout, &mut rng(seeds.head));
        Ok(Self {
            config,
            encoder,
            projection,
            fusion,
            head,
            quantum_enabled: true,
        })
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.head.dropout.reseed(seed);
    }

    /// Trainable parameters of everything used for classification (the
    /// projection head is excluded; it only exists during pretraining).
    pub fn parameter_count(&self) -> usize {
        let fusion: usize = self.fusion.params().iter().map(|(_, p)| p.value.len()).sum();
        let head: usize = self.head.params().iter().map(|p| p.value.len()).sum();
        self.encoder.parameter_count() + fusion + head
    }

    pub fn set_eval(&mut self) {
        self.encoder.set_mode(Mode::Eval);
        self.projection.layers.set_mode(Mode::Eval);
        self.head.set_mode(Mode::Eval);
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.projection.zero_grad();
        self.fusion.zero_grad();
        for p in self.head.params_mut() {
            p.zero_grad();
        }
    }

    /// `h = f_θ(x)` in eval mode.
    pub fn encode(&mut self, images: &Tensor) -> Result<Tensor, HybridError> {
        self.encoder.set_mode(Mode::Eval);
        self.encoder.forward(images)
    }

    /// `h̃`, or `h` unchanged when the quantum path is disabled.
    fn enhance(&mut self, h: &Tensor) -> Result<Tensor, HybridError> {
        if self.quantum_enabled {
            self.fusion.forward(h)
        } else {
            Ok(h.clone())
        }
    }

    /// Eval-mode logits for a batch of images.
    pub fn logits(&mut self, images: &Tensor) -> Result<Tensor, HybridError> {
        self.set_eval();
        let h = self.encoder.forward(images)?;
        let h = self.enhance(&h)?;
        self.head.forward(&h)
    }

    /// Eval-mode positive-class probabilities.
    pub fn predict_proba(&mut self, images: &Tensor) -> Result<Vec<f64>, HybridError> {
        let probs = softmax_rows(&self.logits(images)?);
        Ok(probs.data().chunks(NUM_CLASSES).map(|r| r[1]).collect())
    }

    /// Loss of the classification path on a batch (mode as currently set),
    /// followed by a full backward pass into every parameter group.
    /// Used by training and by gradient checks.
    pub fn classification_loss_and_grads(
        &mut self,
        images: &Tensor,
        labels: &[u8],
        first_encoder_group: usize,
    ) -> Result<f64, HybridError> {
        if labels.is_empty() {
            return Err(HybridError::EmptyBatch);
        }
        let h = self.encoder.forward(images)?;
        let ht = self.enhance(&h)?;
        let logits = self.head.forward(&ht)?;
        let (loss, dlogits) = cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Err(HybridError::NonFinite("classification loss"));
        }
        let dht = self.head.backward(&dlogits)?;
        let needs_dh = first_encoder_group < self.encoder.num_groups();
        let dh = if self.quantum_enabled {
            self.fusion.backward(&dht)?
        } else {
            dht
        };
        if needs_dh {
            self.encoder.backward(&dh, first_encoder_group)?;
        }
        Ok(loss)
    }

    /// One supervised step: gradients flow to the head, the quantum fusion
    /// (when enabled) and the encoder groups the policy leaves unfrozen.
    pub fn finetune_step(
        &mut self,
        images: &Tensor,
        labels: &[u8],
        policy: FreezePolicy,
        optimizer: &mut Optimizer,
    ) -> Result<f64, HybridError> {
        if labels.is_empty() {
            return Err(HybridError::EmptyBatch);
        }
        let groups = self.encoder.num_groups();
        let first = policy.first_trainable(groups);
        for i in 0..groups {
            let mode = if i >= first { Mode::Train } else { Mode::Eval };
            self.encoder.group_mut(i).set_mode(mode);
        }
        self.head.set_mode(Mode::Train);
        self.zero_grad();
        let loss = self.classification_loss_and_grads(images, labels, first)?;

        for i in first..groups {
            let name = format!("encoder.{i}");
            optimizer.step_group(&name, &mut self.encoder.group_mut(i).params_mut())?;
        }
        if self.quantum_enabled {
            for (name, p) in self.fusion.params_mut() {
                optimizer.step_group(&format!("quantum.{name}"), &mut [p])?;
            }
        }
        optimizer.step_group("head", &mut self.head.params_mut())?;
        self.set_eval();
        Ok(loss)
    }

    /// Contrastive step on `2N` views where rows `2k`, `2k + 1` pair up.
    /// Trains the encoder and projection head (and the quantum fusion when
    /// `with_quantum` is set).
    pub fn pretrain_step(
        &mut self,
        views: &Tensor,
        temperature: f64,
        with_quantum: bool,
        optimizer: &mut Optimizer,
    ) -> Result<f64, HybridError> {
        self.encoder.set_mode(Mode::Train);
        self.projection.layers.set_mode(Mode::Train);
        self.zero_grad();
        let h = self.encoder.forward(views)?;
        let h = if with_quantum { self.fusion.forward(&h)? } else { h };
        let z = self.projection.project(&h)?;
        let (loss, dz) = ntxent_loss_unchecked(&z, temperature)?;
        if !loss.is_finite() {
            return Err(HybridError::NonFinite("contrastive loss"));
        }
        let mut dh = self.projection.backward(&dz)?;
        if with_quantum {
            dh = self.fusion.backward(&dh)?;
        }
        self.encoder.backward(&dh, 0)?;
        for i in 0..self.encoder.num_groups() {
            optimizer.step_group(&format!("encoder.{i}"), &mut self.encoder.group_mut(i).params_mut())?;
        }
        optimizer.step_group("projection", &mut self.projection.params_mut())?;
        if with_quantum {
            for (name, p) in self.fusion.params_mut() {
                optimizer.step_group(&format!("quantum.{name}"), &mut [p])?;
            }
        }
        self.set_eval();
        Ok(loss)
    }

    /// Trainable parameters of the classification path, tagged with their
    /// group (`encoder.{i}`, `quantum.{name}`, `head`).
    pub fn classification_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        let Encoder { blocks, out: enc_out, .. } = &mut self.encoder;
        for (i, g) in blocks.iter_mut().chain(std::iter::once(enc_out)).enumerate() {
            out.extend(g.params_mut().into_iter().map(|p| (format!("encoder.{i}"), p)));
        }
        for (name, p) in self.fusion.params_mut() {
            out.push((format!("quantum.{name}"), p));
        }
        out.extend(self.head.params_mut().into_iter().map(|p| ("head".to_string(), p)));
        out
    }

    /// Every parameter and buffer under a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for i in 0..self.encoder.num_groups() {
            let g = self.encoder.group(i);
            for (k, p) in g.params().into_iter().enumerate() {
                out.push((format!("encoder.{i}.param{k}"), &p.value));
            }
            for (k, b) in g.buffers().into_iter().enumerate() {
                out.push((format!("encoder.{i}.buffer{k}"), b));
            }
        }
        for (k, p) in self.projection.params().into_iter().enumerate() {
            out.push((format!("projection.param{k}"), &p.value));
        }
        for (name, p) in self.fusion.params() {
            out.push((format!("quantum.{name}"), &p.value));
        }
        for (k, p) in self.head.params().into_iter().enumerate() {
            out.push((format!("head.param{k}"), &p.value));
        }
        for (k, b) in self.head.buffers().into_iter().enumerate() {
            out.push((format!("head.buffer{k}"), b));
        }
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        let groups = self.encoder.num_groups();
        let Encoder { blocks, out: enc_out, .. } = &mut self.encoder;
        for (i, g) in blocks.iter_mut().chain(std::iter::once(enc_out)).enumerate() {
            debug_assert!(i < groups);
            let mut params = Vec::new();
            let mut buffers = Vec::new();
            for layer in &mut g.layers {
                // Split borrows: params and buffers live in disjoint fields.
                match layer {
                    crate::tensor::Layer::BatchNorm(bn) => {
                        params.push(&mut bn.gamma.value);
                        params.push(&mut bn.beta.value);
                        buffers.push(&mut bn.running_mean);
                        buffers.push(&mut bn.running_var);
                    }
                    other => params.extend(other.params_mut().into_iter().map(|p| &mut p.value)),
                }
            }
            for (k, t) in params.into_iter().enumerate() {
                out.push((format!("encoder.{i}.param{k}"), t));
            }
            for (k, t) in buffers.into_iter().enumerate() {
                out.push((format!("encoder.{i}.buffer{k}"), t));
            }
        }
        for (k, p) in self.projection.params_mut().into_iter().enumerate() {
            out.push((format!("projection.param{k}"), &mut p.value));
        }
        for (name, p) in self.fusion.params_mut() {
            out.push((format!("quantum.{name}"), &mut p.value));
        }
        let ClassifierHead { batchnorm, dense, .. } = &mut self.head;
        let mut k = 0;
        let mut head_buffers = Vec::new();
        if let Some(bn) = batchnorm {
            out.push((format!("head.param{k}"), &mut bn.gamma.value));
            out.push((format!("head.param{}", k + 1), &mut bn.beta.value));
            k += 2;
            head_buffers.push(&mut bn.running_mean);
            head_buffers.push(&mut bn.running_var);
        }
        out.push((format!("head.param{k}"), &mut dense.weight.value));
        out.push((format!("head.param{}", k + 1), &mut dense.bias.value));
        for (j, b) in head_buffers.into_iter().enumerate() {
            out.push((format!("head.buffer{j}"), b));
        }
        out
    }

    /// Overwrites every named tensor; names and shapes must match exactly.
    pub fn load_named_tensors(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<(), HybridError> {
        let mut slots = self.named_tensors_mut();
        if slots.len() != tensors.len() {
            return Err(HybridError::Checkpoint(format!(
                "expected {} tensors, checkpoint holds {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (name, slot) in &mut slots {
            let src = tensors
                .get(name.as_str())
                .ok_or_else(|| HybridError::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != slot.shape() {
                return Err(HybridError::Checkpoint(format!(
                    "tensor {name}: expected shape {:?}, got {:?}",
                    slot.shape(),
                    src.shape()
                )));
            }
            **slot = src.clone();
        }
        Ok(())
    }
}
