use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::data::{SplitRatios, SynthConfig};
use crate::hybrid::{FreezePolicy, ModelConfig};
use crate::ssl::AugmentationConfig;

/// The five comparison arms of a run matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    SslQuantum,
    SslOnly,
    SupervisedOnly,
    SupervisedQuantum,
    SimpleBaseline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SslQuantum,
        Variant::SslOnly,
        Variant::SupervisedOnly,
        Variant::SupervisedQuantum,
        Variant::SimpleBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SslQuantum => "ssl-quantum",
            Variant::SslOnly => "ssl-only",
            Variant::SupervisedOnly => "supervised-only",
            Variant::SupervisedQuantum => "supervised-quantum",
            Variant::SimpleBaseline => "simple-baseline",
        }
    }

    pub fn uses_ssl(self) -> bool {
        matches!(self, Variant::SslQuantum | Variant::SslOnly)
    }

    pub fn uses_quantum(self) -> bool {
        matches!(self, Variant::SslQuantum | Variant::SupervisedQuantum)
    }

    pub fn from_flags(ssl: bool, quantum: bool) -> Self {
        match (ssl, quantum) {
            (true, true) => Variant::SslQuantum,
            (true, false) => Variant::SslOnly,
            (false, false) => Variant::SupervisedOnly,
            (false, true) => Variant::SupervisedQuantum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub synthetic: SynthConfig,
    pub ratios: SplitRatios,
    /// Upper bound on |labeled| / |unlabeled|.
    pub max_labeled_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SynthConfig::default(),
            ratios: SplitRatios::default(),
            max_labeled_ratio: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Images per contrastive batch (twice as many views).
    pub pretrain_batch: usize,
    pub finetune_batch: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    /// Early-stopping patience in epochs on validation accuracy.
    pub patience: usize,
    /// Applies to the SSL variants; supervised variants train everything.
    pub freeze_policy: FreezePolicy,
    /// Run the quantum fusion during contrastive pretraining too.
    pub pretrain_quantum: bool,
    /// Positive-class probability at or above which a sample is called 1.
    pub threshold: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 30,
            finetune_epochs: 40,
            pretrain_batch: 32,
            finetune_batch: 16,
            pretrain_lr: 1e-3,
            finetune_lr: 3e-3,
            patience: 10,
            freeze_policy: FreezePolicy::LastBlockUnfrozen,
            pretrain_quantum: false,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub ssl: bool,
    pub quantum: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { ssl: true, quantum: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Seeds data generation, splitting and single runs.
    pub seed: u64,
    /// Training seeds of a run matrix; every variant runs once per seed.
    pub run_seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Flags selecting the single variant trained by `pretrain`/`finetune`.
    pub ablation: Ablation,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub augmentation: AugmentationConfig,
    pub training: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_seeds: vec![0, 1, 2, 3, 4],
            variants: Variant::ALL.to_vec(),
            ablation: Ablation::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            augmentation: AugmentationConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

/// Reports the first path in `given` that does not exist in `known`.
fn unknown_key(given: &Value, known: &Value, path: &str) -> Option<String> {
    match (given, known) {
        (Value::Object(g), Value::Object(k)) => g.iter().find_map(|(key, v)| {
            let p = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
            match k.get(key) {
                None => Some(p),
                Some(kv) => unknown_key(v, kv, &p),
            }
        }),
        _ => None,
    }
}

impl ExperimentConfig {
    /// Parses a JSON value, rejecting keys the schema does not know.
    pub fn from_value(value: Value) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_value(value.clone()).map_err(|e| PipelineError::Config(e.to_string()))?;
        let known = serde_json::to_value(&cfg).expect("config serializes");
        if let Some(path) = unknown_key(&value, &known, "") {
            return Err(PipelineError::Config(format!("unknown config key {path}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// First 16 hex digits of SHA-256 over the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(msg));
        self.data.synthetic.validate()?;
        self.model.validate()?;
        self.augmentation.validate()?;
        if (self.data.synthetic.height, self.data.synthetic.width)
            != (self.model.encoder.height, self.model.encoder.width)
        {
            return bad(format!(
                "data resolution {}x{} differs from encoder input {}x{}",
                self.data.synthetic.height,
                self.data.synthetic.width,
                self.model.encoder.height,
                self.model.encoder.width
            ));
        }
        let t = &self.training;
        if t.pretrain_batch < 2 {
            return bad("pretrain_batch must be at least 2".into());
        }
        if t.finetune_batch == 0 {
            return bad("finetune_batch must be positive".into());
        }
        for (name, lr) in [("pretrain_lr", t.pretrain_lr), ("finetune_lr", t.finetune_lr)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&t.threshold) {
            return bad(format!("threshold {} outside [0, 1]", t.threshold));
        }
        if self.variants.is_empty() {
            return bad("variants must not be empty".into());
        }
        if self.run_seeds.is_empty() {
            return bad("run_seeds must not be empty".into());
        }
        Ok(())
    }
}

/// Sets a dotted path inside a JSON object. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(config: &mut Value, assignment: &str) -> Result<(), PipelineError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(PipelineError::Config(format!("bad override path {path:?}")));
    }
    let mut cur = config;
    for key in &keys[..keys.len() - 1] {
        if !cur.is_object() {
            return Err(PipelineError::Config(format!("override path {path:?} crosses a non-object")));
        }
        cur = cur
            .as_object_mut()
            .expect("checked")
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match cur.as_object_mut() {
        Some(obj) => {
            obj.insert(keys[keys.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(PipelineError::Config(format!("override path {path:?} crosses a non-object"))),
    }
}
