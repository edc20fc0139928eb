use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HybridError, HybridModel, ModelConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, HybridError> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| HybridError::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| HybridError::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| HybridError::Checkpoint(format!("rng word_pos: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Single JSON document holding everything needed to rebuild a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    /// Snapshot of the experiment configuration that produced this file.
    pub config: serde_json::Value,
    pub model: ModelConfig,
    pub quantum_enabled: bool,
    pub stage: String,
    pub step: u64,
    pub rng: RngState,
    pub parameters: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(
        model: &HybridModel,
        config: serde_json::Value,
        config_hash: &str,
        stage: &str,
        step: u64,
        rng: &ChaCha8Rng,
    ) -> Self {
        let parameters = model
            .named_tensors()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            config_hash: config_hash.to_string(),
            config,
            model: model.config.clone(),
            quantum_enabled: model.quantum_enabled,
            stage: stage.to_string(),
            step,
            rng: RngState::capture(rng),
            parameters,
        }
    }

    pub fn restore(&self) -> Result<HybridModel, HybridError> {
        if self.format_version != FORMAT_VERSION {
            return Err(HybridError::Checkpoint(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        let mut model = HybridModel::new(self.model.clone(), 0)?;
        model.quantum_enabled = self.quantum_enabled;
        let mut tensors = BTreeMap::new();
        for nt in &self.parameters {
            let t = Tensor::new(nt.shape.clone(), nt.values.clone())
                .map_err(|e| HybridError::Checkpoint(format!("tensor {}: {e}", nt.name)))?;
            if tensors.insert(nt.name.clone(), t).is_some() {
                return Err(HybridError::Checkpoint(format!("duplicate tensor {}", nt.name)));
            }
        }
        model.load_named_tensors(&tensors)?;
        Ok(model)
    }

    /// Pretty JSON; floats use the shortest representation that parses
    /// back to the identical `f64`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HybridError> {
        serde_json::from_str(text).map_err(|e| HybridError::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), HybridError> {
        std::fs::write(path, self.to_json()).map_err(|source| HybridError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, HybridError> {
        let text = std::fs::read_to_string(path).map_err(|source| HybridError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
