//! Datasets, PGM image I/O, patient-level splits and the synthetic
//! generator.

mod pgm;
mod split;
mod synth;

pub use pgm::{read_pgm, write_pgm, write_pgm_with_comment, Pgm};
pub use split::{split_by_patient, SplitManifest, SplitRatios, SPLIT_NAMES};
pub use synth::{generate_synthetic, SynthConfig, MIN_SIDE};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: malformed PGM at byte {offset}: {msg}")]
    Pgm { file: String, offset: usize, msg: String },
    #[error("{file}: {msg}")]
    Filename { file: String, msg: String },
    #[error("{file}: unknown label token {token:?} (expected 0, 1 or u)")]
    Label { file: String, token: String },
    #[error("invalid data config: {0}")]
    Config(String),
    #[error("split: {0}")]
    Split(String),
    #[error("{path}: {msg}")]
    Json { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub patient_id: String,
    /// `None` for unlabeled samples.
    pub label: Option<u8>,
    /// `[H, W]` in `[0, 1]`.
    pub image: Tensor,
}

impl Sample {
    pub fn file_name(&self) -> String {
        let label = self.label.map_or("u".to_string(), |l| l.to_string());
        format!("{}_{}_{label}.pgm", self.patient_id, self.id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

/// Row of the dataset index written next to the images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub patient_id: String,
    pub label: Option<u8>,
    pub file: String,
}

impl Dataset {
    pub fn new(height: usize, width: usize, samples: Vec<Sample>) -> Result<Self, DataError> {
        let mut ids = BTreeSet::new();
        for s in &samples {
            if s.image.shape() != [height, width] {
                return Err(DataError::Config(format!(
                    "sample {} has shape {:?}, dataset is {height}x{width}",
                    s.id,
                    s.image.shape()
                )));
            }
            if let Some(v) = s.image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(DataError::Config(format!("sample {} has pixel {v} outside [0, 1]", s.id)));
            }
            if let Some(l) = s.label {
                if l > 1 {
                    return Err(DataError::Config(format!("sample {} has label {l}", s.id)));
                }
            }
            if !ids.insert(s.id.as_str()) {
                return Err(DataError::Config(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self { height, width, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct patient ids, sorted.
    pub fn patients(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.patient_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Samples with the given ids, in the order of `ids`.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&Sample>, DataError> {
        let by_id: BTreeMap<&str, &Sample> = self.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| DataError::Split(format!("sample {id} not in dataset")))
            })
            .collect()
    }

    /// Images only, labels stripped; the sole input of pretraining.
    pub fn unlabeled_images(&self, ids: &[String]) -> Result<Vec<Tensor>, DataError> {
        Ok(self.select(ids)?.into_iter().map(|s| s.image.clone()).collect())
    }

    /// Images and labels; every selected sample must be labeled.
    pub fn labeled(&self, ids: &[String]) -> Result<(Vec<Tensor>, Vec<u8>), DataError> {
        let mut images = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for s in self.select(ids)? {
            let label = s
                .label
                .ok_or_else(|| DataError::Split(format!("sample {} is unlabeled", s.id)))?;
            images.push(s.image.clone());
            labels.push(label);
        }
        Ok((images, labels))
    }

    /// Drops labels of the given samples (e.g. the unlabeled split).
    pub fn strip_labels(&mut self, ids: &[String]) {
        let set: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        for s in &mut self.samples {
            if set.contains(s.id.as_str()) {
                s.label = None;
            }
        }
    }

    pub fn index(&self) -> Vec<IndexEntry> {
        self.samples
            .iter()
            .map(|s| IndexEntry {
                id: s.id.clone(),
                patient_id: s.patient_id.clone(),
                label: s.label,
                file: s.file_name(),
            })
            .collect()
    }
}

/// Splits `<patient_id>_<sample_id>_<label|u>.pgm`. Patient ids may contain
/// underscores; sample ids and labels may not.
fn parse_file_name(name: &str) -> Result<(String, String, Option<u8>), DataError> {
    let bad = |msg: &str| DataError::Filename {
        file: name.to_string(),
        msg: msg.to_string(),
    };
    let stem = name.strip_suffix(".pgm").ok_or_else(|| bad("not a .pgm file"))?;
    let mut parts = stem.rsplitn(3, '_');
    let (label, sample, patient) = match (parts.next(), parts.next(), parts.next()) {
        (Some(l), Some(s), Some(p)) if !s.is_empty() && !p.is_empty() => (l, s, p),
        _ => return Err(bad("expected <patient>_<sample>_<label|u>.pgm")),
    };
    let label = match label {
        "0" => Some(0),
        "1" => Some(1),
        "u" => None,
        other => {
            return Err(DataError::Label {
                file: name.to_string(),
                token: other.to_string(),
            })
        }
    };
    Ok((patient.to_string(), sample.to_string(), label))
}

/// Loads every `.pgm` in `dir` (other files are ignored), ordered by
/// file name.
pub fn load_image_dir(dir: &Path) -> Result<Dataset, DataError> {
    let io = |source| DataError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let entry = entry.map_err(io)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".pgm") {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(DataError::Config(format!("no .pgm files in {}", dir.display())));
    }
    let samples: Vec<Sample> = names
        .par_iter()
        .map(|name| {
            let (patient_id, id, label) = parse_file_name(name)?;
            let image = read_pgm(&dir.join(name))?;
            Ok(Sample {
                id,
                patient_id,
                label,
                image,
            })
        })
        .collect::<Result<_, DataError>>()?;
    let (h, w) = (samples[0].image.shape()[0], samples[0].image.shape()[1]);
    Dataset::new(h, w, samples)
}

pub const INDEX_FILE: &str = "index.json";

/// Contents of `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config_hash: Option<String>,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<IndexEntry>,
}

/// Writes each sample as an 8-bit PGM plus an `index.json` listing. A
/// `config_hash` is stamped into every PGM header comment and the index.
pub fn save_image_dir(dataset: &Dataset, dir: &Path, config_hash: Option<&str>) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    dataset
        .samples
        .par_iter()
        .try_for_each(|s| {
            let comment = config_hash.map(|h| format!("config_hash {h}"));
            write_pgm_with_comment(&dir.join(s.file_name()), &s.image, comment.as_deref())
        })?;
    let index = DatasetIndex {
        config_hash: config_hash.map(str::to_string),
        height: dataset.height,
        width: dataset.width,
        samples: dataset.index(),
    };
    write_json(&dir.join(INDEX_FILE), &index)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DataError::Json {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| DataError::Json {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}
