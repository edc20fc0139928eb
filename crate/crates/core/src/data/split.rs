use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

/// Relative patient shares of each split; only proportions matter. A zero
/// share yields an empty split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub unlabeled: f64,
    pub labeled: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            unlabeled: 30.0,
            labeled: 5.0,
            validation: 3.0,
            test: 6.0,
        }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 4] {
        [self.unlabeled, self.labeled, self.validation, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub max_labeled_ratio: f64,
    pub unlabeled: Vec<String>,
    pub labeled: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    /// Patient ids per split, same order as the sample lists above.
    pub patients: [Vec<String>; 4],
}

pub const SPLIT_NAMES: [&str; 4] = ["unlabeled", "labeled", "validation", "test"];

impl SplitManifest {
    pub fn splits(&self) -> [&Vec<String>; 4] {
        [&self.unlabeled, &self.labeled, &self.validation, &self.test]
    }

    /// Checks disjointness by sample id and by patient against `dataset`.
    pub fn verify(&self, dataset: &Dataset) -> Result<(), DataError> {
        let patient_of: BTreeMap<&str, &str> =
            dataset.samples.iter().map(|s| (s.id.as_str(), s.patient_id.as_str())).collect();
        let mut seen_ids = BTreeSet::new();
        let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
        for (k, ids) in self.splits().into_iter().enumerate() {
            for id in ids {
                let patient = patient_of
                    .get(id.as_str())
                    .ok_or_else(|| DataError::Split(format!("sample {id} not in dataset")))?;
                if !seen_ids.insert(id.as_str()) {
                    return Err(DataError::Split(format!("sample {id} appears twice")));
                }
                if let Some(&prev) = owner.get(patient) {
                    if prev != k {
                        return Err(DataError::Split(format!(
                            "patient {patient} in both {} and {}",
                            SPLIT_NAMES[prev], SPLIT_NAMES[k]
                        )));
                    }
                }
                owner.insert(patient, k);
            }
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items by `weights`; ties go to the
/// earlier entry.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Partitions patients (not samples) into unlabeled / labeled / validation
/// / test by `ratios`, shuffled with `seed`.
pub fn split_by_patient(
    dataset: &Dataset,
    ratios: SplitRatios,
    max_labeled_ratio: f64,
    seed: u64,
) -> Result<SplitManifest, DataError> {
    let weights = ratios.as_array();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(DataError::Config(format!("invalid split ratios {weights:?}")));
    }
    let mut patients = dataset.patients();
    if patients.len() < 4 {
        return Err(DataError::Split(format!("need at least 4 patients, found {}", patients.len())));
    }
    let counts = apportion(patients.len(), &weights);
    for (k, (&c, &w)) in counts.iter().zip(&weights).enumerate() {
        if w > 0.0 && c == 0 {
            return Err(DataError::Split(format!(
                "{} patients cannot fill the {} split",
                patients.len(),
                SPLIT_NAMES[k]
            )));
        }
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut groups: [Vec<String>; 4] = Default::default();
    let mut start = 0;
    for (k, &c) in counts.iter().enumerate() {
        groups[k] = patients[start..start + c].to_vec();
        groups[k].sort();
        start += c;
    }
    let split_of: BTreeMap<&str, usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(k, g)| g.iter().map(move |p| (p.as_str(), k)))
        .collect();
    let mut ids: [Vec<String>; 4] = Default::default();
    for s in &dataset.samples {
        ids[split_of[s.patient_id.as_str()]].push(s.id.clone());
    }
    for list in &mut ids {
        list.sort();
    }
    let [unlabeled, labeled, validation, test] = ids;
    if labeled.len() as f64 > max_labeled_ratio * unlabeled.len() as f64 {
        return Err(DataError::Split(format!(
            "labeled split has {} samples, more than {max_labeled_ratio} x {} unlabeled",
            labeled.len(),
            unlabeled.len()
        )));
    }
    Ok(SplitManifest {
        seed,
        ratios,
        max_labeled_ratio,
        unlabeled,
        labeled,
        validation,
        test,
        patients: groups,
    })
}
