use serde::{Deserialize, Serialize};

use super::SslError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            embed_dim: 64,
            hidden_dim: 128,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), SslError> {
        check_temperature(self.temperature)?;
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(SslError::Config("projection widths must be positive".into()));
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<(), SslError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(SslError::Temperature(tau))
    }
}

/// `2N` unit vectors where rows `2k` and `2k + 1` are views of sample `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    z: Tensor,
}

impl EmbeddingBatch {
    pub const NORM_TOLERANCE: f64 = 1e-9;

    pub fn new(z: Tensor) -> Result<Self, SslError> {
        if z.shape().len() != 2 || z.shape()[0] % 2 != 0 {
            return Err(SslError::Batch(format!(
                "expected [2N, D] embeddings, got {:?}",
                z.shape()
            )));
        }
        let d = z.shape()[1];
        for (i, row) in z.data().chunks(d.max(1)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > Self::NORM_TOLERANCE {
                return Err(SslError::Batch(format!("embedding {i} has norm {norm}")));
            }
        }
        Ok(Self { z })
    }

    pub fn pairs(&self) -> usize {
        self.z.shape()[0] / 2
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.z
    }
}

/// `z_iᵀ z_j / τ`.
pub fn similarity(zi: &[f64], zj: &[f64], tau: f64) -> Result<f64, SslError> {
    check_temperature(tau)?;
    if zi.len() != zj.len() {
        return Err(SslError::Batch(format!(
            "similarity of vectors with lengths {} and {}",
            zi.len(),
            zj.len()
        )));
    }
    Ok(zi.iter().zip(zj).map(|(a, b)| a * b).sum::<f64>() / tau)
}

/// NT-Xent over a validated batch of unit embeddings.
pub fn ntxent_loss(batch: &EmbeddingBatch, tau: f64) -> Result<(f64, Tensor), SslError> {
    ntxent_loss_unchecked(&batch.z, tau)
}

/// NT-Xent on raw `[2N, D]` rows without the unit-norm check.
///
/// Returns the mean over all `2N` anchors of
/// `-log(exp(s(a, p(a))) / Σ_{b≠a} exp(s(a, b)))` and its gradient with
/// respect to every row.
pub fn ntxent_loss_unchecked(z: &Tensor, tau: f64) -> Result<(f64, Tensor), SslError> {
    check_temperature(tau)?;
    if z.shape().len() != 2 || z.shape()[0] % 2 != 0 {
        return Err(SslError::Batch(format!(
            "expected [2N, D] embeddings, got {:?}",
            z.shape()
        )));
    }
    let (m, d) = (z.shape()[0], z.shape()[1]);
    if m < 4 {
        return Err(SslError::TooFewPairs(m / 2));
    }
    let rows: Vec<&[f64]> = z.data().chunks(d).collect();
    let mut sim = vec![0.0; m * m];
    for a in 0..m {
        for b in a..m {
            let s = rows[a].iter().zip(rows[b]).map(|(x, y)| x * y).sum::<f64>() / tau;
            sim[a * m + b] = s;
            sim[b * m + a] = s;
        }
    }
    // coef[a][b] = ∂L/∂s(a, b)
    let mut coef = vec![0.0; m * m];
    let mut loss = 0.0;
    let scale = 1.0 / m as f64;
    for a in 0..m {
        let p = a ^ 1;
        let row = &sim[a * m..(a + 1) * m];
        let max = row
            .iter()
            .enumerate()
            .filter(|&(b, _)| b != a)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row
            .iter()
            .enumerate()
            .filter(|&(b, _)| b != a)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        let lse = max + denom.ln();
        loss += lse - row[p];
        for b in 0..m {
            if b != a {
                coef[a * m + b] = scale * (row[b] - lse).exp();
            }
        }
        coef[a * m + p] -= scale;
    }
    loss *= scale;

    let mut grad = vec![0.0; m * d];
    for a in 0..m {
        let g = &mut grad[a * d..(a + 1) * d];
        for b in 0..m {
            let c = (coef[a * m + b] + coef[b * m + a]) / tau;
            if c != 0.0 {
                for (gv, zv) in g.iter_mut().zip(rows[b]) {
                    *gv += c * zv;
                }
            }
        }
    }
    Ok((loss, Tensor::new(vec![m, d], grad).expect("gradient shape")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_cases() {
        let e0 = [1.0, 0.0];
        let e1 = [0.0, 1.0];
        assert_eq!(similarity(&e0, &e0, 0.5).unwrap(), 2.0);
        assert_eq!(similarity(&e0, &e1, 0.5).unwrap(), 0.0);
        assert_eq!(similarity(&e0, &[-1.0, 0.0], 0.5).unwrap(), -2.0);
        assert_eq!(similarity(&e0, &e0, 0.0), Err(SslError::Temperature(0.0)));
        assert!(similarity(&e0, &e0, -1.0).is_err());
    }

    #[test]
    fn constructed_two_pair_case() {
        // Pair 0 on e0, pair 1 on e1: positives identical, cross pairs orthogonal.
        let z = Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let batch = EmbeddingBatch::new(z).unwrap();
        let (loss, _) = ntxent_loss(&batch, 1.0).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0)).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        assert!((loss - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn single_pair_has_no_negatives() {
        let z = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(ntxent_loss_unchecked(&z, 0.5).unwrap_err(), SslError::TooFewPairs(1));
    }

    #[test]
    fn batch_rejects_non_unit_rows() {
        let z = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, 0.0]).unwrap();
        assert!(EmbeddingBatch::new(z).is_err());
        let odd = Tensor::new(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap();
        assert!(EmbeddingBatch::new(odd).is_err());
    }
}
