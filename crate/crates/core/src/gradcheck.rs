//! Analytic-versus-numeric gradient checks for the quantum circuit and for
//! a miniature hybrid model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hybrid::{ConvBlockConfig, EncoderConfig, FreezePolicy, HybridError, HybridModel, ModelConfig, Optimizer};
use crate::qsim::{self, CircuitSpec, Topology, VariationalParams};
use crate::ssl::ContrastiveConfig;
use crate::tensor::{AdamConfig, Tensor};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-6;
pub const QUANTUM_TOLERANCE: f64 = 1e-6;
pub const HYBRID_TOLERANCE: f64 = 1e-4;
/// Denominator floor for relative errors, so gradients near zero are
/// compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: String, error: f64, tolerance: f64) -> Self {
        Self {
            name,
            error,
            tolerance,
            passed: error < tolerance,
        }
    }
}

fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            v[i] = x[i] + FD_STEP;
            let plus = f(&v);
            v[i] = x[i] - FD_STEP;
            let minus = f(&v);
            v[i] = x[i];
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}

/// NaN counts as an infinite error rather than vanishing in `f64::max`.
fn worst(errors: impl Iterator<Item = f64>) -> f64 {
    errors.map(|e| if e.is_nan() { f64::INFINITY } else { e }).fold(0.0, f64::max)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    worst(a.iter().zip(b).map(|(x, y)| (x - y).abs()))
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    worst(a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_FLOOR)))
}

/// Parameter-shift gradients of a random linear readout `w · ⟨Z⟩` against
/// central differences, for `configs` random circuits with up to
/// `max_qubits` qubits. Errors are absolute.
pub fn quantum(configs: usize, max_qubits: usize, seed: u64) -> Result<Vec<CheckResult>, HybridError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_qubits = max_qubits.max(1);
    let mut out = Vec::with_capacity(configs);
    for trial in 0..configs {
        let q = 1 + trial % max_qubits;
        let l = 1 + trial % 3;
        let topology = if trial % 2 == 0 { Topology::Ring } else { Topology::Line };
        let spec = CircuitSpec::new(q, l, topology);
        let theta = Tensor::uniform(&spec.theta_shape(), -std::f64::consts::PI, std::f64::consts::PI, &mut rng);
        let params = VariationalParams::new(&spec, theta)?;
        let u: Vec<f64> = (0..q).map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)).collect();
        let w: Vec<f64> = (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, grads) = qsim::quantum_gradients(&u, &spec, &params, &w)?;

        let objective = |u: &[f64], theta: &[f64]| -> f64 {
            let p = Tensor::new(spec.theta_shape(), theta.to_vec())
                .ok()
                .and_then(|t| VariationalParams::new(&spec, t).ok())
                .expect("shape preserved");
            let z = qsim::expectations(u, &spec, &p).expect("validated circuit");
            z.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let theta = params.theta().data().to_vec();
        let du = central_diff(&u, |x| objective(x, &theta));
        let dtheta = central_diff(&theta, |t| objective(&u, t));
        let err = max_abs(&grads.u, &du).max(max_abs(grads.theta.data(), &dtheta));
        out.push(CheckResult::new(
            format!("circuit {trial} (Q={q}, L={l}, {topology:?})"),
            err,
            QUANTUM_TOLERANCE,
        ));
    }
    Ok(out)
}

/// The miniature used for full-model checks: 8x8 input, two separable
/// blocks, feature dimension 6 (or `qubits` if larger).
pub fn miniature_config(qubits: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            height: 8,
            width: 8,
            blocks: vec![
                ConvBlockConfig { channels: 3, stride: 2 },
                ConvBlockConfig { channels: 4, stride: 2 },
            ],
            feature_dim: qubits.max(6),
            separable: true,
            batchnorm: true,
        },
        circuit: CircuitSpec::new(qubits, layers, Topology::Ring),
        contrastive: ContrastiveConfig {
            temperature: 0.5,
            embed_dim: 4,
            hidden_dim: 5,
        },
        alpha_init: 0.5,
        ..ModelConfig::default()
    }
}

/// Cross-entropy gradients of every parameter tensor of the miniature,
/// grouped by name, against central differences. Errors are relative with
/// floor [`RELATIVE_FLOOR`]. Batchnorm statistics are first moved off their
/// initial values so the eval path is exercised non-trivially.
pub fn hybrid(qubits: usize, layers: usize, seed: u64) -> Result<Vec<CheckResult>, HybridError> {
    let mut model = HybridModel::new(miniature_config(qubits, layers), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut frozen = Optimizer::new(AdamConfig {
        learning_rate: 0.0,
        ..AdamConfig::default()
    });
    for _ in 0..3 {
        let x = Tensor::uniform(&[4, 8, 8], 0.0, 1.0, &mut rng);
        model.finetune_step(&x, &[0, 1, 0, 1], FreezePolicy::AllUnfrozen, &mut frozen)?;
    }
    model.set_eval();

    let x = Tensor::uniform(&[4, 8, 8], 0.0, 1.0, &mut rng);
    let labels = [1, 0, 0, 1];
    model.zero_grad();
    model.classification_loss_and_grads(&x, &labels, 0)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .classification_params_mut()
        .into_iter()
        .map(|(g, p)| (g, p.grad.data().to_vec()))
        .collect();

    let mut groups: Vec<(String, f64)> = Vec::new();
    for (k, (group, expected)) in analytic.iter().enumerate() {
        let base = model.classification_params_mut()[k].1.value.data().to_vec();
        let mut probe = model.clone();
        let numeric = central_diff(&base, |v| {
            probe.classification_params_mut()[k].1.value.data_mut().copy_from_slice(v);
            probe.zero_grad();
            probe.classification_loss_and_grads(&x, &labels, 0).unwrap_or(f64::NAN)
        });
        let err = max_rel(expected, &numeric);
        match groups.iter_mut().find(|(g, _)| g == group) {
            Some((_, e)) => *e = e.max(err),
            None => groups.push((group.clone(), err)),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(g, e)| CheckResult::new(g, e, HYBRID_TOLERANCE))
        .collect())
}
