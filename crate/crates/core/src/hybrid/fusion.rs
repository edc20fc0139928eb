use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;

use super::HybridError;
use crate::qsim::{self, CircuitSpec, VariationalParams};
use crate::tensor::{Param, Tensor};

/// Learnable compression to qubit angles, the variational circuit, and the
/// residual projection back to feature space:
/// `u = W_q h + b_q`, `q = ⟨Z⟩(u; Θ)`, `h̃ = h + α W_r q`.
#[derive(Debug, Clone)]
pub struct QuantumFusion {
    pub spec: CircuitSpec,
    pub w_q: Param,
    pub b_q: Param,
    pub theta: Param,
    pub w_r: Param,
    pub alpha: Param,
    /// Feed `π·tanh(u)` to the circuit instead of raw `u`.
    pub bound_angles: bool,
    cache: Option<FusionCache>,
}

#[derive(Debug, Clone)]
struct FusionCache {
    h: Tensor,
    u: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(&[rows, cols], -bound, bound, rng)
}

impl QuantumFusion {
    pub fn new<R: Rng + ?Sized>(
        feature_dim: usize,
        spec: CircuitSpec,
        alpha: f64,
        bound_angles: bool,
        rng: &mut R,
    ) -> Result<Self, HybridError> {
        spec.validate()?;
        let q = spec.num_qubits;
        if feature_dim < q {
            return Err(HybridError::Config(format!(
                "feature dimension {feature_dim} must be at least the qubit count {q}"
            )));
        }
        let w_q = glorot(q, feature_dim, rng);
        let theta = VariationalParams::init_near_identity(&spec, rng).into_tensor();
        let w_r = glorot(feature_dim, q, rng);
        Ok(Self {
            w_q: Param::new(w_q),
            b_q: Param::new(Tensor::zeros(&[q])),
            theta: Param::new(theta),
            w_r: Param::new(w_r),
            alpha: Param::new(Tensor::from_vec(vec![alpha])),
            spec,
            bound_angles,
            cache: None,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w_q.value.shape()[1]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.value.data()[0]
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> [(&'static str, &Param); 5] {
        [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("theta", &self.theta),
            ("w_r", &self.w_r),
            ("alpha", &self.alpha),
        ]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Param); 5] {
        [
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
            ("theta", &mut self.theta),
            ("w_r", &mut self.w_r),
            ("alpha", &mut self.alpha),
        ]
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn compress(&self, h: &[f64]) -> Vec<f64> {
        let d = self.feature_dim();
        let w = self.w_q.value.data();
        self.b_q
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(j, b)| b + w[j * d..(j + 1) * d].iter().zip(h).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    fn circuit_angles(&self, u: &[f64]) -> Vec<f64> {
        if self.bound_angles {
            u.iter().map(|v| PI * v.tanh()).collect()
        } else {
            u.to_vec()
        }
    }

    fn variational(&self) -> VariationalParams {
        VariationalParams::new(&self.spec, self.theta.value.clone()).expect("theta shape fixed at construction")
    }

    /// `h + α W_r q` for one feature vector, also returning `u` and `q`.
    fn enhance_parts(&self, h: &[f64], vp: &VariationalParams) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), HybridError> {
        let u = self.compress(h);
        let q = qsim::expectations(&self.circuit_angles(&u), &self.spec, vp)?;
        let alpha = self.alpha();
        let nq = self.spec.num_qubits;
        let wr = self.w_r.value.data();
        let out = h
            .iter()
            .enumerate()
            .map(|(i, hv)| {
                let mix: f64 = wr[i * nq..(i + 1) * nq].iter().zip(&q).map(|(a, b)| a * b).sum();
                hv + alpha * mix
            })
            .collect();
        Ok((out, u, q))
    }

    /// Enhances a single feature vector.
    pub fn enhance(&self, h: &[f64]) -> Result<Vec<f64>, HybridError> {
        if h.len() != self.feature_dim() {
            return Err(HybridError::Tensor(crate::tensor::TensorError::ShapeMismatch {
                layer: "quantum_enhance",
                expected: vec![self.feature_dim()],
                actual: vec![h.len()],
            }));
        }
        Ok(self.enhance_parts(h, &self.variational())?.0)
    }

    /// Batched forward over `[N, d]`; samples are simulated in parallel.
    pub fn forward(&mut self, h: &Tensor) -> Result<Tensor, HybridError> {
        let d = self.feature_dim();
        h.expect_shape("quantum_enhance", &[h.shape()[0], d])?;
        let vp = self.variational();
        let parts: Vec<_> = (0..h.shape()[0])
            .into_par_iter()
            .map(|i| self.enhance_parts(h.item(i), &vp))
            .collect::<Result<_, _>>()?;
        let mut out = Vec::with_capacity(h.len());
        let mut us = Vec::with_capacity(parts.len());
        let mut qs = Vec::with_capacity(parts.len());
        for (o, u, q) in parts {
            out.extend(o);
            us.push(u);
            qs.push(q);
        }
        self.cache = Some(FusionCache {
            h: h.clone(),
            u: us,
            q: qs,
        });
        let out = Tensor::new(h.shape().to_vec(), out)?;
        if !out.all_finite() {
            return Err(HybridError::NonFinite("quantum fusion output"));
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns `∂L/∂h`.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, HybridError> {
        let cache = self
            .cache
            .take()
            .ok_or(crate::tensor::TensorError::BackwardBeforeForward { layer: "quantum_enhance" })?;
        let (n, d) = (cache.h.shape()[0], self.feature_dim());
        grad_out.expect_shape("quantum_enhance", &[n, d])?;
        let nq = self.spec.num_qubits;
        let alpha = self.alpha();
        let vp = self.variational();
        let wr = self.w_r.value.data().to_vec();
        let wq = self.w_q.value.data().to_vec();

        struct Item {
            dh: Vec<f64>,
            du: Vec<f64>,
            dtheta: Tensor,
            dwr: Vec<f64>,
            dalpha: f64,
        }
        let items: Vec<Item> = (0..n)
            .into_par_iter()
            .map(|i| -> Result<Item, HybridError> {
                let g = grad_out.item(i);
                let q = &cache.q[i];
                let mut dq = vec![0.0; nq];
                let mut dwr = vec![0.0; d * nq];
                let mut dalpha = 0.0;
                for r in 0..d {
                    let row = &wr[r * nq..(r + 1) * nq];
                    let mix: f64 = row.iter().zip(q).map(|(a, b)| a * b).sum();
                    dalpha += g[r] * mix;
                    for j in 0..nq {
                        dq[j] += alpha * g[r] * row[j];
                        dwr[r * nq + j] = alpha * g[r] * q[j];
                    }
                }
                let angles = self.circuit_angles(&cache.u[i]);
                let (_, qg) = qsim::quantum_gradients(&angles, &self.spec, &vp, &dq)?;
                let du: Vec<f64> = if self.bound_angles {
                    qg.u
                        .iter()
                        .zip(&cache.u[i])
                        .map(|(g, u)| g * PI * (1.0 - u.tanh().powi(2)))
                        .collect()
                } else {
                    qg.u
                };
                let mut dh = g.to_vec();
                for (j, duj) in du.iter().enumerate() {
                    for (k, dhk) in dh.iter_mut().enumerate() {
                        *dhk += duj * wq[j * d + k];
                    }
                }
                Ok(Item {
                    dh,
                    du,
                    dtheta: qg.theta,
                    dwr,
                    dalpha,
                })
            })
            .collect::<Result<_, _>>()?;

        let mut dh_all = Vec::with_capacity(n * d);
        for (i, it) in items.iter().enumerate() {
            let h = cache.h.item(i);
            let gwq = self.w_q.grad.data_mut();
            for (j, duj) in it.du.iter().enumerate() {
                for k in 0..d {
                    gwq[j * d + k] += duj * h[k];
                }
            }
            for (gb, duj) in self.b_q.grad.data_mut().iter_mut().zip(&it.du) {
                *gb += duj;
            }
            self.theta.grad.add_assign(&it.dtheta);
            for (a, b) in self.w_r.grad.data_mut().iter_mut().zip(&it.dwr) {
                *a += b;
            }
            self.alpha.grad.data_mut()[0] += it.dalpha;
            dh_all.extend_from_slice(&it.dh);
        }
        Ok(Tensor::new(vec![n, d], dh_all)?)
    }
}
