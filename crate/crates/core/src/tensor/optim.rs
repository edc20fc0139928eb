use serde::{Deserialize, Serialize};

use super::{Param, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one ordered list of parameters.
///
/// Moments are allocated on the first step; afterwards the parameter list
/// must keep the same shapes in the same order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// One bias-corrected Adam update of every parameter from its `grad`.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<(), TensorError> {
        if self.first.is_empty() && self.step == 0 {
            self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                layer: "adam",
                expected: vec![self.first.len()],
                actual: vec![params.len()],
            });
        }
        for (p, m) in params.iter().zip(&self.first) {
            p.grad.expect_shape("adam", m.shape())?;
            p.value.expect_shape("adam", m.shape())?;
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad.data().to_vec();
            let values = p.value.data_mut();
            for i in 0..g.len() {
                let md = &mut m.data_mut()[i];
                *md = beta1 * *md + (1.0 - beta1) * g[i];
                let mhat = *md / c1;
                let vd = &mut v.data_mut()[i];
                *vd = beta2 * *vd + (1.0 - beta2) * g[i] * g[i];
                let vhat = *vd / c2;
                values[i] -= learning_rate * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Param {
        Param::new(Tensor::from_vec(vec![v]))
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar(1.25);
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value.data(), &[1.25]);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps).
        let mut p = scalar(0.0);
        p.grad.data_mut()[0] = 1.0;
        let mut adam = AdamState::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        adam.step(&mut [&mut p]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_change_is_rejected() {
        let mut p = scalar(0.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut [&mut p]).unwrap();
        let mut q = Param::new(Tensor::zeros(&[2]));
        assert!(adam.step(&mut [&mut q]).is_err());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Param::new(Tensor::from_vec(vec![0.3, -0.7, 1.1]));
            let mut adam = AdamState::new(AdamConfig::default());
            for k in 0..20 {
                let g: Vec<f64> = p.value.data().iter().map(|v| 2.0 * v + k as f64 * 0.01).collect();
                p.grad.data_mut().copy_from_slice(&g);
                adam.step(&mut [&mut p]).unwrap();
            }
            p.value
        };
        assert_eq!(run().data(), run().data());
    }
}
