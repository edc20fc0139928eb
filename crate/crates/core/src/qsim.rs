//! Exact statevector simulation of the variational circuit.
//!
//! Qubit `q` is bit `q` of the amplitude index (little-endian). A circuit
//! is angle encoding (`RY(u_q)` on every qubit) followed by `L` layers, each
//! applying the configured rotations to every qubit and then a chain of
//! CNOTs along the entangling topology. Gradients use the parameter-shift
//! rule, which is exact for every gate here since each rotation is
//! `exp(-i a P / 2)` for a Pauli `P`.

use std::f64::consts::FRAC_PI_2;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAX_QUBITS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QsimError {
    #[error("qubit count {0} outside 1..={MAX_QUBITS}")]
    QubitCount(usize),
    #[error("circuit needs at least one layer")]
    NoLayers,
    #[error("circuit needs at least one rotation axis per layer")]
    NoAxes,
    #[error("{what}: expected length {expected}, got {actual}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("variational parameters: expected shape {expected:?}, got {actual:?}")]
    ThetaShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("qubit index {index} out of range for {num_qubits} qubits")]
    QubitIndex { index: usize, num_qubits: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// CNOT(q, q+1 mod Q) for every q.
    Ring,
    /// CNOT(q, q+1) for q < Q-1.
    Line,
    /// No entangling gates.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationAxis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircuitSpec {
    pub num_qubits: usize,
    pub num_layers: usize,
    pub topology: Topology,
    /// Rotations applied to each qubit in every layer, in order.
    pub axes: Vec<RotationAxis>,
}

impl Default for CircuitSpec {
    fn default() -> Self {
        Self {
            num_qubits: 8,
            num_layers: 2,
            topology: Topology::Ring,
            axes: vec![RotationAxis::Y, RotationAxis::Z],
        }
    }
}

impl CircuitSpec {
    pub fn new(num_qubits: usize, num_layers: usize, topology: Topology) -> Self {
        Self {
            num_qubits,
            num_layers,
            topology,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), QsimError> {
        if self.num_qubits == 0 || self.num_qubits > MAX_QUBITS {
            return Err(QsimError::QubitCount(self.num_qubits));
        }
        if self.num_layers == 0 {
            return Err(QsimError::NoLayers);
        }
        if self.axes.is_empty() {
            return Err(QsimError::NoAxes);
        }
        Ok(())
    }

    /// Shape of Θ: `[L, Q, axes]`.
    pub fn theta_shape(&self) -> Vec<usize> {
        vec![self.num_layers, self.num_qubits, self.axes.len()]
    }

    pub fn num_theta(&self) -> usize {
        self.num_layers * self.num_qubits * self.axes.len()
    }

    /// (control, target) pairs of one entangling layer.
    pub fn entanglers(&self) -> Vec<(usize, usize)> {
        let q = self.num_qubits;
        match self.topology {
            Topology::None => Vec::new(),
            Topology::Line => (0..q.saturating_sub(1)).map(|i| (i, i + 1)).collect(),
            Topology::Ring if q == 1 => Vec::new(),
            Topology::Ring => (0..q).map(|i| (i, (i + 1) % q)).collect(),
        }
    }
}

/// Trainable circuit angles Θ with shape `[L, Q, axes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    theta: Tensor,
}

impl VariationalParams {
    pub fn new(spec: &CircuitSpec, theta: Tensor) -> Result<Self, QsimError> {
        let expected = spec.theta_shape();
        if theta.shape() != expected.as_slice() {
            return Err(QsimError::ThetaShape {
                expected,
                actual: theta.shape().to_vec(),
            });
        }
        Ok(Self { theta })
    }

    pub fn zeros(spec: &CircuitSpec) -> Self {
        Self {
            theta: Tensor::zeros(&spec.theta_shape()),
        }
    }

    /// Uniform in `[-0.1, 0.1]`, close to the identity circuit.
    pub fn init_near_identity<R: Rng + ?Sized>(spec: &CircuitSpec, rng: &mut R) -> Self {
        Self {
            theta: Tensor::uniform(&spec.theta_shape(), -0.1, 0.1, rng),
        }
    }

    pub fn theta(&self) -> &Tensor {
        &self.theta
    }

    pub fn into_tensor(self) -> Tensor {
        self.theta
    }
}

#[cfg(debug_assertions)]
thread_local! {
    static AMPLITUDE_TOUCHES: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Amplitudes touched by single-qubit gates on this thread (debug builds).
#[cfg(debug_assertions)]
pub fn amplitude_touches() -> u64 {
    AMPLITUDE_TOUCHES.with(|c| c.get())
}

#[cfg(debug_assertions)]
pub fn reset_amplitude_touches() {
    AMPLITUDE_TOUCHES.with(|c| c.set(0));
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    num_qubits: usize,
    amps: Vec<Complex64>,
}

impl StateVector {
    /// `|0…0⟩`.
    pub fn zero(num_qubits: usize) -> Result<Self, QsimError> {
        if num_qubits == 0 || num_qubits > MAX_QUBITS {
            return Err(QsimError::QubitCount(num_qubits));
        }
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << num_qubits];
        amps[0] = Complex64::new(1.0, 0.0);
        Ok(Self { num_qubits, amps })
    }

    /// Wraps raw amplitudes; the caller is responsible for normalization.
    pub fn from_amplitudes(amps: Vec<Complex64>) -> Result<Self, QsimError> {
        let n = amps.len();
        if n < 2 || !n.is_power_of_two() || n.trailing_zeros() as usize > MAX_QUBITS {
            return Err(QsimError::Length {
                what: "amplitudes",
                expected: n.next_power_of_two().max(2),
                actual: n,
            });
        }
        Ok(Self {
            num_qubits: n.trailing_zeros() as usize,
            amps,
        })
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    fn check_qubit(&self, q: usize) -> Result<(), QsimError> {
        if q >= self.num_qubits {
            return Err(QsimError::QubitIndex {
                index: q,
                num_qubits: self.num_qubits,
            });
        }
        Ok(())
    }

    /// Applies the 2×2 matrix `[[a, b], [c, d]]` to qubit `q`.
    fn apply_single(&mut self, q: usize, m: [Complex64; 4]) {
        let bit = 1usize << q;
        for i in 0..self.amps.len() {
            if i & bit == 0 {
                let a0 = self.amps[i];
                let a1 = self.amps[i | bit];
                self.amps[i] = m[0] * a0 + m[1] * a1;
                self.amps[i | bit] = m[2] * a0 + m[3] * a1;
            }
        }
        #[cfg(debug_assertions)]
        AMPLITUDE_TOUCHES.with(|c| c.set(c.get() + self.amps.len() as u64));
    }

    pub fn apply_rotation(&mut self, axis: RotationAxis, q: usize, angle: f64) -> Result<(), QsimError> {
        self.check_qubit(q)?;
        self.apply_single(q, rotation_matrix(axis, angle));
        Ok(())
    }

    pub fn apply_cnot(&mut self, control: usize, target: usize) -> Result<(), QsimError> {
        self.check_qubit(control)?;
        self.check_qubit(target)?;
        if control == target {
            return Err(QsimError::QubitIndex {
                index: target,
                num_qubits: self.num_qubits,
            });
        }
        let (cb, tb) = (1usize << control, 1usize << target);
        for i in 0..self.amps.len() {
            if i & cb != 0 && i & tb == 0 {
                self.amps.swap(i, i | tb);
            }
        }
        Ok(())
    }
}

/// Matrix of `exp(-i angle P / 2)` as `[m00, m01, m10, m11]`.
pub fn rotation_matrix(axis: RotationAxis, angle: f64) -> [Complex64; 4] {
    let (s, c) = (angle / 2.0).sin_cos();
    let re = |v: f64| Complex64::new(v, 0.0);
    match axis {
        RotationAxis::X => [re(c), Complex64::new(0.0, -s), Complex64::new(0.0, -s), re(c)],
        RotationAxis::Y => [re(c), re(-s), re(s), re(c)],
        RotationAxis::Z => [
            Complex64::new(c, -s),
            re(0.0),
            re(0.0),
            Complex64::new(c, s),
        ],
    }
}

/// Product state `⊗_q RY(u_q)|0⟩`.
pub fn angle_encode(u: &[f64]) -> Result<StateVector, QsimError> {
    let q = u.len();
    if q == 0 || q > MAX_QUBITS {
        return Err(QsimError::QubitCount(q));
    }
    let factors: Vec<(f64, f64)> = u.iter().map(|&a| ((a / 2.0).cos(), (a / 2.0).sin())).collect();
    let amps = (0..1usize << q)
        .map(|k| {
            let v = factors
                .iter()
                .enumerate()
                .map(|(bit, &(c, s))| if k >> bit & 1 == 0 { c } else { s })
                .product::<f64>();
            Complex64::new(v, 0.0)
        })
        .collect();
    Ok(StateVector { num_qubits: q, amps })
}

/// Applies `U(Θ)` to `state`.
pub fn apply_variational(
    state: &StateVector,
    spec: &CircuitSpec,
    params: &VariationalParams,
) -> Result<StateVector, QsimError> {
    spec.validate()?;
    if state.num_qubits != spec.num_qubits {
        return Err(QsimError::Length {
            what: "state qubits",
            expected: spec.num_qubits,
            actual: state.num_qubits,
        });
    }
    check_theta(spec, params)?;
    let program = Program::variational_only(spec);
    let mut out = state.clone();
    for op in &program.ops {
        op.apply(&mut out, params.theta.data());
    }
    Ok(out)
}

/// Per-qubit `⟨Z_q⟩`.
pub fn measure_z(state: &StateVector) -> Vec<f64> {
    let mut z = vec![0.0; state.num_qubits];
    for (k, a) in state.amps.iter().enumerate() {
        let p = a.norm_sqr();
        for (q, zq) in z.iter_mut().enumerate() {
            if k >> q & 1 == 0 {
                *zq += p;
            } else {
                *zq -= p;
            }
        }
    }
    z
}

/// Full forward map `u ↦ ⟨Z⟩` for encoded input `u`.
pub fn expectations(u: &[f64], spec: &CircuitSpec, params: &VariationalParams) -> Result<Vec<f64>, QsimError> {
    check_inputs(u, spec, params)?;
    let program = Program::full(spec);
    let angles = flat_angles(u, params);
    let mut state = StateVector::zero(spec.num_qubits)?;
    for op in &program.ops {
        op.apply(&mut state, &angles);
    }
    Ok(measure_z(&state))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantumGrads {
    /// `∂L/∂u`, length Q.
    pub u: Vec<f64>,
    /// `∂L/∂Θ`, shape `[L, Q, axes]`.
    pub theta: Tensor,
}

/// Parameter-shift gradients of `L = grad_q · ⟨Z⟩` with respect to the
/// encoding angles and Θ. Also returns the unshifted `⟨Z⟩`.
pub fn quantum_gradients(
    u: &[f64],
    spec: &CircuitSpec,
    params: &VariationalParams,
    grad_q: &[f64],
) -> Result<(Vec<f64>, QuantumGrads), QsimError> {
    check_inputs(u, spec, params)?;
    if grad_q.len() != spec.num_qubits {
        return Err(QsimError::Length {
            what: "upstream gradient",
            expected: spec.num_qubits,
            actual: grad_q.len(),
        });
    }
    let program = Program::full(spec);
    let angles = flat_angles(u, params);

    // states[g] is the state before op g.
    let mut states = Vec::with_capacity(program.ops.len() + 1);
    let mut state = StateVector::zero(spec.num_qubits)?;
    for op in &program.ops {
        states.push(state.clone());
        op.apply(&mut state, &angles);
    }
    let z = measure_z(&state);

    let mut grads = vec![0.0; angles.len()];
    for (g, op) in program.ops.iter().enumerate() {
        let Op::Rotation { axis, qubit, angle } = *op else {
            continue;
        };
        let shifted = |delta: f64| {
            let mut s = states[g].clone();
            s.apply_single(qubit, rotation_matrix(axis, angles[angle] + delta));
            for later in &program.ops[g + 1..] {
                later.apply(&mut s, &angles);
            }
            measure_z(&s)
        };
        let plus = shifted(FRAC_PI_2);
        let minus = shifted(-FRAC_PI_2);
        grads[angle] = plus
            .iter()
            .zip(&minus)
            .zip(grad_q)
            .map(|((p, m), g)| g * (p - m) / 2.0)
            .sum();
    }
    let q = spec.num_qubits;
    let theta = Tensor::new(spec.theta_shape(), grads[q..].to_vec()).expect("theta shape");
    Ok((
        z,
        QuantumGrads {
            u: grads[..q].to_vec(),
            theta,
        },
    ))
}

fn check_theta(spec: &CircuitSpec, params: &VariationalParams) -> Result<(), QsimError> {
    let expected = spec.theta_shape();
    if params.theta.shape() != expected.as_slice() {
        return Err(QsimError::ThetaShape {
            expected,
            actual: params.theta.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_inputs(u: &[f64], spec: &CircuitSpec, params: &VariationalParams) -> Result<(), QsimError> {
    spec.validate()?;
    if u.len() != spec.num_qubits {
        return Err(QsimError::Length {
            what: "encoding angles",
            expected: spec.num_qubits,
            actual: u.len(),
        });
    }
    check_theta(spec, params)
}

fn flat_angles(u: &[f64], params: &VariationalParams) -> Vec<f64> {
    u.iter().chain(params.theta.data()).copied().collect()
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Rotation {
        axis: RotationAxis,
        qubit: usize,
        /// Index into the flat angle vector.
        angle: usize,
    },
    Cnot(usize, usize),
}

impl Op {
    fn apply(&self, state: &mut StateVector, angles: &[f64]) {
        match *self {
            Op::Rotation { axis, qubit, angle } => {
                state.apply_single(qubit, rotation_matrix(axis, angles[angle]))
            }
            Op::Cnot(c, t) => state.apply_cnot(c, t).expect("validated topology"),
        }
    }
}

/// Flattened gate list. Angle indices address `[u (Q), Θ (row-major)]`,
/// or Θ alone for the variational-only program.
struct Program {
    ops: Vec<Op>,
}

impl Program {
    fn full(spec: &CircuitSpec) -> Self {
        let q = spec.num_qubits;
        let mut ops: Vec<Op> = (0..q)
            .map(|i| Op::Rotation {
                axis: RotationAxis::Y,
                qubit: i,
                angle: i,
            })
            .collect();
        ops.extend(Self::layers(spec, q));
        Self { ops }
    }

    fn variational_only(spec: &CircuitSpec) -> Self {
        Self {
            ops: Self::layers(spec, 0),
        }
    }

    fn layers(spec: &CircuitSpec, offset: usize) -> Vec<Op> {
        let (q, a) = (spec.num_qubits, spec.axes.len());
        let mut ops = Vec::new();
        for l in 0..spec.num_layers {
            for qubit in 0..q {
                for (k, &axis) in spec.axes.iter().enumerate() {
                    ops.push(Op::Rotation {
                        axis,
                        qubit,
                        angle: offset + (l * q + qubit) * a + k,
                    });
                }
            }
            ops.extend(spec.entanglers().into_iter().map(|(c, t)| Op::Cnot(c, t)));
        }
        ops
    }
}
