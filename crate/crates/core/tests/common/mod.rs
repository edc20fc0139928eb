//! Reference oracles shared by the integration and acceptance tests.
//!
//! Everything here is written directly from definitions and deliberately
//! shares no code path with the library implementation it checks.
#![allow(dead_code)]

use num_complex::Complex64;
use rand::Rng;

pub type CMatrix = Vec<Vec<Complex64>>;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn identity2() -> CMatrix {
    vec![vec![c(1.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(1.0, 0.0)]]
}

pub fn ry(theta: f64) -> CMatrix {
    let (s, co) = ((theta / 2.0).sin(), (theta / 2.0).cos());
    vec![vec![c(co, 0.0), c(-s, 0.0)], vec![c(s, 0.0), c(co, 0.0)]]
}

pub fn rz(theta: f64) -> CMatrix {
    let phase = |a: f64| c(a.cos(), a.sin());
    vec![
        vec![phase(-theta / 2.0), c(0.0, 0.0)],
        vec![c(0.0, 0.0), phase(theta / 2.0)],
    ]
}

pub fn rx(theta: f64) -> CMatrix {
    let (s, co) = ((theta / 2.0).sin(), (theta / 2.0).cos());
    vec![vec![c(co, 0.0), c(0.0, -s)], vec![c(0.0, -s), c(co, 0.0)]]
}

fn pauli_x() -> CMatrix {
    vec![vec![c(0.0, 0.0), c(1.0, 0.0)], vec![c(1.0, 0.0), c(0.0, 0.0)]]
}

fn proj(bit: usize) -> CMatrix {
    let mut m = vec![vec![c(0.0, 0.0); 2]; 2];
    m[bit][bit] = c(1.0, 0.0);
    m
}

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (ra, rb) = (a.len(), b.len());
    let mut out = vec![vec![c(0.0, 0.0); ra * rb]; ra * rb];
    for i in 0..ra {
        for j in 0..ra {
            for k in 0..rb {
                for l in 0..rb {
                    out[i * rb + k][j * rb + l] = a[i][j] * b[k][l];
                }
            }
        }
    }
    out
}

/// `f_{Q-1} ⊗ … ⊗ f_0`, so qubit `q` is bit `q` of the basis index.
pub fn kron_all(factors: &[CMatrix]) -> CMatrix {
    let mut out = factors[factors.len() - 1].clone();
    for f in factors.iter().rev().skip(1) {
        out = kron(&out, f);
    }
    out
}

pub fn single_qubit_op(num_qubits: usize, qubit: usize, gate: &CMatrix) -> CMatrix {
    let factors: Vec<CMatrix> = (0..num_qubits)
        .map(|q| if q == qubit { gate.clone() } else { identity2() })
        .collect();
    kron_all(&factors)
}

/// `|0⟩⟨0|_c ⊗ I + |1⟩⟨1|_c ⊗ X_t`.
pub fn cnot_op(num_qubits: usize, control: usize, target: usize) -> CMatrix {
    let term = |bit: usize| {
        let factors: Vec<CMatrix> = (0..num_qubits)
            .map(|q| {
                if q == control {
                    proj(bit)
                } else if q == target && bit == 1 {
                    pauli_x()
                } else {
                    identity2()
                }
            })
            .collect();
        kron_all(&factors)
    };
    let (a, b) = (term(0), term(1));
    a.iter()
        .zip(&b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn matmul(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let n = a.len();
    let mut out = vec![vec![c(0.0, 0.0); n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

pub fn matvec(a: &CMatrix, v: &[Complex64]) -> Vec<Complex64> {
    a.iter()
        .map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

/// Dense `U(Θ)` for RY-then-RZ layers followed by CNOTs along `pairs`.
/// `theta[l][q] = [ry_angle, rz_angle]`.
pub fn variational_unitary(num_qubits: usize, theta: &[Vec<[f64; 2]>], pairs: &[(usize, usize)]) -> CMatrix {
    let dim = 1 << num_qubits;
    let mut u: CMatrix = (0..dim)
        .map(|i| (0..dim).map(|j| if i == j { c(1.0, 0.0) } else { c(0.0, 0.0) }).collect())
        .collect();
    for layer in theta {
        for (q, angles) in layer.iter().enumerate() {
            u = matmul(&single_qubit_op(num_qubits, q, &ry(angles[0])), &u);
            u = matmul(&single_qubit_op(num_qubits, q, &rz(angles[1])), &u);
        }
        for &(ctl, tgt) in pairs {
            u = matmul(&cnot_op(num_qubits, ctl, tgt), &u);
        }
    }
    u
}

/// `⊗ RY(u_q)|0⟩` via the dense single-qubit operators.
pub fn encoded_state(u: &[f64]) -> Vec<Complex64> {
    let n = u.len();
    let mut v = vec![c(0.0, 0.0); 1 << n];
    v[0] = c(1.0, 0.0);
    for (q, &a) in u.iter().enumerate() {
        v = matvec(&single_qubit_op(n, q, &ry(a)), &v);
    }
    v
}

pub fn z_expectations(state: &[Complex64], num_qubits: usize) -> Vec<f64> {
    (0..num_qubits)
        .map(|q| {
            state
                .iter()
                .enumerate()
                .map(|(k, a)| if (k >> q) & 1 == 0 { a.norm_sqr() } else { -a.norm_sqr() })
                .sum()
        })
        .collect()
}

/// NT-Xent straight from the definition, no log-sum-exp tricks.
pub fn ntxent_direct(z: &[Vec<f64>], tau: f64) -> f64 {
    let m = z.len();
    let sim = |a: usize, b: usize| z[a].iter().zip(&z[b]).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    for a in 0..m {
        let p = if a % 2 == 0 { a + 1 } else { a - 1 };
        let num = sim(a, p).exp();
        let den: f64 = (0..m).filter(|&b| b != a).map(|b| sim(a, b).exp()).sum();
        total += -(num / den).ln();
    }
    total / m as f64
}

/// Pairwise AUC: fraction of (positive, negative) pairs ranked correctly,
/// ties counted one half.
pub fn auc_brute(labels: &[u8], scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Central difference `(f(x+h) - f(x-h)) / 2h` for every coordinate of `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = buf[i];
            buf[i] = orig + h;
            let up = f(&buf);
            buf[i] = orig - h;
            let down = f(&buf);
            buf[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error with an absolute floor: entries smaller than `floor` in
/// magnitude are compared on `|a - b| / floor`.
pub fn max_rel_diff(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn random_unit_rows<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// L2-regularized logistic regression on raw, per-pixel standardized
/// inputs, trained by full-batch gradient descent. Returns test AUC.
pub fn linear_probe_auc(train: &[Vec<f64>], train_y: &[u8], test: &[Vec<f64>], test_y: &[u8]) -> f64 {
    let d = train[0].len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (train.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-6))
        .collect();
    let norm = |x: &Vec<f64>| -> Vec<f64> { x.iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j]).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(norm).collect();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let (lr, lambda) = (0.05, 1e-2);
    for _ in 0..300 {
        let mut gw: Vec<f64> = w.iter().map(|wj| lambda * wj).collect();
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(train_y) {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y as f64;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi / n;
            }
            gb += err / n;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= lr * g;
        }
        b -= lr * gb;
    }
    let scores: Vec<f64> = test
        .iter()
        .map(|x| b + norm(x).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>())
        .collect();
    auc_brute(test_y, &scores)
}
