//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{
    auc_brute, central_diff, encoded_state, matvec, max_abs_diff, max_rel_diff, ntxent_direct, random_unit_rows,
    variational_unitary,
};
use hyqal::data::{generate_synthetic, save_image_dir, split_by_patient, SplitRatios, SynthConfig};
use hyqal::eval::{confusion, emit_reports, evaluate, metrics, roc_auc};
use hyqal::gradcheck::miniature_config;
use hyqal::hybrid::{Checkpoint, FreezePolicy, HybridModel, ModelConfig, Optimizer};
use hyqal::pipeline::{pretrain, run_matrix, ExperimentConfig, Prepared, Silent, Variant};
use hyqal::qsim::{self, CircuitSpec, Topology, VariationalParams};
use hyqal::ssl::{ntxent_loss, EmbeddingBatch};
use hyqal::tensor::{AdamConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn theta_layers(spec: &CircuitSpec, params: &VariationalParams) -> Vec<Vec<[f64; 2]>> {
    let t = params.theta().data();
    (0..spec.num_layers)
        .map(|l| (0..spec.num_qubits).map(|q| [t[(l * spec.num_qubits + q) * 2], t[(l * spec.num_qubits + q) * 2 + 1]]).collect())
        .collect()
}

fn random_params(spec: &CircuitSpec, rng: &mut ChaCha8Rng) -> VariationalParams {
    VariationalParams::new(spec, Tensor::uniform(&spec.theta_shape(), -PI, PI, rng)).unwrap()
}

/// Statevector simulation against the dense 2^Q x 2^Q unitary.
fn quantum_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst: f64 = 0.0;
    for q in 1..=4 {
        for trial in 0..50 {
            let topology = [Topology::Ring, Topology::Line][trial % 2];
            let spec = CircuitSpec::new(q, 1 + trial % 3, topology);
            let params = random_params(&spec, &mut rng);
            let u: Vec<f64> = (0..q).map(|_| rng.gen_range(-PI..PI)).collect();
            let state = qsim::apply_variational(&qsim::angle_encode(&u).unwrap(), &spec, &params).unwrap();
            let unitary = variational_unitary(q, &theta_layers(&spec, &params), &spec.entanglers());
            let expected = matvec(&unitary, &encoded_state(&u));
            for (a, b) in state.amplitudes().iter().zip(&expected) {
                worst = worst.max((a - b).norm());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-10 && secs < 5.0,
        format!("200 circuits, max amplitude error {worst:.2e} < 1e-10, {secs:.2}s < 5s"),
        format!("max amplitude error {worst:.2e} (limit 1e-10), {secs:.2}s (limit 5s)"),
    )
}

/// Parameter shift against central differences, then every parameter
/// group of the d=6, Q=3, L=1 miniature.
fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut shift_err: f64 = 0.0;
    for trial in 0..20 {
        let q = 1 + trial % 6;
        let spec = CircuitSpec::new(q, 1 + trial % 3, [Topology::Ring, Topology::Line][trial % 2]);
        let params = random_params(&spec, &mut rng);
        let u: Vec<f64> = (0..q).map(|_| rng.gen_range(-PI..PI)).collect();
        let w: Vec<f64> = (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, grads) = qsim::quantum_gradients(&u, &spec, &params, &w).unwrap();
        let objective = |u: &[f64], theta: &[f64]| {
            let p = VariationalParams::new(&spec, Tensor::new(spec.theta_shape(), theta.to_vec()).unwrap()).unwrap();
            qsim::expectations(u, &spec, &p).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let theta = params.theta().data().to_vec();
        shift_err = shift_err
            .max(max_abs_diff(&grads.u, &central_diff(&u, 1e-6, |x| objective(x, &theta))))
            .max(max_abs_diff(grads.theta.data(), &central_diff(&theta, 1e-6, |t| objective(&u, t))));
    }

    let cfg = miniature_config(3, 1);
    assert_eq!(cfg.encoder.feature_dim, 6);
    let mut model = HybridModel::new(cfg, 1002).unwrap();
    let mut still = Optimizer::new(AdamConfig {
        learning_rate: 0.0,
        ..AdamConfig::default()
    });
    for k in 0..3 {
        let x = Tensor::uniform(&[4, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(k));
        model.finetune_step(&x, &[0, 1, 0, 1], FreezePolicy::AllUnfrozen, &mut still).unwrap();
    }
    model.set_eval();
    let x = Tensor::uniform(&[4, 8, 8], 0.0, 1.0, &mut rng);
    let labels = [1, 0, 1, 0];
    model.zero_grad();
    model.classification_loss_and_grads(&x, &labels, 0).unwrap();
    let analytic: Vec<(String, Vec<f64>)> =
        model.classification_params_mut().into_iter().map(|(g, p)| (g, p.grad.data().to_vec())).collect();
    let mut groups: BTreeMap<String, f64> = BTreeMap::new();
    for (k, (group, expected)) in analytic.iter().enumerate() {
        let base = model.classification_params_mut()[k].1.value.data().to_vec();
        let mut probe = model.clone();
        let numeric = central_diff(&base, 1e-6, |v| {
            probe.classification_params_mut()[k].1.value.data_mut().copy_from_slice(v);
            probe.classification_loss_and_grads(&x, &labels, 0).unwrap()
        });
        let e = groups.entry(group.clone()).or_insert(0.0);
        *e = e.max(max_rel_diff(expected, &numeric, 1e-4));
    }
    let hybrid_err = groups.values().fold(0.0f64, |a, &b| a.max(b));
    let secs = start.elapsed().as_secs_f64();
    check(
        shift_err < 1e-6 && hybrid_err < 1e-4 && groups.len() >= 9 && secs < 30.0,
        format!(
            "parameter shift max abs error {shift_err:.2e} < 1e-6; {} hybrid groups, max rel error {hybrid_err:.2e} < 1e-4; {secs:.2}s < 30s",
            groups.len()
        ),
        format!("shift {shift_err:.2e}, hybrid {hybrid_err:.2e} over {groups:?}, {secs:.2}s"),
    )
}

/// NT-Xent against the definition, plus the constructed two-pair case.
fn loss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = 2 * rng.gen_range(2..=16);
        let dim = rng.gen_range(2..=32);
        let tau = rng.gen_range(0.05..2.0);
        let rows = random_unit_rows(m, dim, &mut rng);
        let z = EmbeddingBatch::new(Tensor::new(vec![m, dim], rows.concat()).unwrap()).unwrap();
        worst = worst.max((ntxent_loss(&z, tau).unwrap().0 - ntxent_direct(&rows, tau)).abs());
    }
    let z = Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let got = ntxent_loss(&EmbeddingBatch::new(z).unwrap(), 1.0).unwrap().0;
    let e = std::f64::consts::E;
    let constructed = (got + (e / (e + 2.0)).ln()).abs();
    check(
        worst < 1e-10 && constructed < 1e-9,
        format!("100 batches max error {worst:.2e} < 1e-10; two-pair case off by {constructed:.2e} < 1e-9"),
        format!("batch error {worst:.2e}, constructed case error {constructed:.2e}"),
    )
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Table rows from reconstructed confusion matrices, and AUC against the
/// pairwise count.
fn metrics_fidelity() -> Outcome {
    let mut notes = Vec::new();
    for (name, acc, sens, spec) in [("SSL-Quantum", 0.8083, 0.9333, 0.6833), ("ResNet18", 0.6917, 0.7500, 0.6333)] {
        let found: Vec<(u64, u64)> = (0..=60u64)
            .flat_map(|tp| (0..=60u64).map(move |tn| (tp, tn)))
            .filter(|&(tp, tn)| {
                round4((tp + tn) as f64 / 120.0) == acc && round4(tp as f64 / 60.0) == sens && round4(tn as f64 / 60.0) == spec
            })
            .collect();
        let [(tp, tn)] = found[..] else {
            return Err(format!("{name}: {} candidate matrices", found.len()));
        };
        let mut labels = Vec::new();
        let mut preds = Vec::new();
        for (n, l, p) in [(tp, 1u8, 1u8), (60 - tp, 1, 0), (tn, 0, 0), (60 - tn, 0, 1)] {
            labels.extend(std::iter::repeat(l).take(n as usize));
            preds.extend(std::iter::repeat(p).take(n as usize));
        }
        let m = metrics(&confusion(&labels, &preds).unwrap()).unwrap();
        let got = [round4(m.accuracy), round4(m.sensitivity), round4(m.specificity)];
        if got != [acc, sens, spec] {
            return Err(format!("{name}: got {got:?}"));
        }
        notes.push(format!("{name} TP={tp} TN={tn}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let levels = rng.gen_range(2..30);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        worst = worst.max((roc_auc(&labels, &scores).unwrap().0 - auc_brute(&labels, &scores)).abs());
    }
    check(
        worst < 1e-12,
        format!("{}; AUC vs pairwise oracle max error {worst:.1e} < 1e-12", notes.join(", ")),
        format!("AUC error {worst:.2e}"),
    )
}

/// Quantum-off and alpha = 0 give bit-identical logits from shared seeds.
fn nesting_invariant() -> Outcome {
    let mut compared = 0usize;
    for seed in 0..5u64 {
        let base = ModelConfig::default();
        let mut off = HybridModel::new(base.clone(), seed).unwrap();
        off.quantum_enabled = false;
        let mut zero = HybridModel::new(ModelConfig { alpha_init: 0.0, ..base }, seed).unwrap();
        assert!(zero.quantum_enabled);
        let x = Tensor::uniform(&[6, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 100));
        let bits = |t: Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
        let (a, b) = (bits(off.logits(&x).unwrap()), bits(zero.logits(&x).unwrap()));
        if a != b {
            return Err(format!("seed {seed}: logits differ"));
        }
        compared += a.len();
    }
    Ok(format!("{compared} logits over 5 seeds bit-identical"))
}

/// The five-seed matrix on the default synthetic data.
fn directional_check() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let data = Prepared::synthetic(&cfg).unwrap();
    let sizes: Vec<usize> = data.manifest.splits().iter().map(|s| s.len()).collect();
    let out = run_matrix(&cfg, &data, &Silent).unwrap();
    let secs = start.elapsed().as_secs_f64();
    println!("    splits (unlabeled/labeled/validation/test): {sizes:?}, seeds {:?}", cfg.run_seeds);
    println!("    {:<20} {:>8} {:>8} {:>9}  per-seed AUC", "variant", "mean AUC", "sd AUC", "mean acc");
    for s in &out.summary {
        let per: Vec<String> = s.aucs.iter().map(|a| format!("{a:.3}")).collect();
        println!(
            "    {:<20} {:>8.4} {:>8.4} {:>9.4}  {}",
            s.variant.name(),
            s.mean_auc,
            s.std_auc,
            s.mean_accuracy,
            per.join(" ")
        );
    }
    let auc = |v| out.summary_for(v).unwrap().mean_auc;
    let (sq, so, sup) = (auc(Variant::SslQuantum), auc(Variant::SslOnly), auc(Variant::SupervisedOnly));
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let detail = format!(
        "ssl-quantum {sq:.4} vs supervised-only {sup:.4} and ssl-only {so:.4} - 0.02; {secs:.0}s on {cores} core(s), limit 600s"
    );
    check(sq >= sup && sq >= so - 0.02 && secs < 600.0, detail.clone(), detail)
}

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synthetic = SynthConfig {
        count: 96,
        height: 32,
        width: 32,
        patients: 16,
        ..SynthConfig::default()
    };
    cfg.model.encoder.height = 32;
    cfg.model.encoder.width = 32;
    cfg.model.encoder.feature_dim = 16;
    cfg.run_seeds = vec![2, 3];
    cfg.training.pretrain_epochs = 2;
    cfg.training.finetune_epochs = 3;
    cfg.training.pretrain_batch = 16;
    cfg.training.finetune_batch = 4;
    cfg
}

fn dir_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if p.is_dir() {
            out.extend(dir_bytes(&p).into_iter().map(|(k, v)| (format!("{name}/{k}"), v)));
        } else {
            out.insert(name, std::fs::read(&p).unwrap());
        }
    }
    out
}

/// Identical config and seed give byte-identical files; checkpoints
/// roundtrip value-exactly.
fn reproducibility() -> Outcome {
    let cfg = tiny();
    let mut dirs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let data = Prepared::synthetic(&cfg).unwrap();
        save_image_dir(&data.dataset, &dir.path().join("data"), Some(&cfg.hash())).unwrap();
        let out = run_matrix(&cfg, &data, &Silent).unwrap();
        out.write(&dir.path().join("results")).unwrap();
        let pre = pretrain(&cfg, &data.unlabeled().unwrap(), 2, &Silent).unwrap();
        pre.checkpoint.save(&dir.path().join("checkpoint.json")).unwrap();
        emit_reports(&[evaluate("m", &cfg.hash(), &[0, 1, 1], &[0.2, 0.7, 0.4], 0.5).unwrap()], &dir.path().join("eval"))
            .unwrap();
        dirs.push(dir);
    }
    let (a, b) = (dir_bytes(dirs[0].path()), dir_bytes(dirs[1].path()));
    if a != b {
        let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
        return Err(format!("files differ between runs: {differing:?}"));
    }

    let path = dirs[0].path().join("checkpoint.json");
    let ckpt = Checkpoint::load(&path).unwrap();
    let mut model = ckpt.restore().unwrap();
    let again = Checkpoint::capture(&model, ckpt.config.clone(), &ckpt.config_hash, &ckpt.stage, ckpt.step, &ckpt.rng.restore().unwrap());
    let bits = |c: &Checkpoint| -> Vec<u64> { c.parameters.iter().flat_map(|t| t.values.iter().map(|v| v.to_bits())).collect() };
    if again != ckpt || bits(&again) != bits(&ckpt) {
        return Err("checkpoint restore/capture is not value-exact".into());
    }
    let x = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
    let mut original = pretrain(&cfg, &Prepared::synthetic(&cfg).unwrap().unlabeled().unwrap(), 2, &Silent).unwrap().model;
    if original.logits(&x).unwrap() != model.logits(&x).unwrap() {
        return Err("restored model scores differ".into());
    }
    Ok(format!("{} output files byte-identical across two runs; checkpoint roundtrip bit-exact", a.len()))
}

/// Exhaustive patient disjointness and the label-poisoning check.
fn hygiene() -> Outcome {
    let mut manifests = 0;
    let mut samples_checked = 0;
    let default = generate_synthetic(&SynthConfig::default(), 0).unwrap();
    for seed in 0..50u64 {
        let ds = if seed == 0 { default.clone() } else { generate_synthetic(&SynthConfig { count: 200, patients: 20, height: 32, width: 32, ..SynthConfig::default() }, seed).unwrap() };
        let bound = if seed == 0 { 0.2 } else { f64::INFINITY };
        let m = split_by_patient(&ds, SplitRatios::default(), bound, seed).unwrap();
        let patient_of: BTreeMap<&str, &str> = ds.samples.iter().map(|s| (s.id.as_str(), s.patient_id.as_str())).collect();
        let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
        let mut ids = BTreeSet::new();
        for (k, split) in m.splits().into_iter().enumerate() {
            for id in split {
                if !ids.insert(id.as_str()) {
                    return Err(format!("seed {seed}: sample {id} in two splits"));
                }
                let p = patient_of[id.as_str()];
                if *owner.entry(p).or_insert(k) != k {
                    return Err(format!("seed {seed}: patient {p} in two splits"));
                }
                samples_checked += 1;
            }
        }
        if ids.len() != ds.len() {
            return Err(format!("seed {seed}: {} of {} samples assigned", ids.len(), ds.len()));
        }
        manifests += 1;
    }

    let mut cfg = ExperimentConfig::default();
    cfg.training.pretrain_epochs = 2;
    let clean = Prepared::synthetic(&cfg).unwrap();
    let mut poisoned = clean.clone();
    let unlabeled: BTreeSet<&String> = clean.manifest.unlabeled.iter().collect();
    for s in poisoned.dataset.samples.iter_mut().filter(|s| unlabeled.contains(&s.id)) {
        s.label = Some(1 - s.label.unwrap());
    }
    let a = pretrain(&cfg, &clean.unlabeled().unwrap(), 0, &Silent).unwrap().checkpoint.to_json();
    let b = pretrain(&cfg, &poisoned.unlabeled().unwrap(), 0, &Silent).unwrap().checkpoint.to_json();
    check(
        a == b,
        format!(
            "{manifests} manifests, {samples_checked} assignments patient-disjoint; {} poisoned labels leave the pretraining checkpoint bit-unchanged",
            unlabeled.len()
        ),
        "pretraining checkpoint changed under label poisoning".into(),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("quantum oracle equivalence", quantum_oracle),
        ("gradient integrity", gradient_integrity),
        ("loss oracle", loss_oracle),
        ("metrics fidelity", metrics_fidelity),
        ("nesting invariant", nesting_invariant),
        ("desk-scale directional check", directional_check),
        ("reproducibility", reproducibility),
        ("hygiene", hygiene),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} [{name}]: PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} [{name}]: FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
