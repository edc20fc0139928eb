//! Command-line driver: data generation, training stages, evaluation,
//! gradient checks and checkpoint inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use hyqal::data::{save_image_dir, write_json, DataError};
use hyqal::gradcheck;
use hyqal::hybrid::Checkpoint;
use hyqal::pipeline::{
    apply_override, evaluate_model, pretrain, run_matrix, run_variant, ExperimentConfig, PipelineError,
    PretrainOutput, Prepared, Progress, Variant, SPLIT_FILE,
};
use hyqal::seed;

const THREADS_ENV: &str = "HYQAL_THREADS";

#[derive(Parser)]
#[command(name = "hyqal", version, about = "Contrastive pretraining with simulated quantum feature fusion")]
struct Cli {
    /// Worker threads (falls back to HYQAL_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set training.pretrain_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed; must agree with the config file if that sets one.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct DataArg {
    /// PGM directory; the synthetic dataset is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as PGM files plus index and split.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pretraining on the unlabeled split.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised fine-tuning of the variant chosen by the ablation flags.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArg,
        /// Pretraining checkpoint; required when ablation.ssl is on.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-split reports for a checkpoint.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model name used in the reports.
        #[arg(long, default_value = "model")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every configured variant over every run seed.
    RunMatrix {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        qubits: usize,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random circuits in the parameter-shift check.
        #[arg(long, default_value_t = 20)]
        circuits: usize,
    },
    /// Print a checkpoint summary as JSON.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Pipeline(PipelineError),
    /// Gradient check over tolerance.
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Pipeline(e) => e.exit_code() as u8,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
            CliError::Pipeline(e) => write!(f, "{e}"),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Pipeline(e.into())
    }
}

/// Progress as one JSON object per stderr line, with elapsed seconds.
struct StderrProgress {
    start: Instant,
    hash: String,
}

impl Progress for StderrProgress {
    fn event(&self, mut event: Value) {
        if let Value::Object(map) = &mut event {
            map.insert("config_hash".into(), json!(self.hash));
            map.insert("elapsed_s".into(), json!((self.start.elapsed().as_secs_f64() * 1e3).round() / 1e3));
        }
        eprintln!("{event}");
    }
}

fn read_config_value(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    // Accept the `{config_hash, config}` snapshots this tool writes.
    match value {
        Value::Object(ref m) if m.len() == 2 && m.contains_key("config_hash") && m.contains_key("config") => {
            Ok(m["config"].clone())
        }
        other => Ok(other),
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let mut value = match &args.config {
        Some(p) => read_config_value(p)?,
        None => json!({}),
    };
    if !value.is_object() {
        return Err(CliError::Usage("config must be a JSON object".into()));
    }
    for s in &args.set {
        apply_override(&mut value, s)?;
    }
    if let Some(seed) = args.seed {
        match value.get("seed") {
            Some(existing) if existing != &json!(seed) => {
                return Err(CliError::Usage(format!(
                    "--seed {seed} conflicts with config seed {existing}; remove one"
                )))
            }
            _ => {
                value["seed"] = json!(seed);
            }
        }
    }
    Ok(ExperimentConfig::from_value(value)?)
}

fn load_data(cfg: &ExperimentConfig, data: &DataArg) -> Result<Prepared, CliError> {
    let prepared = match &data.data {
        Some(dir) => Prepared::load(cfg, dir)?,
        None => Prepared::synthetic(cfg)?,
    };
    let e = &cfg.model.encoder;
    if (prepared.dataset.height, prepared.dataset.width) != (e.height, e.width) {
        return Err(PipelineError::Data(DataError::Config(format!(
            "images are {}x{} but the encoder expects {}x{}",
            prepared.dataset.height, prepared.dataset.width, e.height, e.width
        )))
        .into());
    }
    Ok(prepared)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| {
        PipelineError::Data(DataError::Io {
            path: dir.display().to_string(),
            source,
        })
        .into()
    })
}

fn write_config_snapshot(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    write_json(&dir.join("config.json"), &json!({"config_hash": cfg.hash(), "config": cfg.to_value()}))?;
    Ok(())
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CliError> {
    ckpt.save(path).map_err(|e| PipelineError::Model(e).into())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| PipelineError::Model(e).into())
}

fn done(command: &str, hash: Option<&str>, out: Option<&Path>) {
    println!("{}", json!({"command": command, "config_hash": hash, "out": out.map(|p| p.display().to_string())}));
}

fn gen_data(args: &ConfigArgs, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let mut prepared = Prepared::synthetic(&cfg)?;
    let hash = cfg.hash();
    prepared.dataset.strip_labels(&prepared.manifest.unlabeled);
    create_dir(out)?;
    save_image_dir(&prepared.dataset, out, Some(&hash))?;
    let mut split = serde_json::to_value(&prepared.manifest).expect("manifest serializes");
    split["config_hash"] = json!(hash);
    write_json(&out.join(SPLIT_FILE), &split)?;
    write_config_snapshot(&cfg, out)?;
    done("gen-data", Some(&hash), Some(out));
    Ok(())
}

fn pretrain_cmd(args: &ConfigArgs, data: &DataArg, out: &Path, progress: &mut StderrProgress) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    progress.hash = cfg.hash();
    let prepared = load_data(&cfg, data)?;
    let result = pretrain(&cfg, &prepared.unlabeled()?, cfg.seed, progress)?;
    create_dir(out)?;
    save_checkpoint(&result.checkpoint, &out.join("checkpoint.json"))?;
    write_json(
        &out.join("pretrain.json"),
        &json!({"config_hash": cfg.hash(), "seed": cfg.seed, "steps": result.steps, "losses": result.losses}),
    )?;
    write_config_snapshot(&cfg, out)?;
    done("pretrain", Some(&cfg.hash()), Some(out));
    Ok(())
}

fn finetune_cmd(
    args: &ConfigArgs,
    data: &DataArg,
    checkpoint: Option<&Path>,
    out: &Path,
    progress: &mut StderrProgress,
) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    progress.hash = cfg.hash();
    let variant = Variant::from_flags(cfg.ablation.ssl, cfg.ablation.quantum);
    let pretrained = match (variant.uses_ssl(), checkpoint) {
        (true, None) => {
            return Err(CliError::Usage(
                "ablation.ssl is on: pass --checkpoint from `pretrain`, or set ablation.ssl=false".into(),
            ))
        }
        (true, Some(path)) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.model != cfg.model {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
            Some(PretrainOutput {
                model: ckpt.restore().map_err(PipelineError::Model)?,
                losses: Vec::new(),
                steps: ckpt.step,
                checkpoint: ckpt,
            })
        }
        (false, _) => None,
    };
    let prepared = load_data(&cfg, data)?;
    let (record, model) = run_variant(&cfg, &prepared, variant, cfg.seed, pretrained.as_ref(), progress)?;
    create_dir(out)?;
    let rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[seed::tag("finetune-checkpoint")]));
    let steps = record.finetune.epochs.len() as u64;
    save_checkpoint(
        &Checkpoint::capture(&model, cfg.to_value(), &cfg.hash(), "finetune", steps, &rng),
        &out.join("checkpoint.json"),
    )?;
    write_json(&out.join("run.json"), &record)?;
    hyqal::eval::emit_reports(std::slice::from_ref(&record.report), out).map_err(PipelineError::Eval)?;
    write_config_snapshot(&cfg, out)?;
    done("finetune", Some(&cfg.hash()), Some(out));
    Ok(())
}

fn evaluate_cmd(args: &ConfigArgs, data: &DataArg, checkpoint: &Path, name: &str, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.model != cfg.model {
        return Err(CliError::Usage(format!(
            "checkpoint {} was trained with a different model config",
            checkpoint.display()
        )));
    }
    let mut model = ckpt.restore().map_err(PipelineError::Model)?;
    let prepared = load_data(&cfg, data)?;
    let (x, y) = prepared.test()?;
    let report = evaluate_model(&cfg, &mut model, name, &x, &y)?;
    create_dir(out)?;
    hyqal::eval::emit_reports(&[report], out).map_err(PipelineError::Eval)?;
    write_config_snapshot(&cfg, out)?;
    done("evaluate", Some(&cfg.hash()), Some(out));
    Ok(())
}

fn run_matrix_cmd(args: &ConfigArgs, data: &DataArg, out: &Path, progress: &mut StderrProgress) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    progress.hash = cfg.hash();
    let prepared = load_data(&cfg, data)?;
    let result = run_matrix(&cfg, &prepared, progress)?;
    create_dir(out)?;
    result.write(out)?;
    write_config_snapshot(&cfg, out)?;
    for s in &result.summary {
        eprintln!(
            "{:<20} mean AUC {:.4} (sd {:.4})  mean accuracy {:.4}",
            s.variant.name(),
            s.mean_auc,
            s.std_auc,
            s.mean_accuracy
        );
    }
    done("run-matrix", Some(&cfg.hash()), Some(out));
    Ok(())
}

fn gradcheck_cmd(qubits: usize, layers: usize, seed: u64, circuits: usize) -> Result<(), CliError> {
    if qubits == 0 || layers == 0 {
        return Err(CliError::Usage("--qubits and --layers must be at least 1".into()));
    }
    let quantum = gradcheck::quantum(circuits, qubits, seed).map_err(PipelineError::Model)?;
    let hybrid = gradcheck::hybrid(qubits, layers, seed).map_err(PipelineError::Model)?;
    for r in quantum.iter().map(|r| ("parameter-shift", r)).chain(hybrid.iter().map(|r| ("hybrid", r))) {
        println!("{}", json!({"check": r.0, "name": r.1.name, "error": r.1.error, "tolerance": r.1.tolerance, "passed": r.1.passed}));
    }
    let max_abs = quantum.iter().map(|r| r.error).fold(0.0, f64::max);
    let max_rel = hybrid.iter().map(|r| r.error).fold(0.0, f64::max);
    println!("max parameter-shift absolute error: {max_abs:.3e}");
    println!("max relative gradient error: {max_rel:.3e}");
    if quantum.iter().chain(&hybrid).all(|r| r.passed) {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed (relative {max_rel:.3e}, tolerance {:.0e}; absolute {max_abs:.3e}, tolerance {:.0e})",
            gradcheck::HYBRID_TOLERANCE,
            gradcheck::QUANTUM_TOLERANCE
        )))
    }
}

fn inspect(path: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(path)?;
    let tensors: Vec<Value> = ckpt
        .parameters
        .iter()
        .map(|t| {
            let norm = t.values.iter().map(|v| v * v).sum::<f64>().sqrt();
            json!({"name": t.name, "shape": t.shape, "l2_norm": norm})
        })
        .collect();
    let count: usize = ckpt.parameters.iter().map(|t| t.values.len()).sum();
    let summary = json!({
        "format_version": ckpt.format_version,
        "config_hash": ckpt.config_hash,
        "stage": ckpt.stage,
        "step": ckpt.step,
        "quantum_enabled": ckpt.quantum_enabled,
        "stored_values": count,
        "tensors": tensors,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(CliError::Usage("thread count must be at least 1".into()));
    }
    Ok(n)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))?;
    }
    let mut progress = StderrProgress {
        start: Instant::now(),
        hash: String::new(),
    };
    match &cli.command {
        Command::GenData { cfg, out } => gen_data(cfg, out),
        Command::Pretrain { cfg, data, out } => pretrain_cmd(cfg, data, out, &mut progress),
        Command::Finetune {
            cfg,
            data,
            checkpoint,
            out,
        } => finetune_cmd(cfg, data, checkpoint.as_deref(), out, &mut progress),
        Command::Evaluate {
            cfg,
            data,
            checkpoint,
            name,
            out,
        } => evaluate_cmd(cfg, data, checkpoint, name, out),
        Command::RunMatrix { cfg, data, out } => run_matrix_cmd(cfg, data, out, &mut progress),
        Command::Gradcheck {
            qubits,
            layers,
            seed,
            circuits,
        } => gradcheck_cmd(*qubits, *layers, *seed, *circuits),
        Command::InspectCheckpoint { path } => inspect(path),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
