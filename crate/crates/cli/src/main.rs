use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pouf_core::data::{self, Dataset, SyntheticSpec};
use pouf_core::eval::{self, EvalResult};
use pouf_core::gradcheck::{run_gradcheck, Fault, GradcheckConfig};
use pouf_core::model::{effective_prototypes, encode, ModelParams};
use pouf_core::trainer::{train_from, TrainConfig};
use pouf_core::Error;

mod ablate;
mod manifest;

use manifest::Manifest;

/// Unsupervised prototype alignment for zero-shot classifiers.
#[derive(Parser)]
#[command(name = "pouf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic domain-shift benchmark.
    Generate {
        /// Synthetic benchmark spec (JSON). Defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adapt a zero-shot model to an unlabeled dataset.
    Adapt {
        /// Training config (JSON). Defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Start from these parameters instead of the zero-shot model.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Evaluate parameters and export diagnostic tables.
    Eval(EvalArgs),
    /// Run a grid of method variants over several seeds.
    Ablate {
        /// Grid spec (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; not needed when the grid generates its own data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corrupt the analytic gradients (harness self-test).
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Parameter directory; the zero-shot model is used when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Temperature for the zero-shot model when no parameters are given.
    #[arg(long, default_value_t = 0.01)]
    temperature: f64,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, default_value_t = 5)]
    knn: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SignFlip,
}

/// Exit codes: 0 success, 1 check failure, 2 validation error, 3 divergence.
#[derive(Debug)]
enum Failure {
    Check(String),
    Validation(String),
    Diverged(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Diverged(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Validation(m) | Failure::Diverged(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } => Failure::Diverged(e.to_string()),
            other => Failure::Validation(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(config.as_deref(), &out, seed),
        Command::Adapt { config, data, out, seed, params } => {
            cmd_adapt(config.as_deref(), &data, &out, seed, params.as_deref())
        }
        Command::Eval(args) => cmd_eval(&args),
        Command::Ablate { config, data, out } => ablate::cmd_ablate(&config, data.as_deref(), &out),
        Command::Gradcheck { seed, instances, out, inject_fault } => {
            cmd_gradcheck(seed, instances, out.as_deref(), inject_fault)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

/// Reads a JSON document, rejecting unknown keys through the target type.
fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Validation(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Failure::Validation(format!("cannot write {}: {e}", path.display())))
}

fn cmd_generate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CmdResult {
    let start = Instant::now();
    let mut spec: SyntheticSpec = match config {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let dataset: Dataset = data::generate_synthetic(&spec)?.into();
    create_dir(out)?;
    let artifacts = data::write_dataset(out, &dataset)?;
    Manifest::new("generate", spec.seed, &spec)
        .inputs(config.into_iter().map(Path::to_path_buf))
        .artifacts(artifacts)
        .write(out, start)?;
    println!("wrote {} samples, {} classes, dim {} to {}", spec.samples, spec.classes, spec.dim, out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    Ok(data::read_dataset(dir)?)
}

fn cmd_adapt(
    config: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    seed: Option<u64>,
    params_dir: Option<&Path>,
) -> CmdResult {
    let start = Instant::now();
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dataset = load_dataset(data_dir)?;
    let initial = match params_dir {
        Some(p) => data::read_params(p)?,
        None => ModelParams::init(dataset.features.cols(), dataset.classes(), cfg.temperature_init)?,
    };
    initial.check_compatible(&dataset.features, &dataset.prototypes)?;
    let labels = dataset.class_labels();
    if labels.is_none() {
        eprintln!("warning: no complete label file in {}; accuracy will not be reported", data_dir.display());
    }

    create_dir(out)?;
    let result = train_from(initial, &dataset.features, &dataset.prototypes, &cfg, labels.as_deref());
    let (params, report) = match result {
        Ok(r) => r,
        Err(Error::Diverged { iteration, batch_ids }) => {
            let path = out.join("diagnostics.json");
            write_json(&path, &serde_json::json!({ "iteration": iteration, "batch_ids": batch_ids }))?;
            return Err(Failure::Diverged(format!(
                "loss became non-finite at iteration {iteration}; diagnostics in {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };

    let mut artifacts = data::write_params(out.join("params"), &params)?;
    let report_path = out.join("report.jsonl");
    let mut lines = String::new();
    for r in &report.records {
        lines.push_str(&serde_json::to_string(r).expect("serializable"));
        lines.push('\n');
    }
    std::fs::write(&report_path, lines)
        .map_err(|e| Failure::Validation(format!("cannot write {}: {e}", report_path.display())))?;
    artifacts.push(report_path);
    let summary_path = out.join("summary.json");
    write_json(
        &summary_path,
        &serde_json::json!({
            "method": report.method,
            "accuracy_before": report.initial_accuracy,
            "accuracy_after": report.final_accuracy,
            "selected_iteration": report.selected_iteration,
            "final_prior": report.final_prior,
            "final_temperature": params.temperature(),
            "short_classes": report.short_classes,
        }),
    )?;
    artifacts.push(summary_path);

    let mut inputs = vec![data_dir.to_path_buf()];
    inputs.extend(config.map(Path::to_path_buf));
    inputs.extend(params_dir.map(Path::to_path_buf));
    Manifest::new("adapt", cfg.seed, &cfg).inputs(inputs).artifacts(artifacts).write(out, start)?;

    let fmt = |a: Option<f64>| a.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let last = report.records.last();
    println!(
        "iterations={} accuracy_before={} accuracy_after={} final_loss={}",
        report.records.len(),
        fmt(report.initial_accuracy),
        fmt(report.final_accuracy),
        last.map_or("n/a".to_string(), |r| format!("{:.6}", r.loss_total)),
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CmdResult {
    let start = Instant::now();
    let dataset = load_dataset(&args.data)?;
    let params = match &args.params {
        Some(p) => data::read_params(p)?,
        None => ModelParams::init(dataset.features.cols(), dataset.classes(), args.temperature)?,
    };
    params.check_compatible(&dataset.features, &dataset.prototypes)?;
    create_dir(&args.out)?;
    let mut artifacts = Vec::new();

    let features = encode(&dataset.features, &params)?;
    let prototypes = effective_prototypes(&dataset.prototypes, &params)?;

    match dataset.class_labels() {
        Some(labels) => {
            let result: EvalResult = eval::evaluate_model(&dataset.features, &dataset.prototypes, &params, &labels)?;
            let path = args.out.join("metrics.json");
            eval::write_metrics_json(&path, &result)?;
            artifacts.push(path);
            let hist = eval::cosine_histogram(&features, &prototypes, &labels, args.bins)?;
            let path = args.out.join("histogram.csv");
            hist.write_csv(&path)?;
            artifacts.push(path);
            println!(
                "accuracy={:.4} mean_correct_cosine={:.4}",
                result.accuracy,
                result.mean_correct_cosine.unwrap_or(f64::NAN)
            );
        }
        None => eprintln!("warning: no complete label file in {}; metrics and histogram omitted", args.data.display()),
    }

    let k = args.knn.min(dataset.features.rows());
    let knn = eval::knn_of_prototypes(&features, &prototypes, k)?;
    let path = args.out.join("knn.csv");
    knn.write_csv(&path, None)?;
    artifacts.push(path);

    let coords = eval::pca_2d(features.matrix())?;
    let path = args.out.join("pca.csv");
    eval::write_pca_csv(&path, &coords, dataset.labels.as_deref())?;
    artifacts.push(path);

    let mut inputs = vec![args.data.clone()];
    inputs.extend(args.params.clone());
    let snapshot = serde_json::json!({
        "temperature": args.temperature,
        "bins": args.bins,
        "knn": args.knn,
        "params": args.params,
    });
    Manifest::new("eval", 0, &snapshot).inputs(inputs).artifacts(artifacts).write(&args.out, start)?;
    Ok(())
}

fn cmd_gradcheck(seed: u64, instances: usize, out: Option<&Path>, fault: Option<FaultArg>) -> CmdResult {
    let start = Instant::now();
    let cfg = GradcheckConfig {
        seed,
        instances,
        fault: fault.map(|f| match f {
            FaultArg::SignFlip => Fault::FlipSign,
        }),
        ..Default::default()
    };
    let report = run_gradcheck(&cfg)?;
    for o in &report.outcomes {
        println!(
            "{:<20} instances={} worst_rel_error={:.3e} {}",
            o.pipeline,
            o.instances,
            o.worst_error,
            if o.passed { "ok" } else { "FAIL" }
        );
    }
    println!("worst_rel_error={:.3e} tolerance={:.0e}", report.worst_error, cfg.tolerance);
    if let Some(out) = out {
        create_dir(out)?;
        let path = out.join("gradcheck.json");
        write_json(&path, &report)?;
        let snapshot = serde_json::json!({
            "seed": seed,
            "instances": instances,
            "step": cfg.step,
            "tolerance": cfg.tolerance,
        });
        Manifest::new("gradcheck", seed, &snapshot).artifacts(vec![path]).write(out, start)?;
    }
    if report.passed {
        Ok(())
    } else {
        let failing: Vec<&str> = report.outcomes.iter().filter(|o| !o.passed).map(|o| o.pipeline).collect();
        Err(Failure::Check(format!("gradient check failed for: {}", failing.join(", "))))
    }
}
