//! Variant × seed grids, summarized in the usual ablation-table layout.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pouf_core::data::{self, Dataset, SyntheticSpec};
use pouf_core::eval::evaluate_model;
use pouf_core::losses::CostKind;
use pouf_core::trainer::{train, TrainConfig, TransportKind};
use pouf_core::Error;

use crate::manifest::Manifest;
use crate::{create_dir, read_json, CmdResult, Failure};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ct")]
    Ct,
    #[serde(rename = "ot-exact")]
    OtExact,
    #[serde(rename = "ot-sinkhorn")]
    OtSinkhorn,
    #[serde(rename = "no-transport")]
    NoTransport,
    #[serde(rename = "no-mi")]
    NoMi,
    #[serde(rename = "cost=exp-neg-dot")]
    ExpNegDotCost,
    #[serde(rename = "default")]
    Default,
}

impl Variant {
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Default => {}
            Variant::Ct => cfg.transport_kind = TransportKind::Ct,
            Variant::OtExact => cfg.transport_kind = TransportKind::OtExact,
            Variant::OtSinkhorn => cfg.transport_kind = TransportKind::OtSinkhorn,
            Variant::NoTransport => cfg.transport_kind = TransportKind::None,
            Variant::NoMi => cfg.lambda_mi = 0.0,
            Variant::ExpNegDotCost => cfg.cost_kind = CostKind::ExpNegDot,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("serializable");
        f.write_str(s.as_str().expect("string variant"))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default)]
    pub base: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// When present, each seed gets its own generated dataset (spec seed =
    /// run seed) and `--data` is not used.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Debug)]
struct RunRow {
    variant: Variant,
    seed: u64,
    outcome: Result<RunMetrics, String>,
    diverged: bool,
}

#[derive(Clone, Debug)]
struct RunMetrics {
    zero_shot: f64,
    accuracy: f64,
    mean_correct_cosine: f64,
}

fn thread_count() -> Result<Option<usize>, Failure> {
    match std::env::var("POUF_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::Validation(format!("POUF_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn run_one(variant: Variant, seed: u64, base: &TrainConfig, data: &Dataset) -> RunRow {
    let mut cfg = variant.apply(base);
    cfg.seed = seed;
    let result = (|| -> Result<RunMetrics, Error> {
        let labels =
            data.class_labels().ok_or_else(|| Error::Invalid("ablation needs a complete label file".into()))?;
        let init = pouf_core::model::ModelParams::init(data.features.cols(), data.classes(), cfg.temperature_init)?;
        let before = evaluate_model(&data.features, &data.prototypes, &init, &labels)?;
        let (params, _) = train(&data.features, &data.prototypes, &cfg, None)?;
        let after = evaluate_model(&data.features, &data.prototypes, &params, &labels)?;
        Ok(RunMetrics {
            zero_shot: before.accuracy,
            accuracy: after.accuracy,
            mean_correct_cosine: after.mean_correct_cosine.unwrap_or(f64::NAN),
        })
    })();
    let diverged = matches!(result, Err(Error::Diverged { .. }));
    RunRow { variant, seed, outcome: result.map_err(|e| e.to_string()), diverged }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_ablate(config: &Path, data_dir: Option<&Path>, out: &Path) -> CmdResult {
    let start = Instant::now();
    let grid: Grid = read_json(config)?;
    if grid.variants.is_empty() || grid.seeds.is_empty() {
        return Err(Failure::Validation("grid needs at least one variant and one seed".into()));
    }
    grid.base.validate()?;
    for v in &grid.variants {
        v.apply(&grid.base).validate()?;
    }

    let datasets: Vec<Dataset> = match (&grid.synthetic, data_dir) {
        (Some(spec), _) => grid
            .seeds
            .iter()
            .map(|&s| Ok(data::generate_synthetic(&SyntheticSpec { seed: s, ..spec.clone() })?.into()))
            .collect::<Result<_, Error>>()?,
        (None, Some(dir)) => vec![data::read_dataset(dir)?],
        (None, None) => {
            return Err(Failure::Validation("either --data or a `synthetic` grid entry is required".into()));
        }
    };
    let data_for = |i: usize| if datasets.len() == 1 { &datasets[0] } else { &datasets[i] };

    let jobs: Vec<(Variant, usize)> =
        grid.variants.iter().flat_map(|&v| (0..grid.seeds.len()).map(move |i| (v, i))).collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Failure::Validation(format!("thread pool: {e}")))?;
    let mut rows: Vec<RunRow> =
        pool.install(|| jobs.par_iter().map(|&(v, i)| run_one(v, grid.seeds[i], &grid.base, data_for(i))).collect());
    rows.sort_by_key(|r| (r.variant, r.seed));

    create_dir(out)?;
    let runs_path = out.join("runs.csv");
    let summary_path = out.join("summary.csv");
    let table_path = out.join("table.csv");
    write_outputs(&rows, &grid, data_dir, &runs_path, &summary_path, &table_path)?;

    let mut inputs = vec![config.to_path_buf()];
    inputs.extend(data_dir.map(Path::to_path_buf));
    let seed = grid.seeds[0];
    Manifest::new("ablate", seed, &grid)
        .inputs(inputs)
        .artifacts(vec![runs_path, summary_path, table_path.clone()])
        .write(out, start)?;

    let table = std::fs::read_to_string(&table_path).unwrap_or_default();
    print!("{table}");

    let failed: Vec<&RunRow> = rows.iter().filter(|r| r.outcome.is_err()).collect();
    if failed.is_empty() {
        return Ok(());
    }
    for r in &failed {
        eprintln!("run {} seed {} failed: {}", r.variant, r.seed, r.outcome.as_ref().unwrap_err());
    }
    let msg = format!("{} of {} runs failed", failed.len(), rows.len());
    if failed.iter().any(|r| r.diverged) {
        Err(Failure::Diverged(msg))
    } else {
        Err(Failure::Validation(msg))
    }
}

fn write_outputs(
    rows: &[RunRow],
    grid: &Grid,
    data_dir: Option<&Path>,
    runs_path: &Path,
    summary_path: &Path,
    table_path: &Path,
) -> Result<(), Failure> {
    let csv_err = |e: csv::Error| Failure::Validation(e.to_string());
    let mut w = csv::Writer::from_path(runs_path).map_err(csv_err)?;
    w.write_record(["variant", "seed", "zero_shot_accuracy", "accuracy", "mean_correct_cosine", "status"])
        .map_err(csv_err)?;
    for r in rows {
        let rec = match &r.outcome {
            Ok(m) => [
                r.variant.to_string(),
                r.seed.to_string(),
                m.zero_shot.to_string(),
                m.accuracy.to_string(),
                m.mean_correct_cosine.to_string(),
                "ok".to_string(),
            ],
            Err(e) => {
                [r.variant.to_string(), r.seed.to_string(), String::new(), String::new(), String::new(), e.clone()]
            }
        };
        w.write_record(rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Failure::Validation(e.to_string()))?;

    let mut variants = grid.variants.clone();
    variants.sort();
    variants.dedup();
    let mut summary = csv::Writer::from_path(summary_path).map_err(csv_err)?;
    summary.write_record(["variant", "mean", "std", "runs", "failed"]).map_err(csv_err)?;
    let mut cells = Vec::new();
    for v in &variants {
        let accs: Vec<f64> = rows
            .iter()
            .filter(|r| r.variant == *v)
            .filter_map(|r| r.outcome.as_ref().ok().map(|m| m.accuracy))
            .collect();
        let failed = rows.iter().filter(|r| r.variant == *v && r.outcome.is_err()).count();
        if accs.is_empty() {
            summary
                .write_record([v.to_string(), String::new(), String::new(), "0".into(), failed.to_string()])
                .map_err(csv_err)?;
            cells.push("failed".to_string());
            continue;
        }
        let (mean, std) = mean_std(&accs);
        summary
            .write_record([
                v.to_string(),
                mean.to_string(),
                std.to_string(),
                accs.len().to_string(),
                failed.to_string(),
            ])
            .map_err(csv_err)?;
        cells.push(format!("{:.1}({:.1})", 100.0 * mean, 100.0 * std));
    }
    summary.flush().map_err(|e| Failure::Validation(e.to_string()))?;

    let dataset_name = match (grid.synthetic.is_some(), data_dir) {
        (true, _) => "synthetic".to_string(),
        (false, Some(d)) => d.file_name().map_or("data".into(), |n| n.to_string_lossy().into_owned()),
        (false, None) => "data".into(),
    };
    let mut table = csv::Writer::from_path(table_path).map_err(csv_err)?;
    let mut header = vec!["dataset".to_string()];
    header.extend(variants.iter().map(Variant::to_string));
    table.write_record(&header).map_err(csv_err)?;
    let mut row = vec![dataset_name];
    row.extend(cells);
    table.write_record(&row).map_err(csv_err)?;
    table.flush().map_err(|e| Failure::Validation(e.to_string()))?;
    Ok(())
}
