//! Solve-rate evaluation of the crisp baselines and the learned policy, and
//! the generate, train, evaluate pipeline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crisp::is_stable;
use crate::dprop::{random_assignment, rdprop_solve, RunError};
use crate::generators::{
    build_dataset, load_dataset, Counts, DatasetError, DatasetInstance, DatasetSpec, GeneratorKind,
    Split, Subset,
};
use crate::policy::{
    eval_hidden, ndprop_forward, save_weights, train, ForwardConfig, LabeledProgram, PolicyWeights,
    TrainConfig, TrainError, WeightFileError,
};
use crate::seeding::{derive_seed, rng_from_seed};

pub const CSV_HEADER: &str = "split,mode,solve_rate,mean_decisions,wall_ms,seed";

#[derive(Debug, Clone)]
pub enum EvalMode {
    /// Random singleton decisions with up to `restarts` runs.
    Rdprop { restarts: usize },
    /// One forward pass of the learned policy with `iterations` rounds.
    Ndprop {
        weights: PolicyWeights,
        iterations: usize,
    },
    /// One uniformly random interpretation.
    Random,
}

impl EvalMode {
    pub fn label(&self) -> String {
        match self {
            EvalMode::Rdprop { restarts } => format!("rdprop-{restarts}"),
            EvalMode::Ndprop { .. } => "ndprop".into(),
            EvalMode::Random => "random".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    /// Report measured wall time; otherwise `wall_ms` is written as 0 so
    /// reruns are byte-identical.
    pub timing: bool,
    /// Per-instance wall-clock limit; a solve that takes longer is counted
    /// as a failure.
    pub timeout: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub split: String,
    pub mode: String,
    /// Percentage of instances with a verified stable model.
    pub solve_rate: f64,
    /// Mean decisions per solved instance.
    pub mean_decisions: f64,
    pub wall_ms: u64,
    pub seed: u64,
    pub instances: usize,
    pub solved: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.2},{:.3},{},{}",
                r.split, r.mode, r.solve_rate, r.mean_decisions, r.wall_ms, r.seed
            )
            .expect("write to string");
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:<12} {:>8} {:>10} {:>9} {:>10}\n",
            "split", "mode", "solved%", "decisions", "wall_ms", "instances"
        );
        for r in &self.rows {
            writeln!(
                out,
                "{:<12} {:<12} {:>8.2} {:>10.3} {:>9} {:>10}",
                r.split, r.mode, r.solve_rate, r.mean_decisions, r.wall_ms, r.instances
            )
            .expect("write to string");
        }
        out
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Weights(#[from] WeightFileError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("solver error on instance {index}: {source}")]
    Run { index: usize, source: RunError },
    #[error("instance {index}: claimed model is not stable")]
    Unverified { index: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid suite configuration: {0}")]
    Config(String),
}

impl EvalError {
    /// True for failures that indicate a broken internal invariant rather
    /// than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, EvalError::Unverified { .. } | EvalError::Run { .. })
    }
}

struct InstanceResult {
    solved: bool,
    decisions: usize,
}

fn solve_one(
    mode: &EvalMode,
    inst: &DatasetInstance,
    position: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<InstanceResult, EvalError> {
    let p = &inst.program;
    let start = Instant::now();
    let mut rng = rng_from_seed(derive_seed(seed, &[position as u64]));
    let (model, decisions) = match mode {
        EvalMode::Rdprop { restarts } => {
            let (outcome, stats) =
                rdprop_solve(p, *restarts, &mut rng).map_err(|source| EvalError::Run {
                    index: position,
                    source,
                })?;
            (outcome.model().cloned(), stats.decisions)
        }
        EvalMode::Ndprop {
            weights,
            iterations,
        } => {
            let mut cfg = ForwardConfig::new(*iterations);
            cfg.propagation.eps = crate::fuzzy::DEFAULT_EPS;
            let init = eval_hidden(seed, position, p, weights);
            let out = ndprop_forward(p, weights, &cfg, &init);
            (out.certification.model().cloned(), *iterations)
        }
        EvalMode::Random => (random_assignment(p, &mut rng), 0),
    };
    let Some(model) = model else {
        return Ok(InstanceResult {
            solved: false,
            decisions: 0,
        });
    };
    if !is_stable(p, &model) {
        log::error!(
            "instance {position}: unverified model {}",
            p.format_model(&model)
        );
        return Err(EvalError::Unverified { index: position });
    }
    if opts.timeout.is_some_and(|t| start.elapsed() > t) {
        return Ok(InstanceResult {
            solved: false,
            decisions: 0,
        });
    }
    Ok(InstanceResult {
        solved: true,
        decisions,
    })
}

/// Evaluates `mode` on the given instances and returns one row labelled
/// `split`. Instances run in parallel; results are reduced in input order.
pub fn run_eval(
    mode: &EvalMode,
    instances: &[&DatasetInstance],
    split: &str,
    seed: u64,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let start = Instant::now();
    let results: Vec<Result<InstanceResult, EvalError>> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| solve_one(mode, inst, i, seed, opts))
        .collect();
    let mut solved = 0usize;
    let mut decisions = 0usize;
    for r in results {
        let r = r?;
        if r.solved {
            solved += 1;
            decisions += r.decisions;
        }
    }
    let total = instances.len();
    let row = EvalRow {
        split: split.to_string(),
        mode: mode.label(),
        solve_rate: if total == 0 {
            0.0
        } else {
            100.0 * solved as f64 / total as f64
        },
        mean_decisions: if solved == 0 {
            0.0
        } else {
            decisions as f64 / solved as f64
        },
        wall_ms: if opts.timing {
            start.elapsed().as_millis() as u64
        } else {
            0
        },
        seed,
        instances: total,
        solved,
    };
    Ok(EvalReport { rows: vec![row] })
}

pub fn labeled(instances: &[&DatasetInstance]) -> Vec<LabeledProgram> {
    instances
        .iter()
        .map(|i| LabeledProgram {
            program: i.program.clone(),
            models: i.models.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub seed: u64,
    pub generator: GeneratorKind,
    pub split: Split,
    pub counts: Counts,
    pub oracle_cap: usize,
    pub consistent_test: bool,
    pub restarts: Vec<usize>,
    pub random_baseline: bool,
    pub train: TrainConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            generator: GeneratorKind::n2l_default(),
            split: Split::Easy,
            counts: Counts {
                train: 200,
                val: 50,
                test: 100,
            },
            oracle_cap: crate::crisp::DEFAULT_ATOM_CAP,
            consistent_test: true,
            restarts: vec![1, 10, 100],
            random_baseline: true,
            train: TrainConfig {
                epochs: 50,
                logical_dim: 8,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOutput {
    pub report: EvalReport,
    pub weights: PolicyWeights,
    pub out_dir: PathBuf,
}

fn write(path: PathBuf, contents: &str) -> Result<(), EvalError> {
    fs::write(&path, contents).map_err(|source| EvalError::Io { path, source })
}

/// Generates a dataset, trains a policy, and evaluates every baseline and
/// the policy on the test subset. Writes `config.toml`, `dataset/`,
/// `weights.ndpw`, `train_log.csv`, `report.csv` and `report.txt` under
/// `out_dir`.
pub fn run_experiment_suite(
    cfg: &SuiteConfig,
    out_dir: &Path,
    opts: &EvalOptions,
) -> Result<SuiteOutput, EvalError> {
    if cfg.restarts.contains(&0) {
        return Err(EvalError::Config("restart counts must be positive".into()));
    }
    fs::create_dir_all(out_dir).map_err(|source| EvalError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let resolved = toml::to_string(cfg).map_err(|e| EvalError::Config(e.to_string()))?;
    write(out_dir.join("config.toml"), &resolved)?;

    let data_dir = out_dir.join("dataset");
    let spec = DatasetSpec {
        generator: cfg.generator,
        split: cfg.split,
        counts: cfg.counts,
        seed: cfg.seed,
        oracle_cap: cfg.oracle_cap,
        consistent_test: cfg.consistent_test,
    };
    build_dataset(&spec, &data_dir)?;
    let data = load_dataset(&data_dir)?;
    let train_set = labeled(&data.subset(Subset::Train).collect::<Vec<_>>());
    let val_set = labeled(&data.subset(Subset::Val).collect::<Vec<_>>());
    let test: Vec<&DatasetInstance> = data.subset(Subset::Test).collect();

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = derive_seed(cfg.seed, &[1]);
    let outcome = train(&train_set, &val_set, &train_cfg)?;
    let weights_path = out_dir.join("weights.ndpw");
    save_weights(&outcome.weights, &weights_path)?;
    let mut log_csv = String::from("epoch,mean_loss,val_solve_rate\n");
    for row in &outcome.log {
        let loss = row.mean_loss.map(|l| format!("{l:.6}")).unwrap_or_default();
        writeln!(log_csv, "{},{},{:.4}", row.epoch, loss, row.val_solve_rate)
            .expect("write to string");
    }
    write(out_dir.join("train_log.csv"), &log_csv)?;

    let split = cfg.split.to_string();
    let eval_seed = derive_seed(cfg.seed, &[2]);
    let mut report = EvalReport::default();
    for &k in &cfg.restarts {
        report.extend(run_eval(
            &EvalMode::Rdprop { restarts: k },
            &test,
            &split,
            eval_seed,
            opts,
        )?);
    }
    if cfg.random_baseline {
        report.extend(run_eval(&EvalMode::Random, &test, &split, eval_seed, opts)?);
    }
    let mode = EvalMode::Ndprop {
        weights: outcome.weights.clone(),
        iterations: cfg.train.test_outer_iterations,
    };
    report.extend(run_eval(&mode, &test, &split, eval_seed, opts)?);
    write(out_dir.join("report.csv"), &report.to_csv())?;
    write(out_dir.join("report.txt"), &report.to_table())?;
    Ok(SuiteOutput {
        report,
        weights: outcome.weights,
        out_dir: out_dir.to_path_buf(),
    })
}
