use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ndprop_core::crisp::{enumerate_stable_models, DEFAULT_ATOM_CAP};
use ndprop_core::dprop::{dprop_run, guided_policy, rdprop_solve};
use ndprop_core::eval::{
    labeled, run_eval, run_experiment_suite, EvalError, EvalMode, EvalOptions, EvalReport,
    SuiteConfig,
};
use ndprop_core::fuzzy::{
    certify, Certification, CertifyConfig, PropagationConfig, DEFAULT_BINARY_TOL, DEFAULT_EPS,
};
use ndprop_core::generators::{
    build_dataset, load_dataset, Counts, DatasetSpec, GeneratorKind, Split, Subset,
};
use ndprop_core::policy::{
    eval_hidden, forward_grad_check, init_weights, load_weights, save_weights, train, LossMode,
    TrainConfig, TrainError,
};
use ndprop_core::program::{format_report, validate};
use ndprop_core::seeding::{derive_seed, rng_from_seed};
use ndprop_core::{parse_program, GroundProgram, TNormKind};

/// Exit status for failures that indicate a broken internal invariant.
const EXIT_INTERNAL: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ndprop",
    version,
    about = "Stable models by decision-propagation, crisp and neural"
)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Random,
    Guided,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GeneratorArg {
    N2l,
    #[value(name = "3lp")]
    ThreeLp,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Find one stable model with decision-propagation.
    Solve {
        #[arg(long)]
        program: PathBuf,
        #[arg(long, value_enum, default_value_t = PolicyArg::Random)]
        policy: PolicyArg,
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        /// Iteration budget per run (defaults to the atom count).
        #[arg(long)]
        max_iters: Option<usize>,
        /// Model to steer toward with the guided policy, as space separated
        /// atom names. Defaults to the first enumerated stable model.
        #[arg(long)]
        target: Option<String>,
    },
    /// List every stable model by exhaustive search.
    Enumerate {
        #[arg(long)]
        program: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ATOM_CAP)]
        cap: usize,
    },
    /// Certify a fuzzy state as a stable model.
    Check {
        #[arg(long)]
        program: PathBuf,
        /// Comma separated true degrees in atom order.
        #[arg(long)]
        tau: String,
        /// Comma separated false degrees in atom order.
        #[arg(long)]
        phi: String,
        #[arg(long, default_value = "godel")]
        tnorm: TNormKind,
        #[arg(long, default_value_t = DEFAULT_BINARY_TOL)]
        binary_tol: f64,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long)]
        max_inner: Option<usize>,
    },
    /// Parse a program and report structural problems.
    Validate {
        #[arg(long)]
        program: PathBuf,
    },
    /// Build a labeled dataset directory.
    Generate {
        #[arg(long, value_enum, default_value_t = GeneratorArg::N2l)]
        generator: GeneratorArg,
        #[arg(long, default_value = "easy")]
        split: Split,
        #[arg(long, default_value_t = 1000)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        val: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        #[arg(long, default_value_t = ndprop_core::generators::DEFAULT_C1)]
        c1: f64,
        #[arg(long, default_value_t = ndprop_core::generators::DEFAULT_C2)]
        c2: f64,
        /// Rules per atom for 3-LP.
        #[arg(long, default_value_t = ndprop_core::generators::DEFAULT_RULE_RATIO)]
        rule_ratio: f64,
        #[arg(long, default_value_t = DEFAULT_ATOM_CAP)]
        oracle_cap: usize,
        /// Keep test instances without stable models.
        #[arg(long)]
        allow_inconsistent_test: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a decision policy on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1000)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        #[arg(long, default_value_t = 32)]
        logical: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value = "godel")]
        tnorm: TNormKind,
        /// Decision rounds during training.
        #[arg(long, default_value_t = 10)]
        iters: usize,
        /// Decision rounds for validation.
        #[arg(long, default_value_t = 50)]
        test_iters: usize,
        /// Propagation sweeps per round during training.
        #[arg(long, default_value_t = 10)]
        inner_sweeps: usize,
        #[arg(long, value_enum, default_value_t = LossArg::Best)]
        loss: LossArg,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch log as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Solve rates of the baselines and, given weights, the learned policy.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Decision rounds for the learned policy.
        #[arg(long, default_value_t = 50)]
        iters: usize,
        /// Restart budgets for the random-decision baseline.
        #[arg(long, value_delimiter = ',')]
        restarts: Vec<usize>,
        /// Include the random-assignment baseline.
        #[arg(long)]
        random: bool,
        #[arg(long, value_enum, default_value_t = SubsetArg::Test)]
        subset: SubsetArg,
        /// Write the CSV report here instead of standard output.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Record wall time in the report.
        #[arg(long)]
        timing: bool,
        /// Per-instance wall-clock limit in milliseconds.
        #[arg(long)]
        timeout_ms: Option<u64>,
    },
    /// Compare tape gradients of the unrolled forward pass with finite
    /// differences on random programs.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        programs: usize,
        #[arg(long, default_value_t = 8)]
        max_atoms: usize,
        #[arg(long, default_value = "product")]
        tnorm: TNormKind,
        #[arg(long, default_value_t = 4)]
        hidden: usize,
        #[arg(long, default_value_t = 2)]
        logical: usize,
        #[arg(long, default_value_t = 3)]
        iters: usize,
        #[arg(long, default_value_t = 4)]
        inner_sweeps: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        /// Exit with status 2 when the error exceeds this.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Generate, train and evaluate from one TOML configuration.
    Suite {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long)]
        timing: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Best,
    Mean,
    Min,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SubsetArg {
    Train,
    Val,
    Test,
}

impl From<SubsetArg> for Subset {
    fn from(s: SubsetArg) -> Self {
        match s {
            SubsetArg::Train => Subset::Train,
            SubsetArg::Val => Subset::Val,
            SubsetArg::Test => Subset::Test,
        }
    }
}

/// An error that maps to the internal-failure exit status.
#[derive(Debug)]
struct Internal(String);

impl std::fmt::Display for Internal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Internal {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Internal>().is_some() {
                ExitCode::from(EXIT_INTERNAL)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn read_program(path: &Path) -> Result<GroundProgram> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (p, report) =
        parse_program(&text).with_context(|| format!("parsing {}", path.display()))?;
    if report.dropped_inconsistent > 0 {
        log::warn!(
            "dropped {} rules with contradictory bodies",
            report.dropped_inconsistent
        );
    }
    Ok(p)
}

fn parse_degrees(text: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = if text.trim().is_empty() {
        Vec::new()
    } else {
        text.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .with_context(|| format!("bad {what} value `{s}`"))
            })
            .collect::<Result<_>>()?
    };
    if values.len() != n {
        bail!("{what} has {} values, program has {n} atoms", values.len());
    }
    if let Some(x) = values.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        bail!("{what} value {x} outside [0, 1]");
    }
    Ok(values)
}

fn internal(e: EvalError) -> anyhow::Error {
    if e.is_internal() {
        Internal(e.to_string()).into()
    } else {
        e.into()
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Solve {
            program,
            policy,
            restarts,
            max_iters,
            target,
        } => {
            let p = read_program(&program)?;
            if restarts == 0 {
                bail!("--restarts must be at least 1");
            }
            let start = Instant::now();
            let mut rng = rng_from_seed(seed);
            let (model, runs, decisions) = match policy {
                PolicyArg::Random if max_iters.is_none() => {
                    let (outcome, stats) = rdprop_solve(&p, restarts, &mut rng)?;
                    (outcome.model().cloned(), stats.runs, stats.decisions)
                }
                PolicyArg::Random => {
                    let budget = max_iters.expect("checked above");
                    let mut pol = ndprop_core::dprop::random_policy(true);
                    let (mut runs, mut decisions, mut model) = (0, 0, None);
                    for _ in 0..restarts {
                        let mut attempt = rng_from_seed(rand::RngCore::next_u64(&mut rng));
                        runs += 1;
                        match dprop_run(&p, &mut pol, &mut attempt, budget) {
                            Ok(out) => {
                                decisions += out.decisions();
                                if let Some(m) = out.model() {
                                    model = Some(m.clone());
                                    break;
                                }
                            }
                            Err(ndprop_core::dprop::RunError::IterationBudget(_)) => {}
                            Err(e) => return Err(e.into()),
                        }
                    }
                    (model, runs, decisions)
                }
                PolicyArg::Guided => {
                    let target = match target {
                        Some(t) => p.parse_model(&t)?,
                        None => match enumerate_stable_models(&p, DEFAULT_ATOM_CAP)?
                            .into_iter()
                            .next()
                        {
                            Some(m) => m,
                            None => {
                                println!("UNSAT-WITHIN-BUDGET");
                                eprintln!("runs=0 decisions=0 ms={}", start.elapsed().as_millis());
                                return Ok(());
                            }
                        },
                    };
                    let mut pol = guided_policy(target);
                    let out =
                        dprop_run(&p, &mut pol, &mut rng, max_iters.unwrap_or(p.num_atoms()))?;
                    (out.model().cloned(), 1, out.decisions())
                }
            };
            match &model {
                Some(m) => println!("{}", p.format_model(m)),
                None => println!("UNSAT-WITHIN-BUDGET"),
            }
            eprintln!(
                "runs={runs} decisions={decisions} ms={}",
                start.elapsed().as_millis()
            );
        }
        Command::Enumerate { program, cap } => {
            let p = read_program(&program)?;
            let models = enumerate_stable_models(&p, cap)?;
            for m in &models {
                println!("{}", p.format_model(m));
            }
            eprintln!("{} stable model(s)", models.len());
        }
        Command::Check {
            program,
            tau,
            phi,
            tnorm,
            binary_tol,
            eps,
            max_inner,
        } => {
            let p = read_program(&program)?;
            let n = p.num_atoms();
            let tau = parse_degrees(&tau, n, "tau")?;
            let phi = parse_degrees(&phi, n, "phi")?;
            if binary_tol <= 0.0 || eps <= 0.0 {
                bail!("tolerances must be positive");
            }
            let cfg = CertifyConfig {
                binary_tol,
                propagation: PropagationConfig { eps, max_inner },
            };
            match certify(&p, &tau, &phi, tnorm, &cfg) {
                Certification::Stable(m) => {
                    println!("STABLE");
                    println!("{}", p.format_model(&m));
                }
                Certification::NotBinary { reason } => println!("NOT-BINARY {reason}"),
                Certification::NotStable(m) => println!("NOT-STABLE {}", p.format_model(&m)),
            }
        }
        Command::Validate { program } => {
            let p = read_program(&program)?;
            let issues = validate(&p);
            print!("{}", format_report(&issues));
            if !issues.is_empty() {
                return Err(Internal(format!("{} structural issue(s)", issues.len())).into());
            }
        }
        Command::Generate {
            generator,
            split,
            train,
            val,
            test,
            c1,
            c2,
            rule_ratio,
            oracle_cap,
            allow_inconsistent_test,
            out,
        } => {
            let generator = match generator {
                GeneratorArg::N2l => GeneratorKind::N2l { c1, c2 },
                GeneratorArg::ThreeLp => GeneratorKind::ThreeLp { rule_ratio },
            };
            let spec = DatasetSpec {
                generator,
                split,
                counts: Counts { train, val, test },
                seed,
                oracle_cap,
                consistent_test: !allow_inconsistent_test,
            };
            let manifest = build_dataset(&spec, &out)?;
            println!(
                "wrote {} instances to {} (rejected: train {}, val {}, test {})",
                manifest.instances.len(),
                out.display(),
                manifest.rejected.train,
                manifest.rejected.val,
                manifest.rejected.test
            );
        }
        Command::Train {
            data,
            epochs,
            hidden,
            logical,
            lr,
            batch,
            tnorm,
            iters,
            test_iters,
            inner_sweeps,
            loss,
            out,
            log,
        } => {
            let ds = load_dataset(&data)?;
            let train_set = labeled(&ds.subset(Subset::Train).collect::<Vec<_>>());
            let val_set = labeled(&ds.subset(Subset::Val).collect::<Vec<_>>());
            let cfg = TrainConfig {
                epochs,
                outer_iterations: iters,
                train_inner_sweeps: inner_sweeps,
                test_outer_iterations: test_iters,
                hidden_dim: hidden,
                logical_dim: logical,
                learning_rate: lr,
                batch_size: batch,
                tnorm,
                loss_mode: match loss {
                    LossArg::Best => LossMode::Best,
                    LossArg::Mean => LossMode::Mean,
                    LossArg::Min => LossMode::Min,
                },
                seed,
                ..TrainConfig::default()
            };
            let outcome = match train(&train_set, &val_set, &cfg) {
                Ok(o) => o,
                Err(e @ TrainError::Diverged { .. }) => return Err(Internal(e.to_string()).into()),
                Err(e) => return Err(e.into()),
            };
            save_weights(&outcome.weights, &out)?;
            let mut csv = String::from("epoch,mean_loss,val_solve_rate\n");
            for row in &outcome.log {
                let l = row.mean_loss.map(|l| format!("{l:.6}")).unwrap_or_default();
                csv.push_str(&format!("{},{},{:.4}\n", row.epoch, l, row.val_solve_rate));
            }
            match log {
                Some(path) => {
                    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?
                }
                None => print!("{csv}"),
            }
            eprintln!("best validation epoch {}", outcome.best_epoch);
        }
        Command::Eval {
            data,
            weights,
            iters,
            restarts,
            random,
            subset,
            csv,
            timing,
            timeout_ms,
        } => {
            let ds = load_dataset(&data)?;
            let insts: Vec<_> = ds.subset(subset.into()).collect();
            let opts = EvalOptions {
                timing,
                timeout: timeout_ms.map(Duration::from_millis),
            };
            let split = ds.manifest.split.to_string();
            let mut modes: Vec<EvalMode> = restarts
                .iter()
                .map(|&k| EvalMode::Rdprop { restarts: k })
                .collect();
            if restarts.contains(&0) {
                bail!("restart budgets must be positive");
            }
            if random {
                modes.push(EvalMode::Random);
            }
            if let Some(w) = &weights {
                let w = load_weights(w).with_context(|| format!("loading {}", w.display()))?;
                modes.push(EvalMode::Ndprop {
                    weights: w,
                    iterations: iters,
                });
            }
            if modes.is_empty() {
                bail!("nothing to evaluate: pass --weights, --restarts or --random");
            }
            let mut report = EvalReport::default();
            for m in &modes {
                report.extend(run_eval(m, &insts, &split, seed, &opts).map_err(internal)?);
            }
            match csv {
                Some(path) => {
                    fs::write(&path, report.to_csv())
                        .with_context(|| format!("writing {}", path.display()))?;
                    print!("{}", report.to_table());
                }
                None => print!("{}", report.to_csv()),
            }
        }
        Command::Gradcheck {
            programs,
            max_atoms,
            tnorm,
            hidden,
            logical,
            iters,
            inner_sweeps,
            step,
            tolerance,
        } => {
            if max_atoms < 5 {
                bail!("--max-atoms must be at least 5");
            }
            let mut worst = 0.0f64;
            let (mut checked, mut skipped) = (0, 0);
            for i in 0..programs {
                let s = derive_seed(seed, &[i as u64]);
                let n = 5 + (s % (max_atoms as u64 - 4)) as usize;
                let generator = if i % 2 == 0 {
                    GeneratorKind::n2l_default()
                } else {
                    GeneratorKind::three_lp_default()
                };
                let (p, _) = generator.generate(n, s)?;
                let models = enumerate_stable_models(&p, DEFAULT_ATOM_CAP)?;
                let w = init_weights(hidden, logical, tnorm, derive_seed(s, &[1]));
                let init = eval_hidden(s, i, &p, &w);
                let r = forward_grad_check(&p, &models, &w, iters, inner_sweeps, &init, step);
                println!(
                    "program {i}: atoms {n}, max_rel_error {:.3e}, checked {}, skipped {}",
                    r.max_rel_error, r.checked, r.skipped
                );
                worst = worst.max(r.max_rel_error);
                checked += r.checked;
                skipped += r.skipped;
            }
            println!("max_rel_error {worst:.3e} checked {checked} skipped {skipped}");
            if worst >= tolerance {
                return Err(Internal(format!(
                    "gradient error {worst:.3e} exceeds {tolerance:.1e}"
                ))
                .into());
            }
        }
        Command::Suite {
            config,
            output_dir,
            timing,
        } => {
            let mut cfg: SuiteConfig = match config {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => SuiteConfig::default(),
            };
            if cfg.seed == 0 {
                cfg.seed = seed;
            }
            let opts = EvalOptions {
                timing,
                timeout: None,
            };
            let out = run_experiment_suite(&cfg, &output_dir, &opts).map_err(internal)?;
            print!("{}", out.report.to_table());
        }
    }
    Ok(())
}
