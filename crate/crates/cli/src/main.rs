//! `infebm` — train inferable EBMs on CSV data, query predictions with
//! confidence / prediction / reproduction intervals, export per-feature
//! effect curves with bands, run the self-verification suite, and drive
//! the desk-scale validation experiments.
//!
//! Every command is deterministic under a fixed `--seed`. Worker count is
//! capped by the `INFEBM_THREADS` environment variable. Output is either
//! aligned text (`--format table`) or one JSON object per row
//! (`--format json-lines`). Exit code 0 means success; any error or
//! failed verification exits nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use infebm::boost::{TrainConfig, Variant};
use infebm::data::load_csv;
use infebm::experiments::{
    coverage_experiment, generate, median_query_nanos, mse_rate_experiment, overfit_experiment,
    plain_sum_overfit, rnorm_rate_experiment, CoverageConfig, SyntheticDgp,
};
use infebm::inference::{
    conformal_factor, feature_ci, overall_ci, prediction_interval_prescaled,
    reproduction_interval, IntervalResult, OverallMode, SigmaMode,
};
use infebm::model::{fit_dataset, load_model, save_model, FitOptions};
use infebm::trees::TreeParams;
use infebm::verify::run_verification;

#[derive(Parser)]
#[command(name = "infebm", version, about = "Inferable explainable boosting machines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output encoding for tabular results.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    JsonLines,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    /// All features per round (shared residual snapshot).
    Parallel,
    /// Leave-one-out backfitting-style updates.
    Loo,
    /// One random feature per round.
    Cyclic,
}

impl From<Algo> for Variant {
    fn from(a: Algo) -> Variant {
        match a {
            Algo::Parallel => Variant::Parallel,
            Algo::Loo => Variant::LeaveOneOut,
            Algo::Cyclic => Variant::RandomCyclic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaArg {
    InSample,
    Oob,
}

#[derive(Clone, Copy, ValueEnum)]
enum IntervalArg {
    None,
    Ci,
    Pi,
    Ri,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a CSV file and write the model file.
    Train(TrainArgs),
    /// Predict rows of a CSV, optionally with intervals.
    Predict(PredictArgs),
    /// Per-feature effect curve with a confidence band.
    Explain(ExplainArgs),
    /// Run the oracle-equivalence verification suite.
    Verify(VerifyArgs),
    /// Desk-scale validation experiments.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Input CSV (one header row, numeric columns).
    #[arg(long)]
    csv: PathBuf,
    /// Response column name.
    #[arg(long)]
    target: String,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Algo::Parallel)]
    algo: Algo,
    #[arg(long, default_value_t = 1000)]
    rounds: usize,
    /// Learning rate λ in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Use the provably safe learning rate λ = 1/p.
    #[arg(long, default_value_t = false)]
    safe: bool,
    /// Per-round Bernoulli subsample rate ξ.
    #[arg(long, default_value_t = 0.8)]
    subsample: f64,
    #[arg(long, default_value_t = 255)]
    max_bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise-scale estimator.
    #[arg(long, value_enum, default_value_t = SigmaArg::InSample)]
    sigma: SigmaArg,
    /// Freeze tree structures after this many rounds (enables the
    /// non-adaptive mode; also sets the kernel burn-in).
    #[arg(long)]
    freeze_after: Option<usize>,
    /// Kernel-accumulation burn-in; default rounds/5.
    #[arg(long)]
    burn_in: Option<usize>,
    /// Hold out this fraction of rows for conformal calibration.
    #[arg(long, default_value_t = 0.0)]
    calibration: f64,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    /// Leaf truncation level M; default 4·sd(y).
    #[arg(long)]
    truncation: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV containing at least the training feature columns; extra columns
    /// (such as the response) are ignored.
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = IntervalArg::None)]
    interval: IntervalArg,
    /// Rescale prediction-interval widths on the calibration split.
    #[arg(long, default_value_t = false)]
    conformal: bool,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Feature name from the training schema.
    #[arg(long)]
    feature: String,
    #[arg(long, default_value_t = 50)]
    grid: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct VerifyArgs {
    /// Sample size of the random verification instances.
    #[arg(long, default_value_t = 120)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    trials: usize,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(subcommand)]
    which: ExperimentKind,
}

#[derive(Subcommand)]
enum ExperimentKind {
    /// Interval coverage on the four-feature synthetic benchmark.
    Coverage {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = Algo::Loo)]
        algo: Algo,
        #[arg(long, default_value_t = 1200)]
        rounds: usize,
        #[arg(long, default_value_t = 20240501)]
        seed: u64,
    },
    /// Per-feature MSE against sample size (log-log slope).
    MseRate {
        #[arg(long, num_args = 1.., default_values_t = vec![500, 1000, 2000, 4000])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 400)]
        rounds: usize,
        #[arg(long, default_value_t = 31)]
        seed: u64,
    },
    /// Median influence norm against sample size (log-log slope).
    RnormRate {
        #[arg(long, num_args = 1.., default_values_t = vec![250, 500, 1000, 2000, 4000])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 300)]
        rounds: usize,
        #[arg(long, default_value_t = 47)]
        seed: u64,
    },
    /// Test-RMSE trajectory over boosting rounds, with the unregularized
    /// plain-sum baseline for contrast.
    Overfit {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 5000)]
        rounds: usize,
        #[arg(long, default_value_t = 3)]
        seed: u64,
    },
    /// Influence-query wall time at two sample sizes with equal bins.
    QueryTime {
        #[arg(long, default_value_t = 1000)]
        n_small: usize,
        #[arg(long, default_value_t = 100000)]
        n_large: usize,
        #[arg(long, default_value_t = 19)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("INFEBM_THREADS") {
        if let Ok(t) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Train(args) => cmd_train(args).map(|()| ExitCode::SUCCESS),
        Command::Predict(args) => cmd_predict(args, cli.format).map(|()| ExitCode::SUCCESS),
        Command::Explain(args) => cmd_explain(args, cli.format).map(|()| ExitCode::SUCCESS),
        Command::Verify(args) => cmd_verify(args),
        Command::Experiment(args) => cmd_experiment(args, cli.format).map(|()| ExitCode::SUCCESS),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), String> {
    let (ds, report) = load_csv(&args.csv, &args.target).map_err(|e| e.to_string())?;
    if report.rejected > 0 {
        eprintln!(
            "dropped {} malformed row(s) (first lines: {:?})",
            report.rejected, report.sample_lines
        );
    }
    let variant: Variant = args.algo.into();
    let lambda = if args.safe {
        1.0 / ds.n_features() as f64
    } else {
        args.lambda
    };
    let mut cfg = TrainConfig::new(variant, args.rounds, args.seed);
    cfg.lambda = lambda;
    cfg.subsample = args.subsample;
    cfg.truncation = args.truncation;
    cfg.burn_in = args.freeze_after.or(args.burn_in);
    cfg.freeze_structures = args.freeze_after.is_some();
    if args.max_depth.is_some() || args.min_leaf.is_some() {
        let defaults = TreeParams::default_for(ds.n_samples());
        cfg.tree = Some(TreeParams {
            max_depth: args.max_depth.unwrap_or(defaults.max_depth),
            min_leaf_samples: args.min_leaf.unwrap_or(defaults.min_leaf_samples),
        });
    }
    let opts = FitOptions {
        max_bins: args.max_bins,
        calibration_fraction: args.calibration,
        sigma_mode: match args.sigma {
            SigmaArg::InSample => SigmaMode::InSample,
            SigmaArg::Oob => SigmaMode::Oob,
        },
    };
    let fitted = fit_dataset(&ds, cfg, &opts).map_err(|e| e.to_string())?;
    save_model(&fitted, &args.out).map_err(|e| e.to_string())?;

    let e = &fitted.ensemble;
    println!(
        "trained {:?} model: n={}, p={}, rounds={}, lambda={}",
        e.variant,
        fitted.cache.n_samples(),
        e.n_features(),
        e.rounds,
        e.lambda
    );
    println!("intercept = {:.6}, sigma = {:.6}", e.intercept, fitted.cache.sigma());
    for (k, name) in e.feature_names.iter().enumerate() {
        let lo = e.effects[k].iter().cloned().fold(f64::INFINITY, f64::min) * e.c_e_inv;
        let hi = e.effects[k].iter().cloned().fold(f64::NEG_INFINITY, f64::max) * e.c_e_inv;
        println!(
            "  {name}: effect range [{lo:.4}, {hi:.4}] over {} bins",
            e.effects[k].len()
        );
    }
    println!("model written to {}", args.out.display());
    Ok(())
}

/// Print a table or JSON lines; stops quietly when stdout closes early
/// (e.g. piped into `head`).
fn emit(format: Format, header: &[&str], rows: &[Vec<String>]) {
    use std::io::Write;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match format {
        Format::Table => {
            let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
            for row in rows {
                for (w, cell) in widths.iter_mut().zip(row) {
                    *w = (*w).max(cell.len());
                }
            }
            let line = |cells: Vec<String>| {
                cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:>w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
            };
            if writeln!(out, "{}", line(header.iter().map(|s| s.to_string()).collect())).is_err() {
                return;
            }
            for row in rows {
                if writeln!(out, "{}", line(row.clone())).is_err() {
                    return;
                }
            }
        }
        Format::JsonLines => {
            for row in rows {
                let obj: serde_json::Map<String, serde_json::Value> = header
                    .iter()
                    .zip(row)
                    .map(|(h, c)| {
                        let v = c
                            .parse::<f64>()
                            .map(|x| serde_json::json!(x))
                            .unwrap_or_else(|_| serde_json::json!(c));
                        (h.to_string(), v)
                    })
                    .collect();
                if writeln!(out, "{}", serde_json::Value::Object(obj)).is_err() {
                    return;
                }
            }
        }
    }
}

fn csv_header(path: &PathBuf) -> Result<Vec<String>, String> {
    let file =
        std::fs::File::open(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    Ok(rdr
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(|s| s.to_string())
        .collect())
}

fn cmd_predict(args: PredictArgs, format: Format) -> Result<(), String> {
    let fitted = load_model(&args.model).map_err(|e| e.to_string())?;
    let header = csv_header(&args.csv)?;
    // Parse with some non-feature column as the throwaway target; if the
    // file is features-only, temporarily treat the first feature as target
    // and recover it from the parsed order.
    let target = header
        .iter()
        .find(|h| !fitted.ensemble.feature_names.contains(h))
        .cloned();
    let (ds, _) = match &target {
        Some(t) => load_csv(&args.csv, t).map_err(|e| e.to_string())?,
        None => load_csv(&args.csv, &header[0]).map_err(|e| e.to_string())?,
    };
    let mut names = ds.feature_names().to_vec();
    let mut columns: Vec<Vec<f64>> = (0..ds.n_features()).map(|k| ds.column(k).to_vec()).collect();
    if target.is_none() {
        // Put the sacrificed first column back as a feature.
        names.insert(0, header[0].clone());
        columns.insert(0, ds.y().to_vec());
    }
    let order: Vec<usize> = fitted
        .ensemble
        .feature_names
        .iter()
        .map(|need| {
            names
                .iter()
                .position(|have| have == need)
                .ok_or_else(|| format!("csv is missing training feature {need:?}"))
        })
        .collect::<Result<_, _>>()?;

    let pi_factor = match args.interval {
        IntervalArg::Pi if args.conformal => {
            let cal = fitted
                .calibration
                .as_ref()
                .ok_or("conformal intervals need a model trained with --calibration")?;
            conformal_factor(&fitted.ensemble, &fitted.cache, cal, args.alpha)
                .map_err(|e| e.to_string())?
        }
        _ => 1.0,
    };
    let mut rows = Vec::new();
    for i in 0..ds.n_samples() {
        let x: Vec<f64> = order.iter().map(|&j| columns[j][i]).collect();
        let pred = fitted.ensemble.predict(&x);
        let mut row = vec![format!("{i}"), format!("{pred}")];
        let iv: Option<IntervalResult> = match args.interval {
            IntervalArg::None => None,
            IntervalArg::Ci => Some(overall_ci(
                &fitted.ensemble,
                &fitted.cache,
                &x,
                args.alpha,
                OverallMode::OrthogonalSum,
            )),
            IntervalArg::Pi => Some(prediction_interval_prescaled(
                &fitted.ensemble,
                &fitted.cache,
                &x,
                args.alpha,
                pi_factor,
            )),
            IntervalArg::Ri => {
                let ci = overall_ci(
                    &fitted.ensemble,
                    &fitted.cache,
                    &x,
                    args.alpha,
                    OverallMode::OrthogonalSum,
                );
                Some(reproduction_interval(&ci).map_err(|e| e.to_string())?)
            }
        };
        if let Some(iv) = iv {
            row.push(format!("{}", iv.lower));
            row.push(format!("{}", iv.upper));
            row.push(format!("{}", iv.r_norm));
        }
        rows.push(row);
    }
    let header: &[&str] = match args.interval {
        IntervalArg::None => &["row", "prediction"],
        _ => &["row", "prediction", "lower", "upper", "r_norm"],
    };
    emit(format, header, &rows);
    Ok(())
}

fn cmd_explain(args: ExplainArgs, format: Format) -> Result<(), String> {
    let fitted = load_model(&args.model).map_err(|e| e.to_string())?;
    let e = &fitted.ensemble;
    let k = e
        .feature_names
        .iter()
        .position(|n| *n == args.feature)
        .ok_or_else(|| {
            format!("unknown feature {:?}; model has {:?}", args.feature, e.feature_names)
        })?;
    if args.grid < 2 {
        return Err("grid must have at least 2 points".into());
    }
    let (lo, hi) = e.value_range[k];
    let rows: Vec<Vec<String>> = (0..args.grid)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (args.grid - 1) as f64;
            let ci = feature_ci(e, &fitted.cache, k, x, args.alpha);
            vec![
                format!("{x}"),
                format!("{}", ci.center),
                format!("{}", ci.lower),
                format!("{}", ci.upper),
                format!("{}", ci.r_norm),
            ]
        })
        .collect();
    emit(format, &["x", "effect", "lower", "upper", "r_norm"], &rows);
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, String> {
    let report = run_verification(args.n, args.seed, args.trials);
    for c in &report.checks {
        println!(
            "[{}] {} (max deviation {:.3e}, tolerance {:.1e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.max_dev,
            c.tol
        );
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_experiment(args: ExperimentArgs, format: Format) -> Result<(), String> {
    match args.which {
        ExperimentKind::Coverage {
            n,
            trials,
            alpha,
            algo,
            rounds,
            seed,
        } => {
            let dgp = SyntheticDgp::fig3(1.0);
            let cfg = CoverageConfig {
                n,
                trials,
                alpha,
                variant: algo.into(),
                rounds,
                seed,
                ..CoverageConfig::default()
            };
            let rep = coverage_experiment(&dgp, &cfg);
            let mut rows = Vec::new();
            for k in 0..rep.feature_coverage.len() {
                rows.push(vec![
                    "feature_ci".to_string(),
                    format!("x{}", k + 1),
                    format!("{:.4}", rep.feature_coverage[k]),
                    format!("{:.4}", rep.feature_coverage_se[k]),
                    format!("{:.4}", rep.mean_ci_width[k]),
                ]);
            }
            rows.push(vec![
                "intercept_ci".into(),
                "-".into(),
                format!("{:.4}", rep.intercept_coverage),
                "-".into(),
                "-".into(),
            ]);
            rows.push(vec![
                "prediction_interval".into(),
                "-".into(),
                format!("{:.4}", rep.pi_coverage),
                "-".into(),
                "-".into(),
            ]);
            rows.push(vec![
                "reproduction_interval".into(),
                "-".into(),
                format!("{:.4}", rep.ri_coverage),
                "-".into(),
                "-".into(),
            ]);
            emit(format, &["interval", "feature", "coverage", "se", "mean_width"], &rows);
        }
        ExperimentKind::MseRate { n, trials, rounds, seed } => {
            let dgp = SyntheticDgp::fig3(1.0);
            let rep = mse_rate_experiment(&dgp, &n, trials, Variant::Parallel, rounds, 255, seed);
            let mut rows: Vec<Vec<String>> = rep
                .points
                .iter()
                .map(|p| vec![format!("{}", p.n), format!("{:.6}", p.mse)])
                .collect();
            rows.push(vec!["slope".into(), format!("{:.4}", rep.slope)]);
            emit(format, &["n", "mse"], &rows);
        }
        ExperimentKind::RnormRate { n, trials, rounds, seed } => {
            let rep = rnorm_rate_experiment(&n, trials, rounds, 255, seed);
            let mut rows: Vec<Vec<String>> = rep
                .points
                .iter()
                .map(|p| vec![format!("{}", p.n), format!("{:.6}", p.median_r_norm)])
                .collect();
            rows.push(vec!["slope".into(), format!("{:.4}", rep.slope)]);
            emit(format, &["n", "median_r_norm"], &rows);
        }
        ExperimentKind::Overfit { n, rounds, seed } => {
            let dgp = SyntheticDgp::sin_4pi(0.5);
            let checkpoints: Vec<usize> = [10, 25, 50, 100, 200, 400, 800, 1600, 3000, 4000, 5000]
                .into_iter()
                .filter(|&b| b <= rounds)
                .collect();
            let cfg = TrainConfig::new(Variant::Parallel, rounds, seed);
            let boulevard = overfit_experiment(&dgp, n, &checkpoints, cfg, seed);
            let tree = TreeParams {
                max_depth: 10,
                min_leaf_samples: 2,
            };
            let plain = plain_sum_overfit(&dgp, n, &checkpoints, 0.02, 0.8, tree, 255, seed);
            let mut rows = Vec::new();
            for (a, b) in boulevard.curve.iter().zip(&plain.curve) {
                rows.push(vec![
                    format!("{}", a.round),
                    format!("{:.5}", a.test_rmse),
                    format!("{:.5}", b.test_rmse),
                ]);
            }
            rows.push(vec![
                "final/min".into(),
                format!("{:.4}", boulevard.final_min_ratio),
                format!("{:.4}", plain.final_min_ratio),
            ]);
            emit(format, &["round", "boulevard_rmse", "plain_sum_rmse"], &rows);
        }
        ExperimentKind::QueryTime { n_small, n_large, seed } => {
            let dgp = SyntheticDgp::fig3(1.0);
            let time_at = |n: usize| -> Result<(f64, usize), String> {
                let ds = generate(&dgp, n, seed);
                let cfg = TrainConfig::new(Variant::Parallel, 40, seed);
                let opts = FitOptions {
                    max_bins: 255,
                    calibration_fraction: 0.0,
                    sigma_mode: SigmaMode::InSample,
                };
                let fitted = fit_dataset(&ds, cfg, &opts).map_err(|e| e.to_string())?;
                // Warm up, then time.
                let _ = median_query_nanos(&fitted.ensemble, &fitted.cache, 64);
                Ok((
                    median_query_nanos(&fitted.ensemble, &fitted.cache, 512),
                    fitted.cache.total_bins(),
                ))
            };
            let (t_small, m_small) = time_at(n_small)?;
            let (t_large, m_large) = time_at(n_large)?;
            let rows = vec![
                vec![format!("{n_small}"), format!("{m_small}"), format!("{t_small:.0}")],
                vec![format!("{n_large}"), format!("{m_large}"), format!("{t_large:.0}")],
                vec!["ratio".into(), "-".into(), format!("{:.3}", t_large / t_small)],
            ];
            emit(format, &["n", "bins", "median_query_ns"], &rows);
        }
    }
    Ok(())
}
