//! Synthetic generators and the desk-scale validation suite: interval
//! coverage, per-feature MSE rate, influence-norm rate, query-time scaling
//! and overfitting robustness. Every experiment is seed-deterministic and
//! returns a plain struct that the CLI renders as a table or JSON lines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::boost::{train, EnsembleModel, TrainConfig, Trainer, Variant};
use crate::data::{bin_features, Dataset};
use crate::inference::{
    build_cache, conformal_factor, feature_ci, intercept_ci, overall_ci,
    prediction_interval_prescaled, reproduction_interval, InferenceCache, OverallMode, SigmaMode,
};
use crate::model::{fit_dataset, FitOptions, FittedModel};
use crate::stats::{ls_slope, median};
use crate::trees::{fit_tree, predict_tree, TreeParams};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn mix(seed: u64, a: u64) -> u64 {
    splitmix(splitmix(seed) ^ a)
}

/// An additive data-generating process with uniform covariates on
/// `[0,1]^p`, Gaussian noise, and one component function per feature.
#[derive(Clone)]
pub struct SyntheticDgp {
    pub name: &'static str,
    pub intercept: f64,
    pub components: Vec<fn(f64) -> f64>,
    pub noise_sd: f64,
}

fn fig3_c1(x: f64) -> f64 {
    10.0 * (std::f64::consts::PI * x).sin()
}
fn fig3_c2(x: f64) -> f64 {
    5.0 * (std::f64::consts::PI * x).cos() + 20.0 * (x - 0.5) * (x - 0.5)
}
fn fig3_c3(x: f64) -> f64 {
    10.0 * x
}
fn fig3_c4(x: f64) -> f64 {
    -5.0 * x
}
fn demo_1d(x: f64) -> f64 {
    2.0 * (2.0 * std::f64::consts::PI * x).sin() + x * x
}
fn sin_4pi(x: f64) -> f64 {
    (4.0 * std::f64::consts::PI * x).sin()
}

impl SyntheticDgp {
    /// `f(x) = -5 + 10 sin(πx₁) + 5 cos(πx₂) + 20(x₂-0.5)² + 10x₃ - 5x₄`.
    pub fn fig3(noise_sd: f64) -> Self {
        SyntheticDgp {
            name: "fig3",
            intercept: -5.0,
            components: vec![fig3_c1, fig3_c2, fig3_c3, fig3_c4],
            noise_sd,
        }
    }

    /// `f(x) = 2 sin(2πx) + x²`, one feature.
    pub fn one_dim(noise_sd: f64) -> Self {
        SyntheticDgp {
            name: "one_dim",
            intercept: 0.0,
            components: vec![demo_1d],
            noise_sd,
        }
    }

    /// `f(x) = sin(4πx)`, one feature.
    pub fn sin_4pi(noise_sd: f64) -> Self {
        SyntheticDgp {
            name: "sin4pi",
            intercept: 0.0,
            components: vec![sin_4pi],
            noise_sd,
        }
    }

    /// Append pure-noise features (zero components).
    pub fn with_null_features(mut self, extra: usize) -> Self {
        fn zero(_: f64) -> f64 {
            0.0
        }
        for _ in 0..extra {
            self.components.push(zero);
        }
        self
    }

    pub fn p(&self) -> usize {
        self.components.len()
    }

    /// Noiseless regression function.
    pub fn truth(&self, x: &[f64]) -> f64 {
        self.intercept + self.components.iter().zip(x).map(|(f, &v)| f(v)).sum::<f64>()
    }

    /// Monte-Carlo means of each component under the uniform covariate law;
    /// the identifiability convention scores estimates against components
    /// centered by these.
    pub fn component_means(&self, draws: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xC0FFEE));
        let mut sums = vec![0.0; self.p()];
        for _ in 0..draws {
            let x: f64 = rng.gen();
            for (k, f) in self.components.iter().enumerate() {
                sums[k] += f(x);
            }
        }
        sums.iter().map(|s| s / draws as f64).collect()
    }

    /// Population intercept `E[y]` implied by the component means.
    pub fn population_intercept(&self, means: &[f64]) -> f64 {
        self.intercept + means.iter().sum::<f64>()
    }
}

/// Draw `n` i.i.d. rows from the DGP.
pub fn generate(dgp: &SyntheticDgp, n: usize, seed: u64) -> Dataset {
    assert!(n >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let p = dgp.p();
    let mut columns = vec![Vec::with_capacity(n); p];
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let mut truth = dgp.intercept;
        for (k, f) in dgp.components.iter().enumerate() {
            let v: f64 = rng.gen();
            truth += f(v);
            columns[k].push(v);
        }
        let eps = if dgp.noise_sd > 0.0 {
            dgp.noise_sd * normal.sample(&mut rng)
        } else {
            0.0
        };
        y.push(truth + eps);
    }
    let names = (0..p).map(|k| format!("x{}", k + 1)).collect();
    Dataset::from_columns(names, columns, y).unwrap()
}

/// Evenly spaced query grid over `[0.02, 0.98]`, away from boundary-bin
/// artifacts.
pub fn query_grid(points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| 0.02 + 0.96 * i as f64 / (points - 1) as f64)
        .collect()
}

#[derive(Debug, Clone)]
pub struct CoverageConfig {
    pub n: usize,
    pub trials: usize,
    pub alpha: f64,
    pub variant: Variant,
    pub rounds: usize,
    pub max_bins: usize,
    pub grid_points: usize,
    pub calibration_fraction: f64,
    pub pi_test_points: usize,
    pub tree: Option<TreeParams>,
    pub sigma_mode: SigmaMode,
    pub centering_draws: usize,
    pub seed: u64,
}

impl Default for CoverageConfig {
    /// The validated interval-coverage setup: leave-one-out updates (whose
    /// backfitting limit is unbiased for the centered components), trees
    /// fine enough that localization error stays inside the CLT width, and
    /// out-of-bag σ̂.
    fn default() -> Self {
        CoverageConfig {
            n: 2000,
            trials: 50,
            alpha: 0.05,
            variant: Variant::LeaveOneOut,
            rounds: 1200,
            max_bins: 255,
            grid_points: 50,
            calibration_fraction: 0.2,
            pi_test_points: 40,
            tree: Some(TreeParams {
                max_depth: 10,
                min_leaf_samples: 12,
            }),
            sigma_mode: SigmaMode::Oob,
            centering_draws: 1_000_000,
            seed: 20_240_501,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub n: usize,
    pub trials: usize,
    pub alpha: f64,
    /// Coverage of per-feature CIs averaged over grid points and trials,
    /// scored against the train-centered component (the identifiability
    /// convention: each component has zero mean over the training rows).
    pub feature_coverage: Vec<f64>,
    /// Binomial standard error of each feature's coverage estimate.
    pub feature_coverage_se: Vec<f64>,
    /// The population-centered alternative scoring.
    pub feature_coverage_pop: Vec<f64>,
    /// Per-grid-point coverage across trials, `[k][grid]`
    /// (train-centered scoring).
    pub per_point_coverage: Vec<Vec<f64>>,
    pub mean_ci_width: Vec<f64>,
    /// Intercept CI coverage of the design-conditional mean response
    /// (the intercept under the train-centering convention).
    pub intercept_coverage: f64,
    /// The population-intercept alternative scoring.
    pub intercept_coverage_pop: f64,
    /// Conformal prediction-interval coverage on fresh draws.
    pub pi_coverage: f64,
    /// Reproduction-interval coverage of an independently trained model's
    /// estimate, over trial pairs.
    pub ri_coverage: f64,
}

struct TrialTally {
    feature_hits: Vec<usize>,
    feature_hits_pop: Vec<usize>,
    feature_total: Vec<usize>,
    point_hits: Vec<Vec<usize>>,
    width_sum: Vec<f64>,
    intercept_hit: bool,
    intercept_hit_pop: bool,
    pi_hits: usize,
    pi_total: usize,
}

fn fit_trial(
    dgp: &SyntheticDgp,
    cfg: &CoverageConfig,
    trial: u64,
) -> (FittedModel, Dataset) {
    let ds = generate(dgp, cfg.n, mix(cfg.seed, 1000 + trial));
    let mut tc = TrainConfig::new(cfg.variant, cfg.rounds, mix(cfg.seed, 2000 + trial));
    tc.tree = cfg.tree;
    let opts = FitOptions {
        max_bins: cfg.max_bins,
        calibration_fraction: cfg.calibration_fraction,
        sigma_mode: cfg.sigma_mode,
    };
    (fit_dataset(&ds, tc, &opts).expect("trial fit failed"), ds)
}

/// Train `trials` independent models on fresh draws and score CI, PI and
/// RI containment. Feature CIs are scored against the train-centered
/// component (population-centered reported as the alternative), the
/// intercept against the training-design mean response, prediction
/// intervals against fresh labelled draws, and reproduction intervals
/// against the paired independently trained model's predictions. Trials
/// run as streamed pairs so at most two models per worker are alive.
pub fn coverage_experiment(dgp: &SyntheticDgp, cfg: &CoverageConfig) -> CoverageReport {
    assert!(cfg.trials >= 2, "need at least 2 trials");
    let p = dgp.p();
    let grid = query_grid(cfg.grid_points);
    let means = dgp.component_means(cfg.centering_draws, cfg.seed);
    let pop_intercept = dgp.population_intercept(&means);

    let score_trial = |t: usize, fitted: &FittedModel, ds: &Dataset| -> TrialTally {
            let model = &fitted.ensemble;
            let cache = &fitted.cache;
            let mut tally = TrialTally {
                feature_hits: vec![0; p],
                feature_hits_pop: vec![0; p],
                feature_total: vec![0; p],
                point_hits: vec![vec![0; grid.len()]; p],
                width_sum: vec![0.0; p],
                intercept_hit: false,
                intercept_hit_pop: false,
                pi_hits: 0,
                pi_total: 0,
            };
            // Per-trial centering: the estimand under the identifiability
            // convention is the component minus its mean over the rows the
            // model actually trained on (the calibration split excluded).
            let is_train = |i: usize| fitted.holdout.as_ref().is_none_or(|m| !m[i]);
            let train_rows: Vec<usize> = (0..ds.n_samples()).filter(|&i| is_train(i)).collect();
            let n_train = train_rows.len() as f64;
            let trial_shift: Vec<f64> = (0..p)
                .map(|k| {
                    let col = ds.column(k);
                    train_rows
                        .iter()
                        .map(|&i| dgp.components[k](col[i]) - means[k])
                        .sum::<f64>()
                        / n_train
                })
                .collect();
            for k in 0..p {
                for (g, &x) in grid.iter().enumerate() {
                    let ci = feature_ci(model, cache, k, x, cfg.alpha);
                    let truth_pop = dgp.components[k](x) - means[k];
                    let truth = truth_pop - trial_shift[k];
                    tally.feature_total[k] += 1;
                    if ci.lower <= truth && truth <= ci.upper {
                        tally.feature_hits[k] += 1;
                        tally.point_hits[k][g] += 1;
                    }
                    if ci.lower <= truth_pop && truth_pop <= ci.upper {
                        tally.feature_hits_pop[k] += 1;
                    }
                    tally.width_sum[k] += 2.0 * ci.half_width;
                }
            }
            let ici = intercept_ci(model, cache, cfg.alpha);
            // Conditional target: the mean of the true regression function
            // over the training rows; population target as the alternative.
            let cond_intercept =
                train_rows.iter().map(|&i| dgp.truth(&ds.row(i))).sum::<f64>() / n_train;
            tally.intercept_hit = ici.lower <= cond_intercept && cond_intercept <= ici.upper;
            tally.intercept_hit_pop = ici.lower <= pop_intercept && pop_intercept <= ici.upper;

            // Fresh labelled draws for prediction-interval coverage; the
            // conformal factor is query-independent, compute it once.
            let factor = conformal_factor(
                model,
                cache,
                fitted.calibration.as_ref().expect("calibration split present"),
                cfg.alpha,
            )
            .expect("nonempty calibration");
            let test = generate(dgp, cfg.pi_test_points.max(2), mix(cfg.seed, 3000 + t as u64));
            for i in 0..test.n_samples() {
                let x = test.row(i);
                let pi = prediction_interval_prescaled(model, cache, &x, cfg.alpha, factor);
                tally.pi_total += 1;
                if pi.lower <= test.y()[i] && test.y()[i] <= pi.upper {
                    tally.pi_hits += 1;
                }
            }
            tally
    };

    // Stream trial pairs: fit two models, score both, then score the
    // reproduction intervals for another realization at the response
    // level — model A's √2-scaled overall CI should contain model B's
    // prediction at fresh query points.
    let n_pairs = cfg.trials / 2;
    let odd_trial = cfg.trials % 2 == 1;
    let pair_results: Vec<(TrialTally, Option<TrialTally>, usize, usize)> = (0..n_pairs + odd_trial as usize)
        .into_par_iter()
        .map(|j| {
            let ta = 2 * j;
            let (fa, dsa) = fit_trial(dgp, cfg, ta as u64);
            let tally_a = score_trial(ta, &fa, &dsa);
            if ta + 1 >= cfg.trials {
                return (tally_a, None, 0, 0);
            }
            let tb = ta + 1;
            let (fb, dsb) = fit_trial(dgp, cfg, tb as u64);
            let tally_b = score_trial(tb, &fb, &dsb);
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 4000 + ta as u64));
            let mut hits = 0usize;
            let mut total = 0usize;
            for _ in 0..cfg.pi_test_points.max(20) {
                let x: Vec<f64> = (0..p).map(|_| rng.gen::<f64>()).collect();
                // Without the projector-orthogonality condition the
                // aggregate is conservative by Cauchy-Schwarz; reproduction
                // intervals are reported as overcovering.
                let ci = overall_ci(&fa.ensemble, &fa.cache, &x, cfg.alpha, OverallMode::Conservative);
                let ri = reproduction_interval(&ci).expect("overall CI");
                let other = fb.ensemble.predict(&x);
                total += 1;
                if ri.lower <= other && other <= ri.upper {
                    hits += 1;
                }
            }
            (tally_a, Some(tally_b), hits, total)
        })
        .collect();
    let mut tallies: Vec<TrialTally> = Vec::with_capacity(cfg.trials);
    let mut ri_hits = 0usize;
    let mut ri_total = 0usize;
    for (a, b, hits, total) in pair_results {
        tallies.push(a);
        if let Some(b) = b {
            tallies.push(b);
        }
        ri_hits += hits;
        ri_total += total;
    }

    let mut feature_coverage = vec![0.0; p];
    let mut feature_coverage_se = vec![0.0; p];
    let mut feature_coverage_pop = vec![0.0; p];
    let mut mean_ci_width = vec![0.0; p];
    let mut per_point = vec![vec![0.0; grid.len()]; p];
    let mut intercept_hits = 0usize;
    let mut intercept_hits_pop = 0usize;
    let mut pi_hits = 0usize;
    let mut pi_total = 0usize;
    for tally in &tallies {
        for k in 0..p {
            per_point[k]
                .iter_mut()
                .zip(&tally.point_hits[k])
                .for_each(|(acc, &h)| *acc += h as f64);
        }
        intercept_hits += tally.intercept_hit as usize;
        intercept_hits_pop += tally.intercept_hit_pop as usize;
        pi_hits += tally.pi_hits;
        pi_total += tally.pi_total;
    }
    for k in 0..p {
        let hits: usize = tallies.iter().map(|t| t.feature_hits[k]).sum();
        let hits_pop: usize = tallies.iter().map(|t| t.feature_hits_pop[k]).sum();
        let total: usize = tallies.iter().map(|t| t.feature_total[k]).sum();
        let cov = hits as f64 / total as f64;
        feature_coverage[k] = cov;
        feature_coverage_se[k] = (cov * (1.0 - cov) / total as f64).sqrt();
        feature_coverage_pop[k] = hits_pop as f64 / total as f64;
        mean_ci_width[k] =
            tallies.iter().map(|t| t.width_sum[k]).sum::<f64>() / total as f64;
        for v in per_point[k].iter_mut() {
            *v /= cfg.trials as f64;
        }
    }

    CoverageReport {
        n: cfg.n,
        trials: cfg.trials,
        alpha: cfg.alpha,
        feature_coverage,
        feature_coverage_se,
        feature_coverage_pop,
        per_point_coverage: per_point,
        mean_ci_width,
        intercept_coverage: intercept_hits as f64 / cfg.trials as f64,
        intercept_coverage_pop: intercept_hits_pop as f64 / cfg.trials as f64,
        pi_coverage: pi_hits as f64 / pi_total.max(1) as f64,
        ri_coverage: ri_hits as f64 / ri_total.max(1) as f64,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MseRatePoint {
    pub n: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MseRateReport {
    pub points: Vec<MseRatePoint>,
    /// Least-squares slope of `log MSE` on `log n`.
    pub slope: f64,
}

/// Per-feature MSE of the rescaled effects against population-centered
/// truth on held-out points, across a grid of sample sizes.
pub fn mse_rate_experiment(
    dgp: &SyntheticDgp,
    n_grid: &[usize],
    trials: usize,
    variant: Variant,
    rounds: usize,
    max_bins: usize,
    seed: u64,
) -> MseRateReport {
    assert!(n_grid.len() >= 3, "need at least 3 sample sizes");
    let means = dgp.component_means(1_000_000, seed);
    let eval = query_grid(200);

    let points: Vec<MseRatePoint> = n_grid
        .iter()
        .map(|&n| {
            let total: f64 = (0..trials as u64)
                .into_par_iter()
                .map(|t| {
                    let ds = generate(dgp, n, mix(seed, n as u64 * 131 + t));
                    let binned = bin_features(&ds, max_bins);
                    let mut cfg = TrainConfig::new(variant, rounds, mix(seed, n as u64 * 977 + t));
                    // Leaf occupancy must follow the n^(2/3) schedule; give
                    // the depth enough headroom that the occupancy floor is
                    // what binds.
                    cfg.tree = Some(TreeParams {
                        max_depth: 10,
                        min_leaf_samples: TreeParams::default_for(n).min_leaf_samples,
                    });
                    let (model, _) = train(&binned, ds.y(), cfg).expect("train");
                    let mut mse = 0.0;
                    for k in 0..dgp.p() {
                        for &x in &eval {
                            let err = model.feature_effect(k, x) - (dgp.components[k](x) - means[k]);
                            mse += err * err;
                        }
                    }
                    mse / (dgp.p() * eval.len()) as f64
                })
                .sum();
            MseRatePoint {
                n,
                mse: total / trials as f64,
            }
        })
        .collect();

    let log_n: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let log_mse: Vec<f64> = points.iter().map(|p| p.mse.ln()).collect();
    MseRateReport {
        slope: ls_slope(&log_n, &log_mse),
        points,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RnormRatePoint {
    pub n: usize,
    pub median_r_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RnormRateReport {
    pub points: Vec<RnormRatePoint>,
    pub slope: f64,
}

/// Median influence norm across query points on 1D uniform data, against
/// the sample size; the asymptotic rate is `n^{-1/3}`.
pub fn rnorm_rate_experiment(
    n_grid: &[usize],
    trials: usize,
    rounds: usize,
    max_bins: usize,
    seed: u64,
) -> RnormRateReport {
    let dgp = SyntheticDgp::one_dim(0.5);
    let grid = query_grid(50);
    let points: Vec<RnormRatePoint> = n_grid
        .iter()
        .map(|&n| {
            let meds: Vec<f64> = (0..trials as u64)
                .into_par_iter()
                .map(|t| {
                    let ds = generate(&dgp, n, mix(seed, n as u64 * 31 + t));
                    let binned = bin_features(&ds, max_bins);
                    let mut cfg = TrainConfig::new(Variant::Parallel, rounds, mix(seed, n as u64 * 67 + t));
                    cfg.tree = Some(TreeParams {
                        max_depth: 10,
                        min_leaf_samples: TreeParams::default_for(n).min_leaf_samples,
                    });
                    let (model, acc) = train(&binned, ds.y(), cfg).expect("train");
                    let cache = build_cache(&acc, &binned, 1.0, model.c_e_inv, model.variant).expect("cache");
                    let norms: Vec<f64> =
                        grid.iter().map(|&x| cache.r_norm(0, model.bin_of(0, x))).collect();
                    median(&norms)
                })
                .collect();
            RnormRatePoint {
                n,
                median_r_norm: median(&meds),
            }
        })
        .collect();
    let log_n: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let log_r: Vec<f64> = points.iter().map(|p| p.median_r_norm.ln()).collect();
    RnormRateReport {
        slope: ls_slope(&log_n, &log_r),
        points,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OverfitPoint {
    pub round: usize,
    pub test_rmse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OverfitReport {
    pub curve: Vec<OverfitPoint>,
    /// Final test RMSE divided by the minimum over all checkpoints.
    pub final_min_ratio: f64,
}

fn rmse(pred: &[f64], y: &[f64]) -> f64 {
    let ss: f64 = pred.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum();
    (ss / y.len() as f64).sqrt()
}

/// Test-RMSE trajectory of the Boulevard ensemble over boosting rounds.
pub fn overfit_experiment(
    dgp: &SyntheticDgp,
    n: usize,
    checkpoints: &[usize],
    cfg: TrainConfig,
    seed: u64,
) -> OverfitReport {
    let train_ds = generate(dgp, n, mix(seed, 1));
    let test_ds = generate(dgp, n, mix(seed, 2));
    let binned = bin_features(&train_ds, 64);
    let mut trainer = Trainer::new(&binned, train_ds.y(), cfg).expect("trainer");
    let mut curve = Vec::new();
    for &b in checkpoints {
        trainer.run_to(b).expect("step");
        let pred: Vec<f64> = (0..test_ds.n_samples())
            .map(|i| trainer.predict(&test_ds.row(i)))
            .collect();
        curve.push(OverfitPoint {
            round: b,
            test_rmse: rmse(&pred, test_ds.y()),
        });
    }
    let min = curve.iter().map(|p| p.test_rmse).fold(f64::INFINITY, f64::min);
    let last = curve.last().expect("checkpoints nonempty").test_rmse;
    OverfitReport {
        curve,
        final_min_ratio: last / min,
    }
}

/// The unregularized contrast: plain additive boosting `f += λ t` (sum,
/// not average) with the same trees; returns the same RMSE trajectory.
#[allow(clippy::too_many_arguments)]
pub fn plain_sum_overfit(
    dgp: &SyntheticDgp,
    n: usize,
    checkpoints: &[usize],
    lambda: f64,
    subsample: f64,
    tree: TreeParams,
    max_bins: usize,
    seed: u64,
) -> OverfitReport {
    let train_ds = generate(dgp, n, mix(seed, 1));
    let test_ds = generate(dgp, n, mix(seed, 2));
    let binned = bin_features(&train_ds, max_bins);
    let y = train_ds.y();
    let n_tr = binned.n_samples();
    let p = binned.n_features();
    let ybar = y.iter().sum::<f64>() / n_tr as f64;

    let mut effects: Vec<Vec<f64>> = (0..p).map(|k| vec![0.0; binned.bins(k)]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 3));
    let mut curve = Vec::new();
    let max_round = *checkpoints.iter().max().unwrap();
    let mut next_cp = 0;
    for _round in 1..=max_round {
        for k in 0..p {
            let mask: Vec<bool> = (0..n_tr).map(|_| rng.gen::<f64>() < subsample).collect();
            let residual: Vec<f64> = (0..n_tr)
                .map(|i| {
                    let mut f = ybar;
                    for (kk, eff) in effects.iter().enumerate() {
                        f += eff[binned.bin_index(i, kk)];
                    }
                    y[i] - f
                })
                .collect();
            if let Ok(t) = fit_tree(&binned, k, &residual, &mask, &tree) {
                for (r, e) in effects[k].iter_mut().enumerate() {
                    *e += lambda * predict_tree(&t, r);
                }
            }
        }
        if checkpoints[next_cp] == _round {
            let pred: Vec<f64> = (0..test_ds.n_samples())
                .map(|i| {
                    let x = test_ds.row(i);
                    let mut f = ybar;
                    for (k, eff) in effects.iter().enumerate() {
                        f += eff[binned.bin_of(k, x[k])];
                    }
                    f
                })
                .collect();
            curve.push(OverfitPoint {
                round: _round,
                test_rmse: rmse(&pred, test_ds.y()),
            });
            next_cp += 1;
            if next_cp == checkpoints.len() {
                break;
            }
        }
    }
    let min = curve.iter().map(|p| p.test_rmse).fold(f64::INFINITY, f64::min);
    let last = curve.last().expect("checkpoints nonempty").test_rmse;
    OverfitReport {
        curve,
        final_min_ratio: last / min,
    }
}

/// Median wall-clock nanoseconds per influence-norm query.
pub fn median_query_nanos(model: &EnsembleModel, cache: &InferenceCache, queries: usize) -> f64 {
    let grid = query_grid(64);
    let p = model.n_features();
    let mut samples = Vec::with_capacity(queries);
    let mut sink = 0.0;
    for q in 0..queries {
        let x = grid[q % grid.len()];
        let k = q % p;
        let bin = model.bin_of(k, x);
        let start = std::time::Instant::now();
        sink += cache.r_norm(k, bin);
        samples.push(start.elapsed().as_nanos() as f64);
    }
    assert!(sink.is_finite());
    median(&samples)
}
