//! Boulevard-regularized additive boosting.
//!
//! Three training loops share one round shape: compute residuals, fit a
//! centered and truncated histogram tree per feature on a Bernoulli(ξ)
//! subsample, then fold the tree into the running average
//! `f_b = ((b-1)/b) f_{b-1} + (w/b) t̃_b`. They differ in the residual and
//! the averaging weight `w`:
//!
//! - `Parallel`: all `p` residual vectors come from the round-start
//!   snapshot, `w = λ`, output rescaled by `(1+λ)/λ`.
//! - `LeaveOneOut`: feature `k`'s residual excludes its own effect,
//!   `w = 1`, no rescaling.
//! - `RandomCyclic`: one uniformly drawn feature per round, `w = λ`,
//!   rescaled by `(1+λ)/λ`; all effects shrink by `(b-1)/b` every round so
//!   the ensemble stays a global-round average.
//!
//! The tree means `μ_{b,k}` are absorbed into the intercept with the same
//! `w/b` averaging weights as the trees; the centered ensemble plus this
//! intercept is then identical to boosting the uncentered trees, and
//! `β̂_b → ȳ`. Accumulating `μ` at full strength instead lets subsample
//! noise in the per-round means compound across rounds once `p ≥ 2`.
//!
//! After the burn-in, every round also deposits its `D B D` bin-kernel into
//! a per-feature running mean; those means become the `H` of the inference
//! cache. With structure freezing on, post-burn-in trees reuse structures
//! drawn uniformly from the burn-in pool and only refit leaf values, which
//! makes the expected kernel an exact, enumerable average over the pool.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{bin_of, BinnedDataset};
use crate::stats::sample_sd;
use crate::trees::{
    bin_structure, center_and_truncate, fit_tree, refit_leaf_values, HistogramTree, TreeError,
    TreeParams,
};

#[derive(Debug, Error)]
pub enum BoostError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("tree fit failed at round {round}, feature {feature}: {source}")]
    Tree {
        round: usize,
        feature: usize,
        #[source]
        source: TreeError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// All features per round from a shared residual snapshot.
    Parallel,
    /// Backfitting-like: feature k's residual keeps k's own effect out.
    LeaveOneOut,
    /// One uniformly sampled feature per round.
    RandomCyclic,
}

impl Variant {
    /// Output rescale `c_E⁻¹`: `(1+λ)/λ` for the shrunk variants, 1 for
    /// leave-one-out.
    pub fn rescale(self, lambda: f64) -> f64 {
        match self {
            Variant::Parallel | Variant::RandomCyclic => (1.0 + lambda) / lambda,
            Variant::LeaveOneOut => 1.0,
        }
    }

    /// Boulevard averaging weight `w` in `f_b = ((b-1)/b) f + (w/b) t̃`.
    fn weight(self, lambda: f64) -> f64 {
        match self {
            Variant::Parallel | Variant::RandomCyclic => lambda,
            Variant::LeaveOneOut => 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Learning rate λ in (0, 1]. Ignored by `LeaveOneOut` (weight 1).
    pub lambda: f64,
    /// Boosting rounds B.
    pub rounds: usize,
    /// Per-round per-feature Bernoulli subsample rate ξ in (0, 1].
    pub subsample: f64,
    /// Leaf truncation level M; `None` means 4 × sd(y).
    pub truncation: Option<f64>,
    /// Tree limits; `None` means [`TreeParams::default_for`].
    pub tree: Option<TreeParams>,
    /// Rounds excluded from kernel accumulation; `None` means B/5.
    pub burn_in: Option<usize>,
    /// Non-adaptivity mode: after burn-in, draw structures uniformly from
    /// the burn-in pool and refit only leaf values.
    pub freeze_structures: bool,
    /// Keep per-sample out-of-bag sums for σ̂ estimation.
    pub record_oob: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(variant: Variant, rounds: usize, seed: u64) -> Self {
        TrainConfig {
            variant,
            lambda: 1.0,
            rounds,
            subsample: 0.8,
            truncation: None,
            tree: None,
            burn_in: None,
            freeze_structures: false,
            record_oob: true,
            seed,
        }
    }

    fn validate(&self, n: usize) -> Result<(), BoostError> {
        if self.rounds == 0 {
            return Err(BoostError::BadConfig("rounds must be >= 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(BoostError::BadConfig(format!(
                "lambda must be in (0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(BoostError::BadConfig(format!(
                "subsample must be in (0, 1], got {}",
                self.subsample
            )));
        }
        if self.freeze_structures && self.burn_in_rounds() == 0 {
            return Err(BoostError::BadConfig(
                "structure freezing needs a burn-in of at least 1 round".into(),
            ));
        }
        if n < 2 {
            return Err(BoostError::BadConfig("need at least 2 samples".into()));
        }
        Ok(())
    }

    pub fn burn_in_rounds(&self) -> usize {
        self.burn_in.unwrap_or(self.rounds / 5)
    }
}

/// Per-sample out-of-bag accumulators: for each feature, the sum and count
/// of centered-tree values over the rounds where the sample was not drawn.
#[derive(Debug, Clone)]
pub struct OobRecord {
    pub sum: Vec<Vec<f64>>,
    pub count: Vec<Vec<u32>>,
}

/// A trained Boulevard ensemble. Everything needed for prediction lives
/// here; the inference cache is built separately from the kernel
/// accumulator.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub variant: Variant,
    pub lambda: f64,
    /// Output rescale `c_E⁻¹` applied to effects at prediction time.
    pub c_e_inv: f64,
    pub rounds: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub feature_names: Vec<String>,
    /// Bin edges per feature, copied from the training binning.
    pub edges: Vec<Vec<f64>>,
    pub value_range: Vec<(f64, f64)>,
    /// Raw Boulevard-averaged per-bin values `f_B⁽ᵏ⁾` (unrescaled).
    pub effects: Vec<Vec<f64>>,
    /// `β̂_B`.
    pub intercept: f64,
    pub ybar: f64,
    /// Degrees-of-freedom proxy `1 + Σ_k (average leaf count)`.
    pub df_proxy: f64,
    pub avg_leaves: Vec<f64>,
    /// Structure pools per feature (leaf-of-bin arrays); populated when
    /// structure freezing was on. Not persisted.
    pub structure_pools: Vec<Vec<Vec<u32>>>,
    /// Out-of-bag accumulators when recorded. Not persisted.
    pub oob: Option<OobRecord>,
    pub config: TrainConfig,
}

impl EnsembleModel {
    pub fn n_features(&self) -> usize {
        self.effects.len()
    }

    pub fn bin_of(&self, k: usize, x: f64) -> usize {
        bin_of(&self.edges[k], x)
    }

    /// Rescaled shape-function value `c_E⁻¹ f_B⁽ᵏ⁾(x_k)`.
    pub fn feature_effect(&self, k: usize, x_k: f64) -> f64 {
        self.c_e_inv * self.effects[k][self.bin_of(k, x_k)]
    }

    /// Full prediction `β̂_B + c_E⁻¹ Σ_k f_B⁽ᵏ⁾(x⁽ᵏ⁾)`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n_features());
        let mut acc = self.intercept;
        for (k, &v) in x.iter().enumerate() {
            acc += self.c_e_inv * self.effects[k][self.bin_of(k, v)];
        }
        acc
    }

    /// Unrescaled training fit `β̂_B + Σ_k f_B⁽ᵏ⁾` on the training rows —
    /// the quantity that converges to the kernel ridge fixed point.
    pub fn fitted_raw(&self, binned: &BinnedDataset) -> Vec<f64> {
        fitted_from(&self.effects, self.intercept, binned)
    }

    /// Rescaled in-sample predictions on the training rows.
    pub fn fitted_rescaled(&self, binned: &BinnedDataset) -> Vec<f64> {
        (0..binned.n_samples())
            .map(|i| {
                let mut acc = self.intercept;
                for k in 0..self.n_features() {
                    acc += self.c_e_inv * self.effects[k][binned.bin_index(i, k)];
                }
                acc
            })
            .collect()
    }

    /// Out-of-bag in-sample predictions (rescaled). Samples that were never
    /// out of bag for some feature fall back to the in-bag effect there.
    pub fn fitted_oob(&self, binned: &BinnedDataset) -> Option<Vec<f64>> {
        let oob = self.oob.as_ref()?;
        let w = self.variant.weight(self.lambda);
        Some(
            (0..binned.n_samples())
                .map(|i| {
                    let mut acc = self.intercept;
                    for k in 0..self.n_features() {
                        let f = if oob.count[k][i] > 0 {
                            w * oob.sum[k][i] / oob.count[k][i] as f64
                        } else {
                            self.effects[k][binned.bin_index(i, k)]
                        };
                        acc += self.c_e_inv * f;
                    }
                    acc
                })
                .collect(),
        )
    }
}

fn fitted_from(effects: &[Vec<f64>], intercept: f64, binned: &BinnedDataset) -> Vec<f64> {
    let mut out = vec![intercept; binned.n_samples()];
    for (k, eff) in effects.iter().enumerate() {
        let idx = binned.bin_indices(k);
        for (o, &b) in out.iter_mut().zip(idx) {
            *o += eff[b as usize];
        }
    }
    out
}

/// Running per-feature means of `D⁽ᵏ⁾ B⁽ᵏ⁾ D⁽ᵏ⁾` over post-burn-in rounds.
#[derive(Debug, Clone)]
pub struct KernelAccumulator {
    /// Row-major `m_k × m_k` mean per feature.
    mean_dbd: Vec<Vec<f64>>,
    bins: Vec<usize>,
    rounds_counted: Vec<usize>,
}

impl KernelAccumulator {
    pub fn n_features(&self) -> usize {
        self.mean_dbd.len()
    }

    pub fn bins(&self, k: usize) -> usize {
        self.bins[k]
    }

    pub fn rounds_counted(&self, k: usize) -> usize {
        self.rounds_counted[k]
    }

    /// Mean `E[D⁽ᵏ⁾B⁽ᵏ⁾D⁽ᵏ⁾]` estimate as a dense matrix.
    pub fn mean_dbd_matrix(&self, k: usize) -> nalgebra::DMatrix<f64> {
        let m = self.bins[k];
        nalgebra::DMatrix::from_fn(m, m, |i, j| self.mean_dbd[k][i * m + j])
    }
}

/// The exact Boulevard average `f_b = ((b-1)/b) f_{b-1} + (λ/b) t̃_b`,
/// applied entrywise to per-bin value arrays.
pub fn boulevard_update(prev: &[f64], tree_values: &[f64], b: usize, lambda: f64) -> Vec<f64> {
    assert!(b >= 1);
    assert_eq!(prev.len(), tree_values.len());
    let bf = b as f64;
    prev.iter()
        .zip(tree_values)
        .map(|(&f, &t)| (bf - 1.0) / bf * f + lambda / bf * t)
        .collect()
}

struct FeatureRound {
    tree: HistogramTree,
    dbd: Option<Vec<f64>>,
    oob_mask: Option<Vec<bool>>,
}

/// Incremental trainer; [`train`] drives it to completion, experiments can
/// step it to take mid-run snapshots.
pub struct Trainer<'a> {
    binned: &'a BinnedDataset,
    y: &'a [f64],
    cfg: TrainConfig,
    tree_params: TreeParams,
    truncation: f64,
    burn_in: usize,
    b: usize,
    effects: Vec<Vec<f64>>,
    offset: f64,
    ybar: f64,
    dbd_sum: Vec<Vec<f64>>,
    dbd_rounds: Vec<usize>,
    pools: Vec<Vec<Vec<u32>>>,
    leaves_sum: Vec<f64>,
    leaves_rounds: Vec<usize>,
    oob_sum: Vec<Vec<f64>>,
    oob_count: Vec<Vec<u32>>,
}

impl<'a> Trainer<'a> {
    pub fn new(binned: &'a BinnedDataset, y: &'a [f64], cfg: TrainConfig) -> Result<Self, BoostError> {
        let n = binned.n_samples();
        assert_eq!(y.len(), n);
        cfg.validate(n)?;
        let p = binned.n_features();
        let tree_params = cfg.tree.unwrap_or_else(|| TreeParams::default_for(n));
        let truncation = cfg.truncation.unwrap_or_else(|| 4.0 * sample_sd(y));
        let truncation = if truncation > 0.0 { truncation } else { f64::INFINITY };
        let ybar = y.iter().sum::<f64>() / n as f64;
        let (oob_sum, oob_count) = if cfg.record_oob {
            (vec![vec![0.0; n]; p], vec![vec![0u32; n]; p])
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Trainer {
            effects: (0..p).map(|k| vec![0.0; binned.bins(k)]).collect(),
            offset: 0.0,
            ybar,
            dbd_sum: (0..p).map(|k| vec![0.0; binned.bins(k) * binned.bins(k)]).collect(),
            dbd_rounds: vec![0; p],
            pools: vec![Vec::new(); p],
            leaves_sum: vec![0.0; p],
            leaves_rounds: vec![0; p],
            burn_in: cfg.burn_in_rounds(),
            tree_params,
            truncation,
            b: 0,
            binned,
            y,
            cfg,
            oob_sum,
            oob_count,
        })
    }

    pub fn rounds_done(&self) -> usize {
        self.b
    }

    pub fn intercept(&self) -> f64 {
        self.ybar + self.offset
    }

    /// Rescaled prediction from the current state.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let resc = self.cfg.variant.rescale(self.cfg.lambda);
        let mut acc = self.intercept();
        for (k, &v) in x.iter().enumerate() {
            acc += resc * self.effects[k][self.binned.bin_of(k, v)];
        }
        acc
    }

    fn rng_for(&self, round: usize, feature: usize, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix3(
            self.cfg.seed,
            round as u64,
            (feature as u64) << 8 | salt,
        ))
    }

    /// One round of feature `k` against the given residual: subsample, fit
    /// or redraw a structure, center, truncate.
    fn fit_feature(
        &self,
        round: usize,
        k: usize,
        residual: &[f64],
    ) -> Result<FeatureRound, BoostError> {
        let n = self.binned.n_samples();
        let mut rng = self.rng_for(round, k, 0);
        let mask: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < self.cfg.subsample).collect();

        let frozen = self.cfg.freeze_structures && round > self.burn_in;
        let tree = if frozen {
            let pool = &self.pools[k];
            let pick = rng.gen_range(0..pool.len());
            refit_leaf_values(&pool[pick], self.binned, k, residual, &mask)
        } else {
            fit_tree(self.binned, k, residual, &mask, &self.tree_params)
        }
        .map_err(|source| BoostError::Tree { round, feature: k, source })?;
        let tree = center_and_truncate(tree, self.binned, self.truncation);

        let dbd = if round > self.burn_in {
            let m = self.binned.bins(k);
            let mut buf = vec![0.0; m * m];
            bin_structure(&tree, self.binned).add_dbd_to(&mut buf);
            Some(buf)
        } else {
            None
        };
        let oob_mask = if self.cfg.record_oob { Some(mask) } else { None };
        Ok(FeatureRound { tree, dbd, oob_mask })
    }

    fn merge_feature(&mut self, round: usize, k: usize, fr: FeatureRound) -> f64 {
        let w = self.cfg.variant.weight(self.cfg.lambda);
        let bf = round as f64;
        let values = fr.tree.bin_values();
        for (f, &t) in self.effects[k].iter_mut().zip(&values) {
            *f = (bf - 1.0) / bf * *f + w / bf * t;
        }
        if let Some(dbd) = fr.dbd {
            for (a, d) in self.dbd_sum[k].iter_mut().zip(&dbd) {
                *a += d;
            }
            self.dbd_rounds[k] += 1;
        }
        if let Some(mask) = fr.oob_mask {
            let idx = self.binned.bin_indices(k);
            for i in 0..mask.len() {
                if !mask[i] {
                    self.oob_sum[k][i] += values[idx[i] as usize];
                    self.oob_count[k][i] += 1;
                }
            }
        }
        if self.cfg.freeze_structures && round <= self.burn_in {
            self.pools[k].push(fr.tree.leaf_of_bin.clone());
        }
        self.leaves_sum[k] += fr.tree.n_leaves() as f64;
        self.leaves_rounds[k] += 1;
        fr.tree.mu
    }

    /// Run one boosting round.
    pub fn step(&mut self) -> Result<(), BoostError> {
        let round = self.b + 1;
        let p = self.binned.n_features();
        let w = self.cfg.variant.weight(self.cfg.lambda);
        let intercept = self.intercept();
        let fitted = fitted_from(&self.effects, intercept, self.binned);

        let mu_total = match self.cfg.variant {
            Variant::Parallel => {
                let residual: Vec<f64> = self.y.iter().zip(&fitted).map(|(&y, &f)| y - f).collect();
                let rounds: Vec<FeatureRound> = (0..p)
                    .into_par_iter()
                    .map(|k| self.fit_feature(round, k, &residual))
                    .collect::<Result<_, _>>()?;
                let mut mu_total = 0.0;
                for (k, fr) in rounds.into_iter().enumerate() {
                    mu_total += self.merge_feature(round, k, fr);
                }
                mu_total
            }
            Variant::LeaveOneOut => {
                // r_{i,k} = y_i - β̂ - Σ_{ℓ≠k} f⁽ℓ⁾ = (y_i - fitted_i) + f⁽ᵏ⁾.
                let base: Vec<f64> = self.y.iter().zip(&fitted).map(|(&y, &f)| y - f).collect();
                let rounds: Vec<FeatureRound> = (0..p)
                    .into_par_iter()
                    .map(|k| {
                        let idx = self.binned.bin_indices(k);
                        let residual: Vec<f64> = base
                            .iter()
                            .zip(idx)
                            .map(|(&r, &b)| r + self.effects[k][b as usize])
                            .collect();
                        self.fit_feature(round, k, &residual)
                    })
                    .collect::<Result<_, _>>()?;
                let mut mu_total = 0.0;
                for (k, fr) in rounds.into_iter().enumerate() {
                    mu_total += self.merge_feature(round, k, fr);
                }
                mu_total
            }
            Variant::RandomCyclic => {
                let mut pick_rng = ChaCha8Rng::seed_from_u64(mix3(self.cfg.seed, round as u64, 0xFEED));
                let k = pick_rng.gen_range(0..p);
                let residual: Vec<f64> = self.y.iter().zip(&fitted).map(|(&y, &f)| y - f).collect();
                let fr = self.fit_feature(round, k, &residual)?;
                // Unchosen features still shrink: the ensemble is an
                // average over all rounds, with zero contributions on the
                // rounds a feature was not selected.
                let bf = round as f64;
                for (kk, eff) in self.effects.iter_mut().enumerate() {
                    if kk != k {
                        for f in eff.iter_mut() {
                            *f *= (bf - 1.0) / bf;
                        }
                    }
                }
                self.merge_feature(round, k, fr)
            }
        };

        let bf = round as f64;
        self.offset = (bf - 1.0) / bf * self.offset + w / bf * mu_total;
        self.b = round;
        Ok(())
    }

    pub fn run_to(&mut self, rounds: usize) -> Result<(), BoostError> {
        while self.b < rounds {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(EnsembleModel, KernelAccumulator), BoostError> {
        let total = self.cfg.rounds;
        self.run_to(total)?;
        let p = self.binned.n_features();
        let mean_dbd: Vec<Vec<f64>> = (0..p)
            .map(|k| {
                let r = self.dbd_rounds[k].max(1) as f64;
                self.dbd_sum[k].iter().map(|&s| s / r).collect()
            })
            .collect();
        let acc = KernelAccumulator {
            mean_dbd,
            bins: (0..p).map(|k| self.binned.bins(k)).collect(),
            rounds_counted: self.dbd_rounds.clone(),
        };
        let avg_leaves: Vec<f64> = (0..p)
            .map(|k| self.leaves_sum[k] / self.leaves_rounds[k].max(1) as f64)
            .collect();
        let df_proxy = 1.0 + avg_leaves.iter().sum::<f64>();
        let oob = if self.cfg.record_oob {
            Some(OobRecord {
                sum: self.oob_sum,
                count: self.oob_count,
            })
        } else {
            None
        };
        let model = EnsembleModel {
            variant: self.cfg.variant,
            lambda: self.cfg.lambda,
            c_e_inv: self.cfg.variant.rescale(self.cfg.lambda),
            rounds: total,
            burn_in: self.burn_in,
            seed: self.cfg.seed,
            feature_names: self.binned.feature_names().to_vec(),
            edges: self.binned.all_edges().to_vec(),
            value_range: (0..p).map(|k| self.binned.value_range(k)).collect(),
            effects: self.effects,
            intercept: self.ybar + self.offset,
            ybar: self.ybar,
            df_proxy,
            avg_leaves,
            structure_pools: self.pools,
            oob,
            config: self.cfg,
        };
        Ok((model, acc))
    }
}

/// Train an ensemble with the given config; returns the model and the
/// kernel accumulator feeding [`crate::inference::build_cache`].
pub fn train(
    binned: &BinnedDataset,
    y: &[f64],
    cfg: TrainConfig,
) -> Result<(EnsembleModel, KernelAccumulator), BoostError> {
    Trainer::new(binned, y, cfg)?.finish()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn mix3(a: u64, b: u64, c: u64) -> u64 {
    splitmix(splitmix(splitmix(a) ^ b) ^ c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{bin_features, Dataset};
    use rand::{Rng, SeedableRng};

    fn uniform_dataset(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| (0..p).map(|k| (cols[k][i] * 3.0).sin()).sum::<f64>() + 0.1 * rng.gen::<f64>())
            .collect();
        let names = (0..p).map(|k| format!("x{}", k + 1)).collect();
        Dataset::from_columns(names, cols, y).unwrap()
    }

    #[test]
    fn boulevard_arithmetic() {
        assert_eq!(boulevard_update(&[0.0], &[5.0], 1, 1.0), vec![5.0]);
        assert_eq!(boulevard_update(&[5.0], &[1.0], 2, 1.0), vec![3.0]);
        assert_eq!(boulevard_update(&[0.0], &[4.0], 1, 0.5), vec![2.0]);
    }

    #[test]
    fn constant_response_trains_to_zero_effects() {
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let col: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let ds = Dataset::from_columns(vec!["x1".into()], vec![col], vec![7.0; n]).unwrap();
        let binned = bin_features(&ds, 8);
        let cfg = TrainConfig::new(Variant::Parallel, 50, 3);
        let (model, _) = train(&binned, ds.y(), cfg).unwrap();
        assert!((model.intercept - 7.0).abs() < 1e-12);
        for eff in &model.effects {
            assert!(eff.iter().all(|v| v.abs() < 1e-12));
        }
        assert_eq!(model.predict(&[0.3]), 7.0);
    }

    #[test]
    fn rescale_factors_per_variant() {
        assert_eq!(Variant::Parallel.rescale(1.0), 2.0);
        assert_eq!(Variant::RandomCyclic.rescale(0.5), 3.0);
        assert_eq!(Variant::LeaveOneOut.rescale(1.0), 1.0);
    }

    #[test]
    fn predict_applies_rescale() {
        // One feature, stored effect 0.5 at every bin, β̂ = 2.
        let ds = uniform_dataset(10, 1, 5);
        let binned = bin_features(&ds, 4);
        let cfg = TrainConfig::new(Variant::Parallel, 1, 0);
        let (mut model, _) = train(&binned, ds.y(), cfg).unwrap();
        model.intercept = 2.0;
        for v in model.effects[0].iter_mut() {
            *v = 0.5;
        }
        assert!((model.predict(&[0.5]) - 3.0).abs() < 1e-12);
        assert!((model.feature_effect(0, 0.5) - 1.0).abs() < 1e-12);
        model.c_e_inv = 1.0; // leave-one-out convention
        assert!((model.predict(&[0.5]) - 2.5).abs() < 1e-12);
        assert!((model.feature_effect(0, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let ds = uniform_dataset(120, 2, 9);
        let binned = bin_features(&ds, 16);
        let cfg = TrainConfig::new(Variant::Parallel, 60, 42);
        let (m1, _) = train(&binned, ds.y(), cfg.clone()).unwrap();
        let (m2, _) = train(&binned, ds.y(), cfg).unwrap();
        assert_eq!(m1.intercept.to_bits(), m2.intercept.to_bits());
        for (a, b) in m1.effects.iter().zip(&m2.effects) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn intercept_tracks_ybar_and_effects_center() {
        let ds = uniform_dataset(300, 2, 11);
        let binned = bin_features(&ds, 32);
        let sd = sample_sd(ds.y());
        for variant in [Variant::Parallel, Variant::LeaveOneOut, Variant::RandomCyclic] {
            let cfg = TrainConfig::new(variant, 2000, 7);
            let (model, _) = train(&binned, ds.y(), cfg).unwrap();
            let ybar = ds.y().iter().sum::<f64>() / 300.0;
            assert!(
                (model.intercept - ybar).abs() <= 0.05 * sd,
                "{variant:?}: intercept {} vs ybar {ybar}",
                model.intercept
            );
            // Per-feature training-set mean of rescaled effects ≈ 0.
            for k in 0..2 {
                let mean: f64 = (0..300)
                    .map(|i| model.c_e_inv * model.effects[k][binned.bin_index(i, k)])
                    .sum::<f64>()
                    / 300.0;
                assert!(mean.abs() <= 1e-2 * sd, "{variant:?} feature {k}: mean {mean}");
            }
        }
    }

    #[test]
    fn kernel_accumulator_counts_post_burn_in_rounds() {
        let ds = uniform_dataset(80, 2, 13);
        let binned = bin_features(&ds, 8);
        let mut cfg = TrainConfig::new(Variant::Parallel, 50, 21);
        cfg.burn_in = Some(10);
        let (_, acc) = train(&binned, ds.y(), cfg).unwrap();
        assert_eq!(acc.rounds_counted(0), 40);
        assert_eq!(acc.rounds_counted(1), 40);
        // Accumulated means are symmetric PSD with spectral norm <= 1.
        for k in 0..2 {
            let m = acc.mean_dbd_matrix(k);
            assert!((m.clone() - m.transpose()).amax() < 1e-12);
            let (lo, hi) = crate::linalg::eig_range_sym(&m);
            assert!(lo > -1e-10, "negative eigenvalue {lo}");
            assert!(hi <= 1.0 + 1e-8, "spectral norm {hi}");
        }
    }

    #[test]
    fn frozen_pools_recorded_during_burn_in() {
        let ds = uniform_dataset(60, 2, 17);
        let binned = bin_features(&ds, 8);
        let mut cfg = TrainConfig::new(Variant::Parallel, 30, 5);
        cfg.burn_in = Some(12);
        cfg.freeze_structures = true;
        let (model, _) = train(&binned, ds.y(), cfg).unwrap();
        assert_eq!(model.structure_pools[0].len(), 12);
        assert_eq!(model.structure_pools[1].len(), 12);
    }

    #[test]
    fn effects_bounded_by_lambda_times_truncation() {
        let ds = uniform_dataset(100, 2, 23);
        let binned = bin_features(&ds, 16);
        let mut cfg = TrainConfig::new(Variant::Parallel, 200, 2);
        cfg.lambda = 0.5;
        cfg.truncation = Some(0.2);
        let (model, _) = train(&binned, ds.y(), cfg).unwrap();
        for eff in &model.effects {
            for &v in eff {
                assert!(v.abs() <= 0.5 * 0.2 + 1e-12);
            }
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let ds = uniform_dataset(10, 1, 1);
        let binned = bin_features(&ds, 4);
        let mut cfg = TrainConfig::new(Variant::Parallel, 0, 0);
        assert!(train(&binned, ds.y(), cfg.clone()).is_err());
        cfg.rounds = 10;
        cfg.lambda = 1.5;
        assert!(train(&binned, ds.y(), cfg.clone()).is_err());
        cfg.lambda = 1.0;
        cfg.subsample = 0.0;
        assert!(train(&binned, ds.y(), cfg.clone()).is_err());
        cfg.subsample = 0.8;
        cfg.freeze_structures = true;
        cfg.burn_in = Some(0);
        assert!(train(&binned, ds.y(), cfg).is_err());
    }
}
