//! Univariate histogram regression trees.
//!
//! A tree here is nothing more than a partition of one feature's bins into
//! contiguous leaves plus a value per leaf. Fitting is greedy best-split on
//! bin boundaries with exact SSE reduction computed from per-bin sufficient
//! statistics (count, sum) over the round's subsample; split search is
//! `O(m)` per node. After fitting, trees are centered (the full-sample mean
//! `μ` is subtracted and handed to the intercept) and truncated to `[-M, M]`.
//!
//! Each tree also induces its bin-level structure pieces: the row-stochastic
//! co-leaf matrix `B` (entry `1/|L|` for bins sharing a leaf) and the
//! diagonal rescale `D` with `ξ_r = sqrt(|L(r)| / N_{L(r)})`, which together
//! reproduce the sample-space structure matrix as `(Z D) B (Z D)ᵀ`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::data::BinnedDataset;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("subsample selected no rows")]
    EmptySubsample,
    #[error("residual vector contains a non-finite value")]
    NonFiniteResidual,
}

/// Depth and leaf-occupancy limits for a single tree.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    /// Minimum full-sample count on each side of a split.
    pub min_leaf_samples: usize,
}

impl TreeParams {
    /// Defaults: depth 3, and leaves no smaller than `max(2, ⌈n^(2/3)⌉/4)`
    /// samples so leaf averages stay stable as `n` grows.
    pub fn default_for(n: usize) -> Self {
        let min_leaf = (((n as f64).powf(2.0 / 3.0).ceil() as usize) / 4).max(2);
        TreeParams {
            max_depth: 3,
            min_leaf_samples: min_leaf,
        }
    }
}

/// A fitted histogram tree: a leaf id per bin and a value per leaf.
/// Leaves partition the bin range into contiguous intervals.
#[derive(Debug, Clone)]
pub struct HistogramTree {
    pub feature: usize,
    pub leaf_of_bin: Vec<u32>,
    pub leaf_value: Vec<f64>,
    /// Bins per leaf, `|L|`.
    pub leaf_bin_count: Vec<u32>,
    /// Full-sample training count per leaf, `N_L`.
    pub leaf_sample_count: Vec<u32>,
    /// Full-sample mean subtracted by [`center_and_truncate`]; 0 until then.
    pub mu: f64,
    pub centered: bool,
}

impl HistogramTree {
    pub fn n_leaves(&self) -> usize {
        self.leaf_value.len()
    }

    pub fn n_bins(&self) -> usize {
        self.leaf_of_bin.len()
    }

    /// Per-bin value vector (the tree as a function of the bin index).
    pub fn bin_values(&self) -> Vec<f64> {
        self.leaf_of_bin
            .iter()
            .map(|&l| self.leaf_value[l as usize])
            .collect()
    }
}

/// Value of the tree at a bin; out-of-range indices clamp to the last bin.
pub fn predict_tree(tree: &HistogramTree, bin: usize) -> f64 {
    let b = bin.min(tree.n_bins() - 1);
    tree.leaf_value[tree.leaf_of_bin[b] as usize]
}

struct SplitSearch<'a> {
    cnt_sub: &'a [f64],
    sum_sub: &'a [f64],
    cnt_full: &'a [u32],
    min_leaf: usize,
}

impl SplitSearch<'_> {
    fn range_stats(&self, lo: usize, hi: usize) -> (f64, f64, usize) {
        let mut c = 0.0;
        let mut s = 0.0;
        let mut full = 0usize;
        for r in lo..hi {
            c += self.cnt_sub[r];
            s += self.sum_sub[r];
            full += self.cnt_full[r] as usize;
        }
        (c, s, full)
    }

    /// Best split position in `(lo, hi)` by SSE reduction, or None when no
    /// admissible split strictly reduces SSE.
    fn best_split(&self, lo: usize, hi: usize) -> Option<usize> {
        let (cnt, sum, _) = self.range_stats(lo, hi);
        let sq = |s: f64, c: f64| if c > 0.0 { s * s / c } else { 0.0 };
        let base = sq(sum, cnt);

        let mut best: Option<(usize, f64)> = None;
        let mut c_l = 0.0;
        let mut s_l = 0.0;
        let mut full_l = 0usize;
        let mut full_r: usize = (lo..hi).map(|r| self.cnt_full[r] as usize).sum();
        for s in (lo + 1)..hi {
            c_l += self.cnt_sub[s - 1];
            s_l += self.sum_sub[s - 1];
            full_l += self.cnt_full[s - 1] as usize;
            full_r -= self.cnt_full[s - 1] as usize;
            if full_l < self.min_leaf || full_r < self.min_leaf {
                continue;
            }
            let gain = sq(s_l, c_l) + sq(sum - s_l, cnt - c_l) - base;
            if gain > 0.0 && best.is_none_or(|(_, g)| gain > g) {
                best = Some((s, gain));
            }
        }
        best.map(|(s, _)| s)
    }
}

/// Fit a tree for feature `k` to `residuals` over the masked subsample.
///
/// Leaf values are subsample means of the residual; a leaf that received no
/// subsampled rows inherits its parent's mean. No centering or truncation
/// happens here.
pub fn fit_tree(
    binned: &BinnedDataset,
    k: usize,
    residuals: &[f64],
    subsample: &[bool],
    params: &TreeParams,
) -> Result<HistogramTree, TreeError> {
    let m = binned.bins(k);
    let idx = binned.bin_indices(k);
    assert_eq!(residuals.len(), binned.n_samples());
    assert_eq!(subsample.len(), binned.n_samples());

    let mut cnt_sub = vec![0.0; m];
    let mut sum_sub = vec![0.0; m];
    for i in 0..residuals.len() {
        if subsample[i] {
            let r = residuals[i];
            if !r.is_finite() {
                return Err(TreeError::NonFiniteResidual);
            }
            let b = idx[i] as usize;
            cnt_sub[b] += 1.0;
            sum_sub[b] += r;
        }
    }
    let total_cnt: f64 = cnt_sub.iter().sum();
    if total_cnt == 0.0 {
        return Err(TreeError::EmptySubsample);
    }

    let search = SplitSearch {
        cnt_sub: &cnt_sub,
        sum_sub: &sum_sub,
        cnt_full: binned.counts(k),
        min_leaf: params.min_leaf_samples,
    };

    // Depth-first left-to-right so leaf ids increase with the bin index.
    let mut leaf_of_bin = vec![0u32; m];
    let mut leaf_value = Vec::new();
    let mut stack = vec![(0usize, m, 0usize, sum_sub.iter().sum::<f64>() / total_cnt)];
    let mut ranges: Vec<(usize, usize, f64)> = Vec::new();
    while let Some((lo, hi, depth, parent_mean)) = stack.pop() {
        let (c, s, _) = search.range_stats(lo, hi);
        let mean = if c > 0.0 { s / c } else { parent_mean };
        let split = if depth < params.max_depth && hi - lo > 1 {
            search.best_split(lo, hi)
        } else {
            None
        };
        match split {
            Some(sp) => {
                // Push right first so the left child is processed first.
                stack.push((sp, hi, depth + 1, mean));
                stack.push((lo, sp, depth + 1, mean));
            }
            None => ranges.push((lo, hi, mean)),
        }
    }
    ranges.sort_by_key(|&(lo, _, _)| lo);
    for (leaf, &(lo, hi, mean)) in ranges.iter().enumerate() {
        for b in leaf_of_bin.iter_mut().take(hi).skip(lo) {
            *b = leaf as u32;
        }
        leaf_value.push(mean);
    }

    let (leaf_bin_count, leaf_sample_count) =
        leaf_stats(&leaf_of_bin, leaf_value.len(), binned.counts(k));
    Ok(HistogramTree {
        feature: k,
        leaf_of_bin,
        leaf_value,
        leaf_bin_count,
        leaf_sample_count,
        mu: 0.0,
        centered: false,
    })
}

/// Refit leaf values of a recorded structure on a fresh subsample, without
/// touching the partition (the structure-freezing mode). A leaf holding no
/// subsampled rows falls back to the overall subsample mean.
pub fn refit_leaf_values(
    leaf_of_bin: &[u32],
    binned: &BinnedDataset,
    k: usize,
    residuals: &[f64],
    subsample: &[bool],
) -> Result<HistogramTree, TreeError> {
    let n_leaves = leaf_of_bin.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    let idx = binned.bin_indices(k);
    let mut cnt = vec![0.0f64; n_leaves];
    let mut sum = vec![0.0f64; n_leaves];
    let mut tot_c = 0.0;
    let mut tot_s = 0.0;
    for i in 0..residuals.len() {
        if subsample[i] {
            let r = residuals[i];
            if !r.is_finite() {
                return Err(TreeError::NonFiniteResidual);
            }
            let l = leaf_of_bin[idx[i] as usize] as usize;
            cnt[l] += 1.0;
            sum[l] += r;
            tot_c += 1.0;
            tot_s += r;
        }
    }
    if tot_c == 0.0 {
        return Err(TreeError::EmptySubsample);
    }
    let overall = tot_s / tot_c;
    let leaf_value: Vec<f64> = (0..n_leaves)
        .map(|l| if cnt[l] > 0.0 { sum[l] / cnt[l] } else { overall })
        .collect();
    let (leaf_bin_count, leaf_sample_count) = leaf_stats(leaf_of_bin, n_leaves, binned.counts(k));
    Ok(HistogramTree {
        feature: k,
        leaf_of_bin: leaf_of_bin.to_vec(),
        leaf_value,
        leaf_bin_count,
        leaf_sample_count,
        mu: 0.0,
        centered: false,
    })
}

fn leaf_stats(leaf_of_bin: &[u32], n_leaves: usize, counts: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut bins = vec![0u32; n_leaves];
    let mut samples = vec![0u32; n_leaves];
    for (r, &l) in leaf_of_bin.iter().enumerate() {
        bins[l as usize] += 1;
        samples[l as usize] += counts[r];
    }
    (bins, samples)
}

/// Subtract the full-sample mean `μ = (1/n) Σ_i t(x_i)` from every leaf and
/// clip leaf values to `[-truncation, truncation]`. `μ` is computed over all
/// `n` training samples even when the tree was fit on a subsample.
pub fn center_and_truncate(
    mut tree: HistogramTree,
    binned: &BinnedDataset,
    truncation: f64,
) -> HistogramTree {
    let n = binned.n_samples() as f64;
    let mu: f64 = tree
        .leaf_value
        .iter()
        .zip(&tree.leaf_sample_count)
        .map(|(&v, &c)| v * c as f64)
        .sum::<f64>()
        / n;
    for v in tree.leaf_value.iter_mut() {
        *v = (*v - mu).clamp(-truncation, truncation);
    }
    tree.mu = mu;
    tree.centered = true;
    tree
}

/// The bin-level structure of a tree: the co-leaf matrix `B` and the
/// diagonal `D = diag(ξ_r)` with `ξ_r = sqrt(|L(r)| / N_{L(r)})`, both
/// defined from full-sample counts.
#[derive(Debug, Clone)]
pub struct BinStructure {
    pub leaf_of_bin: Vec<u32>,
    pub xi: Vec<f64>,
    pub leaf_bin_count: Vec<u32>,
    pub leaf_sample_count: Vec<u32>,
}

impl BinStructure {
    /// `B[i][j] = 1/|L(i)|` when bins `i`, `j` share a leaf, else 0.
    pub fn b_entry(&self, i: usize, j: usize) -> f64 {
        if self.leaf_of_bin[i] == self.leaf_of_bin[j] {
            1.0 / self.leaf_bin_count[self.leaf_of_bin[i] as usize] as f64
        } else {
            0.0
        }
    }

    pub fn n_bins(&self) -> usize {
        self.leaf_of_bin.len()
    }

    pub fn b_matrix(&self) -> DMatrix<f64> {
        let m = self.n_bins();
        DMatrix::from_fn(m, m, |i, j| self.b_entry(i, j))
    }

    /// Dense `D B D`; block-diagonal with `1/N_L` inside each leaf block.
    pub fn dbd_matrix(&self) -> DMatrix<f64> {
        let m = self.n_bins();
        DMatrix::from_fn(m, m, |i, j| {
            if self.leaf_of_bin[i] == self.leaf_of_bin[j] {
                1.0 / self.leaf_sample_count[self.leaf_of_bin[i] as usize] as f64
            } else {
                0.0
            }
        })
    }

    /// Accumulate `D B D` into a row-major `m × m` buffer.
    pub fn add_dbd_to(&self, acc: &mut [f64]) {
        let m = self.n_bins();
        assert_eq!(acc.len(), m * m);
        for i in 0..m {
            let li = self.leaf_of_bin[i];
            let w = 1.0 / self.leaf_sample_count[li as usize] as f64;
            for j in 0..m {
                if self.leaf_of_bin[j] == li {
                    acc[i * m + j] += w;
                }
            }
        }
    }
}

/// Extract the `B`/`D` structure of a fitted tree.
pub fn bin_structure(tree: &HistogramTree, binned: &BinnedDataset) -> BinStructure {
    debug_assert_eq!(tree.n_bins(), binned.bins(tree.feature));
    let xi = tree
        .leaf_of_bin
        .iter()
        .map(|&l| {
            let l = l as usize;
            (tree.leaf_bin_count[l] as f64 / tree.leaf_sample_count[l] as f64).sqrt()
        })
        .collect();
    BinStructure {
        leaf_of_bin: tree.leaf_of_bin.clone(),
        xi,
        leaf_bin_count: tree.leaf_bin_count.clone(),
        leaf_sample_count: tree.leaf_sample_count.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{bin_features, Dataset};

    fn binned_from(col: Vec<f64>, max_bins: usize) -> BinnedDataset {
        let n = col.len();
        let ds = Dataset::from_columns(vec!["x".into()], vec![col], vec![0.0; n]).unwrap();
        bin_features(&ds, max_bins)
    }

    fn all(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    /// Brute-force SSE of a 1-split tree over 4 bins, used as the oracle for
    /// the greedy fitter.
    fn brute_force_best_split(cnt: &[f64], sum: &[f64], sumsq: &[f64]) -> (usize, f64) {
        let m = cnt.len();
        let node_sse = |lo: usize, hi: usize| -> f64 {
            let c: f64 = cnt[lo..hi].iter().sum();
            let s: f64 = sum[lo..hi].iter().sum();
            let q: f64 = sumsq[lo..hi].iter().sum();
            if c > 0.0 {
                q - s * s / c
            } else {
                0.0
            }
        };
        let mut best = (0, f64::INFINITY);
        for s in 1..m {
            let sse = node_sse(0, s) + node_sse(s, m);
            if sse < best.1 {
                best = (s, sse);
            }
        }
        best
    }

    #[test]
    fn constant_residuals_give_single_leaf() {
        let binned = binned_from(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], 4);
        let params = TreeParams {
            max_depth: 3,
            min_leaf_samples: 2,
        };
        let r = vec![3.0; 8];
        let t = fit_tree(&binned, 0, &r, &all(8), &params).unwrap();
        assert_eq!(t.n_leaves(), 1);
        assert!((t.leaf_value[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn step_residuals_split_where_brute_force_says() {
        // 4 equal-count bins with residual bin means [0, 0, 10, 10]: the
        // oracle over all 3 candidate splits puts the cut between bins 1 and 2.
        let binned = binned_from(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], 4);
        assert_eq!(binned.bins(0), 4);
        let r = vec![0.0, 0.0, 0.0, 0.0, 10.0, 10.0, 10.0, 10.0];
        let params = TreeParams {
            max_depth: 1,
            min_leaf_samples: 2,
        };
        let t = fit_tree(&binned, 0, &r, &all(8), &params).unwrap();
        assert_eq!(t.n_leaves(), 2);
        assert_eq!(t.leaf_of_bin, vec![0, 0, 1, 1]);
        assert!((t.leaf_value[0]).abs() < 1e-12);
        assert!((t.leaf_value[1] - 10.0).abs() < 1e-12);

        let cnt = vec![2.0; 4];
        let sum = vec![0.0, 0.0, 20.0, 20.0];
        let sumsq = vec![0.0, 0.0, 200.0, 200.0];
        let (split, _) = brute_force_best_split(&cnt, &sum, &sumsq);
        assert_eq!(split, 2);
    }

    #[test]
    fn min_leaf_equal_to_n_forces_single_leaf() {
        let binned = binned_from(vec![1.0, 2.0, 3.0, 4.0], 4);
        let r = vec![-5.0, 0.0, 5.0, 10.0];
        let params = TreeParams {
            max_depth: 5,
            min_leaf_samples: 4,
        };
        let t = fit_tree(&binned, 0, &r, &all(4), &params).unwrap();
        assert_eq!(t.n_leaves(), 1);
    }

    #[test]
    fn empty_subsample_is_an_error() {
        let binned = binned_from(vec![1.0, 2.0, 3.0], 2);
        let params = TreeParams::default_for(3);
        let err = fit_tree(&binned, 0, &[1.0, 2.0, 3.0], &[false, false, false], &params);
        assert!(matches!(err, Err(TreeError::EmptySubsample)));
    }

    #[test]
    fn centering_and_truncation() {
        let binned = binned_from(vec![1.0, 2.0, 3.0, 4.0], 2);
        // Two equal-mass leaves valued -5 and +5; mu = 0, clip at 4.
        let tree = HistogramTree {
            feature: 0,
            leaf_of_bin: vec![0, 1],
            leaf_value: vec![-5.0, 5.0],
            leaf_bin_count: vec![1, 1],
            leaf_sample_count: vec![2, 2],
            mu: 0.0,
            centered: false,
        };
        let t = center_and_truncate(tree, &binned, 4.0);
        assert_eq!(t.mu, 0.0);
        assert_eq!(t.leaf_value, vec![-4.0, 4.0]);

        // Single leaf valued 3: mu = 3, centered value 0.
        let tree = HistogramTree {
            feature: 0,
            leaf_of_bin: vec![0, 0],
            leaf_value: vec![3.0],
            leaf_bin_count: vec![2],
            leaf_sample_count: vec![4],
            mu: 0.0,
            centered: false,
        };
        let t = center_and_truncate(tree, &binned, f64::INFINITY);
        assert!((t.mu - 3.0).abs() < 1e-12);
        assert!(t.leaf_value[0].abs() < 1e-12);

        // Values {-1, +1} under a loose cap are unchanged.
        let tree = HistogramTree {
            feature: 0,
            leaf_of_bin: vec![0, 1],
            leaf_value: vec![-1.0, 1.0],
            leaf_bin_count: vec![1, 1],
            leaf_sample_count: vec![2, 2],
            mu: 0.0,
            centered: false,
        };
        let t = center_and_truncate(tree, &binned, 10.0);
        assert_eq!(t.leaf_value, vec![-1.0, 1.0]);
    }

    #[test]
    fn centered_tree_has_zero_training_mean() {
        let col: Vec<f64> = (0..40).map(|i| i as f64 * 0.17).collect();
        let binned = binned_from(col.clone(), 8);
        let r: Vec<f64> = col.iter().map(|&x| (x * 0.9).sin() + 0.3).collect();
        let params = TreeParams {
            max_depth: 3,
            min_leaf_samples: 2,
        };
        let t = fit_tree(&binned, 0, &r, &all(40), &params).unwrap();
        let t = center_and_truncate(t, &binned, f64::INFINITY);
        let mean: f64 = (0..40)
            .map(|i| predict_tree(&t, binned.bin_index(i, 0)))
            .sum::<f64>()
            / 40.0;
        assert!(mean.abs() < 1e-10, "mean {mean}");
    }

    #[test]
    fn structure_single_leaf() {
        let binned = binned_from(vec![5.0; 6], 255);
        let params = TreeParams::default_for(6);
        let t = fit_tree(&binned, 0, &[1.0; 6], &all(6), &params).unwrap();
        let s = bin_structure(&t, &binned);
        assert_eq!(s.b_matrix(), DMatrix::from_element(1, 1, 1.0));
        assert!((s.xi[0] - (1.0 / 6.0f64).sqrt()).abs() < 1e-15);
        assert!((s.dbd_matrix()[(0, 0)] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn structure_shared_and_singleton_leaves() {
        // Hand evaluation of the defining formulas.
        // m = 2 bins in one shared leaf, counts [2, 2].
        let s = BinStructure {
            leaf_of_bin: vec![0, 0],
            xi: vec![(2.0 / 4.0f64).sqrt(); 2],
            leaf_bin_count: vec![2],
            leaf_sample_count: vec![4],
        };
        let b = s.b_matrix();
        assert_eq!(b, DMatrix::from_element(2, 2, 0.5));

        // m = 2 singleton leaves, counts [3, 1]: B = I, xi = [sqrt(1/3), 1].
        let s = BinStructure {
            leaf_of_bin: vec![0, 1],
            xi: vec![(1.0 / 3.0f64).sqrt(), 1.0],
            leaf_bin_count: vec![1, 1],
            leaf_sample_count: vec![3, 1],
        };
        assert_eq!(s.b_matrix(), DMatrix::identity(2, 2));
        assert!((s.xi[0] - (1.0 / 3.0f64).sqrt()).abs() < 1e-15);
        assert_eq!(s.xi[1], 1.0);
    }

    #[test]
    fn b_rows_sum_to_one() {
        let col: Vec<f64> = (0..50).map(|i| (i as f64 * 0.73).sin()).collect();
        let binned = binned_from(col.clone(), 16);
        let r: Vec<f64> = col.iter().map(|&x| x * x).collect();
        let params = TreeParams {
            max_depth: 4,
            min_leaf_samples: 2,
        };
        let t = fit_tree(&binned, 0, &r, &all(50), &params).unwrap();
        let s = bin_structure(&t, &binned);
        let b = s.b_matrix();
        for i in 0..b.nrows() {
            let sum: f64 = b.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_is_constant_within_leaf_and_clamps() {
        let t = HistogramTree {
            feature: 0,
            leaf_of_bin: vec![0, 0, 1, 1],
            leaf_value: vec![-4.0, 4.0],
            leaf_bin_count: vec![2, 2],
            leaf_sample_count: vec![2, 2],
            mu: 0.0,
            centered: true,
        };
        assert_eq!(predict_tree(&t, 0), -4.0);
        assert_eq!(predict_tree(&t, 1), -4.0);
        assert_eq!(predict_tree(&t, 2), 4.0);
        assert_eq!(predict_tree(&t, 99), 4.0);
    }
}
