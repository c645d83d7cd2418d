//! Dense sample-space oracles.
//!
//! Everything here works with explicit `n × n` matrices and exists to be
//! checked against, not to be fast: structure matrices straight from the
//! leaf co-membership definition, Monte-Carlo expected kernels
//! `K⁽ᵏ⁾ = E[S⁽ᵏ⁾]`, the kernel ridge fixed points both training loops
//! converge to, and exact influence vectors `r⁽ᵏ⁾(x)` whose norms the
//! bin-space cache must reproduce. A size cap keeps the `O(n³)` solves
//! sub-second.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::boost::Variant;
use crate::data::BinnedDataset;
use crate::linalg::{center_columns, center_vector, count_unit_eigenvalues, sym_pinv};
use crate::trees::HistogramTree;

/// Eigenvalue threshold for the symmetric pseudo-inverse convention.
pub const PINV_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub struct OracleLimits {
    pub max_samples: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits { max_samples: 500 }
    }
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle cap exceeded: n = {n} > {cap} samples")]
    CapExceeded { n: usize, cap: usize },
    #[error("singular system (condition estimate {cond:.3e})")]
    Singular { cond: f64 },
    #[error("(I - K) singular beyond span{{1}} for feature {feature}: {unit_eigs} unit eigenvalues")]
    SingularBeyondOnes { feature: usize, unit_eigs: usize },
}

/// Which influence-vector formula applies: the shrunk variants share the
/// `[I + J_n K]⁻¹` form, leave-one-out uses the backfitting operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfluenceVariant {
    A,
    B,
}

impl From<Variant> for InfluenceVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Parallel | Variant::RandomCyclic => InfluenceVariant::A,
            Variant::LeaveOneOut => InfluenceVariant::B,
        }
    }
}

fn check_cap(n: usize, limits: &OracleLimits) -> Result<(), OracleError> {
    if n > limits.max_samples {
        return Err(OracleError::CapExceeded {
            n,
            cap: limits.max_samples,
        });
    }
    Ok(())
}

/// Sample-space structure matrix of one bin partition: entry `(i, j)` is
/// `1/N_L` when samples `i` and `j` share the leaf, else 0.
pub fn structure_matrix_from_leaves(
    leaf_of_bin: &[u32],
    binned: &BinnedDataset,
    k: usize,
    limits: &OracleLimits,
) -> Result<DMatrix<f64>, OracleError> {
    let n = binned.n_samples();
    check_cap(n, limits)?;
    let idx = binned.bin_indices(k);
    let leaf_of_sample: Vec<u32> = idx.iter().map(|&b| leaf_of_bin[b as usize]).collect();
    let n_leaves = leaf_of_bin.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    let mut leaf_n = vec![0usize; n_leaves];
    for &l in &leaf_of_sample {
        leaf_n[l as usize] += 1;
    }
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        let li = leaf_of_sample[i];
        let w = 1.0 / leaf_n[li as usize] as f64;
        for j in 0..n {
            if leaf_of_sample[j] == li {
                s[(i, j)] = w;
            }
        }
    }
    Ok(s)
}

/// Dense structure matrix of a fitted tree (Definition-style, full-sample
/// leaf counts).
pub fn dense_structure_matrix(
    tree: &HistogramTree,
    binned: &BinnedDataset,
    limits: &OracleLimits,
) -> Result<DMatrix<f64>, OracleError> {
    structure_matrix_from_leaves(&tree.leaf_of_bin, binned, tree.feature, limits)
}

/// Monte-Carlo estimate of `K⁽ᵏ⁾ = E[S⁽ᵏ⁾]`: the plain average of the
/// structure matrices of the given partitions (exact when the partitions
/// enumerate a uniform pool).
pub fn expected_structure_matrix(
    structures: &[Vec<u32>],
    binned: &BinnedDataset,
    k: usize,
    limits: &OracleLimits,
) -> Result<DMatrix<f64>, OracleError> {
    assert!(!structures.is_empty(), "need at least one sampled structure");
    let n = binned.n_samples();
    check_cap(n, limits)?;
    let mut acc = DMatrix::zeros(n, n);
    for st in structures {
        acc += structure_matrix_from_leaves(st, binned, k, limits)?;
    }
    Ok(acc / structures.len() as f64)
}

/// Monte-Carlo estimate of the expected structure vector
/// `k⁽ᵏ⁾(x) = E[s⁽ᵏ⁾(x)]` of a query point.
pub fn expected_structure_vector(
    structures: &[Vec<u32>],
    binned: &BinnedDataset,
    k: usize,
    x: f64,
) -> DVector<f64> {
    assert!(!structures.is_empty(), "need at least one sampled structure");
    let n = binned.n_samples();
    let idx = binned.bin_indices(k);
    let bin = binned.bin_of(k, x);
    let mut acc = DVector::zeros(n);
    for st in structures {
        let leaf = st[bin];
        let n_l: u32 = binned
            .counts(k)
            .iter()
            .enumerate()
            .filter(|(r, _)| st[*r] == leaf)
            .map(|(_, &c)| c)
            .sum();
        let w = 1.0 / n_l as f64;
        for i in 0..n {
            if st[idx[i] as usize] == leaf {
                acc[i] += w;
            }
        }
    }
    acc / structures.len() as f64
}

/// Exact per-feature kernels from a frozen model's structure pool.
pub fn pool_kernels(
    pools: &[Vec<Vec<u32>>],
    binned: &BinnedDataset,
    limits: &OracleLimits,
) -> Result<Vec<DMatrix<f64>>, OracleError> {
    pools
        .iter()
        .enumerate()
        .map(|(k, pool)| expected_structure_matrix(pool, binned, k, limits))
        .collect()
}

/// A kernel ridge fixed point: the per-feature centered effect vectors, the
/// fitted training vector `ŷ* = β̂* 1 + Σ_k ỹ*_k`, and `β̂* = ȳ`.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub per_feature: Vec<DVector<f64>>,
    pub fitted: DVector<f64>,
    pub intercept: f64,
}

fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Fixed point of the shrunk (parallel / random cyclic) iteration:
/// `ỹ*_k = J_n K⁽ᵏ⁾ [λI + J_n K]⁻¹ y` with `K = Σ_k K⁽ᵏ⁾` and `β̂* = ȳ`.
pub fn fixed_point_a(
    k_list: &[DMatrix<f64>],
    y: &DVector<f64>,
    lambda: f64,
) -> Result<FixedPoint, OracleError> {
    assert!(lambda > 0.0, "lambda must be positive");
    let n = y.len();
    let mut k_sum = DMatrix::zeros(n, n);
    for km in k_list {
        k_sum += km;
    }
    let a = DMatrix::identity(n, n) * lambda + center_columns(&k_sum);
    let lu = a.clone().lu();
    let v = lu
        .solve(y)
        .ok_or_else(|| OracleError::Singular { cond: condition_estimate(&a) })?;
    let per_feature: Vec<DVector<f64>> = k_list.iter().map(|km| center_vector(&(km * &v))).collect();
    let ybar = y.mean();
    let mut fitted = DVector::from_element(n, ybar);
    for f in &per_feature {
        fitted += f;
    }
    Ok(FixedPoint {
        per_feature,
        fitted,
        intercept: ybar,
    })
}

/// Fixed point of the leave-one-out iteration:
/// `ỹ*_k = (I - K⁽ᵏ⁾)† J_n K⁽ᵏ⁾ [I - (I + 𝒦)⁻¹ 𝒦] y` with the aggregated
/// kernel `𝒦 = Σ_k (I - K⁽ᵏ⁾)† J_n K⁽ᵏ⁾`. The dagger is the symmetric
/// pseudo-inverse, which zeroes the always-present unit eigenvalue along
/// `1`; more than one unit eigenvalue is reported as an error.
pub fn fixed_point_b(k_list: &[DMatrix<f64>], y: &DVector<f64>) -> Result<FixedPoint, OracleError> {
    let n = y.len();
    let eye = DMatrix::identity(n, n);
    let mut w_list = Vec::with_capacity(k_list.len());
    let mut kcal = DMatrix::zeros(n, n);
    for (k, km) in k_list.iter().enumerate() {
        let unit = count_unit_eigenvalues(km, PINV_THRESHOLD);
        if unit > 1 {
            return Err(OracleError::SingularBeyondOnes {
                feature: k,
                unit_eigs: unit,
            });
        }
        let dagger = sym_pinv(&(&eye - km), PINV_THRESHOLD);
        let w = &dagger * center_columns(km);
        kcal += &w;
        w_list.push(w);
    }
    let a = &eye + &kcal;
    let lu = a.clone().lu();
    let t = y
        - lu.solve(&(&kcal * y))
            .ok_or_else(|| OracleError::Singular { cond: condition_estimate(&a) })?;
    let per_feature: Vec<DVector<f64>> = w_list.iter().map(|w| w * &t).collect();
    let ybar = y.mean();
    let mut fitted = DVector::from_element(n, ybar);
    for f in &per_feature {
        fitted += f;
    }
    Ok(FixedPoint {
        per_feature,
        fitted,
        intercept: ybar,
    })
}

/// Exact influence vector of a query with expected structure vector `kx`.
///
/// Variant A: `r = [I + J_n 𝒦]⁻¹ J_n kx` with `𝒦 = Σ_k K⁽ᵏ⁾`.
/// Variant B: `r = [I - (I + 𝒦_B)⁻¹ 𝒦_B] J_n (I - K⁽ᵏ⁾)† kx` with the
/// leave-one-out aggregated kernel. Returns the vector and its norm.
pub fn dense_r_vector(
    variant: InfluenceVariant,
    k_list: &[DMatrix<f64>],
    k: usize,
    kx: &DVector<f64>,
    limits: &OracleLimits,
) -> Result<(DVector<f64>, f64), OracleError> {
    let n = kx.len();
    check_cap(n, limits)?;
    let eye = DMatrix::identity(n, n);
    let r = match variant {
        InfluenceVariant::A => {
            let mut k_sum = DMatrix::zeros(n, n);
            for km in k_list {
                k_sum += km;
            }
            let a = &eye + center_columns(&k_sum);
            let lu = a.clone().lu();
            lu.solve(&center_vector(kx))
                .ok_or_else(|| OracleError::Singular { cond: condition_estimate(&a) })?
        }
        InfluenceVariant::B => {
            let mut kcal = DMatrix::zeros(n, n);
            for (kk, km) in k_list.iter().enumerate() {
                let unit = count_unit_eigenvalues(km, PINV_THRESHOLD);
                if unit > 1 {
                    return Err(OracleError::SingularBeyondOnes {
                        feature: kk,
                        unit_eigs: unit,
                    });
                }
                kcal += sym_pinv(&(&eye - km), PINV_THRESHOLD) * center_columns(km);
            }
            let dagger = sym_pinv(&(&eye - &k_list[k]), PINV_THRESHOLD);
            let u = center_vector(&(&dagger * kx));
            let a = &eye + &kcal;
            let lu = a.clone().lu();
            &u - lu
                .solve(&(&kcal * &u))
                .ok_or_else(|| OracleError::Singular { cond: condition_estimate(&a) })?
        }
    };
    let norm = r.norm();
    Ok((r, norm))
}

/// Woodbury-free dense influence route for the bin-kernel system: builds
/// the aggregated sample-space kernel `𝒦 = Σ_a Z⁽ᵃ⁾ H⁽ᵃ⁾ Z⁽ᵃ⁾ᵀ` from the
/// cached per-feature blocks and solves `[I + J_n 𝒦] r = J_n Z⁽ᵏ⁾ h_x`
/// directly. The independent side of the bin-space-equivalence check.
pub fn dense_r_from_bin_kernel(
    h_blocks: &[DMatrix<f64>],
    bin_idx: &[&[u16]],
    k: usize,
    h_x: &DVector<f64>,
    limits: &OracleLimits,
) -> Result<(DVector<f64>, f64), OracleError> {
    let n = bin_idx[0].len();
    check_cap(n, limits)?;
    assert_eq!(h_blocks.len(), bin_idx.len());
    let mut kernel = DMatrix::zeros(n, n);
    for (h, idx) in h_blocks.iter().zip(bin_idx) {
        assert_eq!(idx.len(), n);
        for i in 0..n {
            for j in 0..n {
                kernel[(i, j)] += h[(idx[i] as usize, idx[j] as usize)];
            }
        }
    }
    let a = DMatrix::identity(n, n) + center_columns(&kernel);
    let kx = DVector::from_fn(n, |i, _| h_x[bin_idx[k][i] as usize]);
    let lu = a.clone().lu();
    let r = lu
        .solve(&center_vector(&kx))
        .ok_or_else(|| OracleError::Singular { cond: condition_estimate(&a) })?;
    let norm = r.norm();
    Ok((r, norm))
}

/// Dense leave-one-out influence from the cached bin kernels: the exact
/// sample-space composition
/// `r = (I + 𝒦)⁻¹ J_n (I − K⁽ᵏ⁾ + 11ᵀ/n)⁻¹ J_n k⁽ᵏ⁾(x)` with
/// `𝒦 = Σ_a J_n (I − K⁽ᵃ⁾ + 11ᵀ/n)⁻¹ J_n K⁽ᵃ⁾` and `K⁽ᵃ⁾ = Z⁽ᵃ⁾H⁽ᵃ⁾Z⁽ᵃ⁾ᵀ`.
/// The rank-one shift realizes the symmetric pseudo-inverse on the
/// centered subspace. The independent side of the bin-space equivalence
/// check for leave-one-out caches.
pub fn dense_r_vector_loo(
    h_blocks: &[DMatrix<f64>],
    bin_idx: &[&[u16]],
    k: usize,
    h_x: &DVector<f64>,
    limits: &OracleLimits,
) -> Result<(DVector<f64>, f64), OracleError> {
    let n = bin_idx[0].len();
    check_cap(n, limits)?;
    let p = h_blocks.len();
    let eye = DMatrix::identity(n, n);
    let ones = DMatrix::from_element(n, n, 1.0 / n as f64);
    let k_mats: Vec<DMatrix<f64>> = (0..p)
        .map(|a| {
            let h = &h_blocks[a];
            let idx = bin_idx[a];
            DMatrix::from_fn(n, n, |i, j| h[(idx[i] as usize, idx[j] as usize)])
        })
        .collect();
    // The shifted dagger systems are stiff when a structure pool is
    // nearly degenerate (the ridge alone separates them from singular);
    // solve with one step of iterative refinement throughout.
    let solve_refined = |mat: &DMatrix<f64>, rhs: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let lu = mat.clone().lu();
        let mut sol = lu.solve(rhs)?;
        let resid = rhs - mat * &sol;
        sol += lu.solve(&resid)?;
        Some(sol)
    };
    let shifted: Vec<DMatrix<f64>> = k_mats.iter().map(|km| &eye - km + &ones).collect();
    let mut kcal = DMatrix::zeros(n, n);
    for a in 0..p {
        let jka = center_columns(&k_mats[a]);
        let t = solve_refined(&shifted[a], &jka)
            .ok_or(OracleError::Singular { cond: f64::INFINITY })?;
        kcal += center_columns(&t);
    }
    let kx = DVector::from_fn(n, |i, _| h_x[bin_idx[k][i] as usize]);
    let jkx = DMatrix::from_column_slice(n, 1, center_vector(&kx).as_slice());
    let u = center_vector(
        &solve_refined(&shifted[k], &jkx)
            .ok_or(OracleError::Singular { cond: f64::INFINITY })?
            .column(0)
            .into_owned(),
    );
    let a = &eye + &kcal;
    let u_mat = DMatrix::from_column_slice(n, 1, u.as_slice());
    let r = solve_refined(&a, &u_mat)
        .ok_or_else(|| OracleError::Singular { cond: condition_estimate(&a) })?
        .column(0)
        .into_owned();
    let norm = r.norm();
    Ok((r, norm))
}

/// The expanded form of the same influence vector,
/// `J_n k − J_n Z M⁻¹ Zᵀ J_n k`, with `Z` the stacked assignment matrix
/// and `M` the cached stacked system: a second dense route through the
/// Woodbury identity.
pub fn dense_r_expanded(
    m_stacked: &DMatrix<f64>,
    bin_idx: &[&[u16]],
    offsets: &[usize],
    k: usize,
    h_x: &DVector<f64>,
    limits: &OracleLimits,
) -> Result<(DVector<f64>, f64), OracleError> {
    let n = bin_idx[0].len();
    check_cap(n, limits)?;
    let dim = m_stacked.nrows();
    let kx = DVector::from_fn(n, |i, _| h_x[bin_idx[k][i] as usize]);
    let jk = center_vector(&kx);
    let mut zt_jk = DVector::zeros(dim);
    for (a, idx) in bin_idx.iter().enumerate() {
        for i in 0..n {
            zt_jk[offsets[a] + idx[i] as usize] += jk[i];
        }
    }
    let lu = m_stacked.clone().lu();
    let mut u = lu
        .solve(&zt_jk)
        .ok_or_else(|| OracleError::Singular { cond: condition_estimate(m_stacked) })?;
    // Refine once; M is stiff wherever the ridge dominates a block.
    let resid = &zt_jk - m_stacked * &u;
    if let Some(du) = lu.solve(&resid) {
        u += du;
    }
    let mut zu = DVector::zeros(n);
    for (a, idx) in bin_idx.iter().enumerate() {
        for i in 0..n {
            zu[i] += u[offsets[a] + idx[i] as usize];
        }
    }
    let r = &jk - center_vector(&zu);
    let norm = r.norm();
    Ok((r, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{bin_features, Dataset};
    use crate::trees::{bin_structure, fit_tree, TreeParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn limits() -> OracleLimits {
        OracleLimits::default()
    }

    fn binned_1d(col: Vec<f64>, max_bins: usize) -> BinnedDataset {
        let n = col.len();
        let ds = Dataset::from_columns(vec!["x1".into()], vec![col], vec![0.0; n]).unwrap();
        bin_features(&ds, max_bins)
    }

    /// Random contiguous partition of `m` bins into at most `max_leaves`.
    fn random_partition(m: usize, max_leaves: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let leaves = rng.gen_range(1..=max_leaves.min(m));
        let mut cuts: Vec<usize> = (1..m).collect();
        for i in (1..cuts.len()).rev() {
            let j = rng.gen_range(0..=i);
            cuts.swap(i, j);
        }
        let mut cuts: Vec<usize> = cuts.into_iter().take(leaves - 1).collect();
        cuts.sort_unstable();
        cuts.push(m);
        let mut out = vec![0u32; m];
        let mut leaf = 0u32;
        let mut start = 0;
        for &c in &cuts {
            for item in out.iter_mut().take(c).skip(start) {
                *item = leaf;
            }
            leaf += 1;
            start = c;
        }
        out
    }

    #[test]
    fn single_leaf_structure_is_uniform() {
        let binned = binned_1d(vec![9.0; 4], 8);
        let s = structure_matrix_from_leaves(&[0], &binned, 0, &limits()).unwrap();
        assert_eq!(s, DMatrix::from_element(4, 4, 0.25));
    }

    #[test]
    fn two_leaf_block_structure() {
        // Leaves of sizes 1 and 3 over 2 bins (ties push the median edge
        // onto the repeated value; x >= edge goes right).
        let binned = binned_1d(vec![0.0, 5.0, 5.0, 5.0], 2);
        assert_eq!(binned.counts(0), &[1, 3]);
        let s = structure_matrix_from_leaves(&[0, 1], &binned, 0, &limits()).unwrap();
        assert_eq!(s[(0, 0)], 1.0);
        for i in 1..4 {
            assert_eq!(s[(0, i)], 0.0);
            for j in 1..4 {
                assert!((s[(i, j)] - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn decomposition_lemma_on_fitted_trees() {
        // (Z D) B (Z D)ᵀ equals the dense structure matrix entrywise.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n = rng.gen_range(10..60);
            let col: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let binned = binned_1d(col.clone(), rng.gen_range(2..10));
            let r: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            let params = TreeParams {
                max_depth: 3,
                min_leaf_samples: 2,
            };
            let tree = fit_tree(&binned, 0, &r, &vec![true; n], &params).unwrap();
            let s = dense_structure_matrix(&tree, &binned, &limits()).unwrap();
            let st = bin_structure(&tree, &binned);
            let m = st.n_bins();
            // zd[i][.] = row of Z D.
            let mut recon = DMatrix::zeros(n, n);
            let b = st.b_matrix();
            for i in 0..n {
                for j in 0..n {
                    // (Z D B D Zᵀ)_{ij} collapses to ξ_{b_i} B[b_i, b_j] ξ_{b_j}.
                    let bi = binned.bin_index(i, 0);
                    let bj = binned.bin_index(j, 0);
                    recon[(i, j)] = st.xi[bi] * b[(bi, bj)] * st.xi[bj];
                }
            }
            assert!(m >= 1);
            assert!((recon - s).amax() < 1e-10);
        }
    }

    #[test]
    fn one_leaf_kernels_fix_point_at_ybar() {
        let n = 12;
        let one_leaf = DMatrix::from_element(n, n, 1.0 / n as f64);
        let y = DVector::from_fn(n, |i, _| (i as f64 * 0.7).sin() + 2.0);
        let fp = fixed_point_a(&[one_leaf.clone(), one_leaf.clone()], &y, 1.0).unwrap();
        for f in &fp.per_feature {
            assert!(f.amax() < 1e-12);
        }
        let ybar = y.mean();
        assert!((fp.fitted - DVector::from_element(n, ybar)).amax() < 1e-12);

        let fp = fixed_point_b(&[one_leaf], &y).unwrap();
        assert!(fp.per_feature[0].amax() < 1e-12);
    }

    #[test]
    fn identity_kernel_halves_centered_response() {
        // p = 1, K = I, λ = 1: ỹ* = (1/2) J_n y.
        let n = 9;
        let y = DVector::from_fn(n, |i, _| (i * i) as f64 * 0.1);
        let fp = fixed_point_a(&[DMatrix::identity(n, n)], &y, 1.0).unwrap();
        let target = center_vector(&y) * 0.5;
        assert!((fp.per_feature[0].clone() - target).amax() < 1e-12);
    }

    #[test]
    fn zero_kernels_give_no_signal() {
        let n = 7;
        let y = DVector::from_fn(n, |i, _| i as f64);
        let fp = fixed_point_b(&[DMatrix::zeros(n, n), DMatrix::zeros(n, n)], &y).unwrap();
        let ybar = y.mean();
        assert!((fp.fitted - DVector::from_element(n, ybar)).amax() < 1e-14);
    }

    fn random_instance(
        seed: u64,
        n: usize,
        p: usize,
        max_bins: usize,
    ) -> (BinnedDataset, Vec<DMatrix<f64>>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect();
        let names = (0..p).map(|k| format!("x{}", k + 1)).collect();
        let y_raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let ds = Dataset::from_columns(names, cols, y_raw.clone()).unwrap();
        let binned = bin_features(&ds, max_bins);
        let k_list: Vec<DMatrix<f64>> = (0..p)
            .map(|k| {
                let m = binned.bins(k);
                let pool: Vec<Vec<u32>> =
                    (0..12).map(|_| random_partition(m, 5, &mut rng)).collect();
                expected_structure_matrix(&pool, &binned, k, &limits()).unwrap()
            })
            .collect();
        (binned, k_list, DVector::from_vec(y_raw))
    }

    #[test]
    fn fixed_point_a_satisfies_stationarity() {
        // ỹ*_k = J_n K⁽ᵏ⁾ (y - ŷ*) / λ by residual substitution.
        for seed in 0..5 {
            let (_, k_list, y) = random_instance(100 + seed, 50, 2, 8);
            let lambda = 1.0;
            let fp = fixed_point_a(&k_list, &y, lambda).unwrap();
            for (k, km) in k_list.iter().enumerate() {
                let resid = &y - &fp.fitted;
                let rhs = center_vector(&(km * resid)) / lambda;
                assert!(
                    (fp.per_feature[k].clone() - rhs).amax() < 1e-10,
                    "seed {seed} feature {k}"
                );
            }
        }
    }

    #[test]
    fn fixed_point_b_satisfies_stationarity() {
        // ỹ*_k = (I - K⁽ᵏ⁾)† J_n K⁽ᵏ⁾ (y - ŷ*) by residual substitution.
        for seed in 0..5 {
            let (_, k_list, y) = random_instance(200 + seed, 40, 2, 8);
            let n = y.len();
            let eye = DMatrix::identity(n, n);
            let fp = fixed_point_b(&k_list, &y).unwrap();
            for (k, km) in k_list.iter().enumerate() {
                let resid = &y - &fp.fitted;
                let rhs = sym_pinv(&(&eye - km), PINV_THRESHOLD) * center_vector(&(km * resid));
                assert!(
                    (fp.per_feature[k].clone() - rhs).amax() < 1e-10,
                    "seed {seed} feature {k}"
                );
            }
        }
    }

    #[test]
    fn influence_of_identity_kernel_halves_basis_vector() {
        let n = 8;
        let k_list = vec![DMatrix::identity(n, n)];
        let e2 = DVector::from_fn(n, |i, _| if i == 2 { 1.0 } else { 0.0 });
        let (r, _) = dense_r_vector(InfluenceVariant::A, &k_list, 0, &e2, &limits()).unwrap();
        let target = center_vector(&e2) * 0.5;
        assert!((r - target).amax() < 1e-12);
    }

    #[test]
    fn influence_of_single_bin_feature_is_zero() {
        // A one-leaf kernel maps the structure vector to a constant, which
        // centering kills.
        let n = 10;
        let one_leaf = DMatrix::from_element(n, n, 1.0 / n as f64);
        let kx = DVector::from_element(n, 1.0 / n as f64);
        for variant in [InfluenceVariant::A, InfluenceVariant::B] {
            let (r, norm) = dense_r_vector(variant, std::slice::from_ref(&one_leaf), 0, &kx, &limits()).unwrap();
            assert!(r.amax() < 1e-12);
            assert!(norm < 1e-12);
        }
    }

    #[test]
    fn expected_structure_vector_is_a_probability_average() {
        let binned = binned_1d(vec![0.1, 0.2, 0.3, 0.4, 0.7, 0.9], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = binned.bins(0);
        let pool: Vec<Vec<u32>> = (0..10).map(|_| random_partition(m, 3, &mut rng)).collect();
        let v = expected_structure_vector(&pool, &binned, 0, 0.35);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|&e| e >= 0.0));

        // Deterministic single structure: exact s_n(x), entries 1/N_L.
        let single = vec![vec![0u32; m]];
        let v = expected_structure_vector(&single, &binned, 0, 0.35);
        assert!((v - DVector::from_element(6, 1.0 / 6.0)).amax() < 1e-15);
    }

    #[test]
    fn cap_is_enforced() {
        let binned = binned_1d((0..20).map(|i| i as f64).collect(), 4);
        let lim = OracleLimits { max_samples: 10 };
        let err = structure_matrix_from_leaves(&[0; 4], &binned, 0, &lim);
        assert!(matches!(err, Err(OracleError::CapExceeded { .. })));
    }
}
