//! Bin-space inference: the cached `H` / `M` system and every interval
//! and test query, all with cost independent of the number of training
//! samples.
//!
//! Training leaves one mean bin kernel per feature,
//! `H⁽ᵏ⁾ = E[D⁽ᵏ⁾B⁽ᵏ⁾D⁽ᵏ⁾]`, whose row for a query's bin is
//! `h⁽ᵏ⁾(x) = E[D² b(x)]`. Each feature has its own bin assignment, so the
//! aggregated sample-space kernel is `𝒦 = Σ_k Z⁽ᵏ⁾ H⁽ᵏ⁾ Z⁽ᵏ⁾ᵀ` with the
//! stacked assignment `Z = [Z⁽¹⁾ … Z⁽ᵖ⁾]`. Applying the Woodbury identity
//! to `[I + J_n Z diag(H⁽ᵏ⁾) Zᵀ]⁻¹` gives the cached block system
//!
//! `M = blockdiag(H⁽ᵏ⁾⁻¹) + Zᵀ J_n Z`,
//!
//! where `Zᵀ J_n Z = C − c cᵀ/n` needs only the per-feature bin counts and
//! the pairwise bin contingency tables — bin-level summaries, nothing of
//! size `n`. With `m` bins per feature this is a `pm × pm` matrix,
//! factorized once. A query embeds `h⁽ᵏ⁾(x)` into the stacked space, runs
//! `z = (ZᵀJ_nZ) h`, solves `M w = z`, sets `q = h − w`, and reads off
//! `‖r⁽ᵏ⁾(x)‖² = qᵀ(ZᵀJ_nZ)q` in `O((pm)²)`. For a single feature the
//! system collapses to `M = H⁻¹ + diag(c) − c cᵀ/n` and
//! `‖r‖² = qᵀdiag(c)q − (cᵀq)²/n` exactly. Interval half-widths scale the
//! norm by `z_{1-α/2} c_E⁻¹ σ̂` per the asymptotic-normality limit.

use std::ops::AddAssign;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boost::{EnsembleModel, KernelAccumulator, Variant};
use crate::data::BinnedDataset;
use crate::linalg::{eig_range_sym, symmetrize};
use crate::oracle::InfluenceVariant;
use crate::stats::{conformal_quantile, two_sided_p, z_two_sided};

/// Ridge added to each `H⁽ᵏ⁾` block before inversion.
pub const H_RIDGE: f64 = 1e-10;
/// Quadratic forms may dip this far below zero before the clamp warns.
pub const NEGATIVE_CLAMP: f64 = -1e-12;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("kernel accumulator has no counted round for feature {0}")]
    EmptyAccumulator(usize),
    #[error("H block {feature} numerically singular after ridge {ridge:e}: eigenvalues in [{min_eig:.3e}, {max_eig:.3e}]")]
    HSingular {
        feature: usize,
        ridge: f64,
        min_eig: f64,
        max_eig: f64,
    },
    #[error("stacked system matrix M not positive definite")]
    MSingular,
    #[error("sigma estimation needs n > df, got n = {n}, df = {df:.1}")]
    SigmaDf { n: usize, df: f64 },
    #[error("out-of-bag sigma requested but no out-of-bag record was kept at training time")]
    NoOobRecord,
    #[error("conformal intervals need a calibration split recorded at training time")]
    NoCalibration,
    #[error("reproduction intervals are derived from confidence intervals, got {0:?}")]
    NotACi(IntervalKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntervalKind {
    FeatureCi,
    InterceptCi,
    OverallCi,
    Prediction,
    Reproduction,
}

/// An interval query result; `lower = center - half_width`,
/// `upper = center + half_width`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IntervalResult {
    pub kind: IntervalKind,
    pub center: f64,
    pub half_width: f64,
    pub lower: f64,
    pub upper: f64,
    /// The influence norm that scaled the width (aggregate for overall
    /// kinds, `1/√n` for the intercept).
    pub r_norm: f64,
    pub alpha: f64,
}

fn interval(kind: IntervalKind, center: f64, half_width: f64, r_norm: f64, alpha: f64) -> IntervalResult {
    IntervalResult {
        kind,
        center,
        half_width,
        lower: center - half_width,
        upper: center + half_width,
        r_norm,
        alpha,
    }
}

/// How the aggregate `‖Σ_k r⁽ᵏ⁾‖²` is formed for overall intervals:
/// the orthogonal shortcut `Σ‖r⁽ᵏ⁾‖²`, or the Cauchy–Schwarz-conservative
/// `(Σ‖r⁽ᵏ⁾‖)²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverallMode {
    OrthogonalSum,
    Conservative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaMode {
    InSample,
    Oob,
}

/// Held-out rows for split-conformal width calibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

/// Bin-space machinery for the leave-one-out influence norm.
///
/// The backfitting limit weighs a query through
/// `r⁽ᵏ⁾ = (I + 𝒦)⁻¹ J_n (I − K⁽ᵏ⁾)† J_n k⁽ᵏ⁾(x)` with
/// `𝒦 = Σ_a (I − K⁽ᵃ⁾)† J_n K⁽ᵃ⁾`. Every factor is the identity plus a
/// matrix of the form `Φ A Φᵀ` where `Φ = [Z⁽¹⁾ … Z⁽ᵖ⁾ 1]` stacks the bin
/// assignment columns and the ones vector, so compositions and inverses
/// close over small coefficient matrices against the extended Gram
/// `G = ΦᵀΦ` (bin counts plus contingency tables). The dagger is realized
/// as `(I − K⁽ᵏ⁾ + 11ᵀ/n)⁻¹` sandwiched in `J_n`, which agrees with the
/// spectral pseudo-inverse on the centered subspace and stays stable when
/// the ridge perturbs the unit eigenvalue.
#[derive(Debug, Clone)]
struct LooInfluence {
    /// Extended Gram `ΦᵀΦ`, `(dim+1)²`.
    g_ext: DMatrix<f64>,
    /// Per-feature nonzero columns of `G C_k` (block columns then ones).
    dagger_cols: Vec<DMatrix<f64>>,
    /// Small `(m_k+1)²` factorizations of `I + Sᵀ(G C_k)S`.
    dagger_core: Vec<nalgebra::LU<f64, Dyn, Dyn>>,
    /// Coefficient matrix of `𝒦` against `Φ` (`ext × dim`; the ones
    /// column is identically zero and dropped).
    kcal_coeff: DMatrix<f64>,
    /// Factorization of `I + G A_𝒦`.
    big: nalgebra::LU<f64, Dyn, Dyn>,
}

impl LooInfluence {
    fn build(
        h_blocks: &[DMatrix<f64>],
        g_ext: DMatrix<f64>,
        offsets: &[usize],
        dims: &[usize],
        n: usize,
    ) -> Result<Self, InferenceError> {
        let p = h_blocks.len();
        let dim: usize = dims.iter().sum();
        let ext = dim + 1;
        let nf = n as f64;

        // Dagger pieces of (I − K̃_a + 11ᵀ/n)⁻¹: the coefficient is
        // C_a = −H̃_a at block (a,a) plus 1/n at the ones coordinate, so
        // G C_a has nonzero columns only there.
        let mut dagger_cols = Vec::with_capacity(p);
        let mut dagger_core = Vec::with_capacity(p);
        for a in 0..p {
            let m_a = dims[a];
            let mut cols = DMatrix::zeros(ext, m_a + 1);
            cols.columns_mut(0, m_a)
                .copy_from(&(-(g_ext.columns(offsets[a], m_a) * &h_blocks[a])));
            cols.set_column(m_a, &(g_ext.column(ext - 1) / nf));
            let mut core = DMatrix::identity(m_a + 1, m_a + 1);
            for j in 0..m_a + 1 {
                for i in 0..m_a {
                    core[(i, j)] += cols[(offsets[a] + i, j)];
                }
                core[(m_a, j)] += cols[(ext - 1, j)];
            }
            let lu: nalgebra::LU<f64, Dyn, Dyn> = core.lu();
            if lu.determinant().abs() < 1e-300 {
                return Err(InferenceError::MSingular);
            }
            dagger_cols.push(cols);
            dagger_core.push(lu);
        }

        // (I + G C_a)⁻¹ applied to the columns of an ext × w matrix,
        // through the small core, with one refinement step: the shifted
        // system is stiff for nearly degenerate structure pools.
        let shift_inv = |a: usize, u: &DMatrix<f64>| -> DMatrix<f64> {
            let m_a = dims[a];
            let select = |w: &DMatrix<f64>| {
                let mut sel = DMatrix::zeros(m_a + 1, w.ncols());
                sel.rows_mut(0, m_a).copy_from(&w.rows(offsets[a], m_a));
                sel.rows_mut(m_a, 1).copy_from(&w.rows(ext - 1, 1));
                sel
            };
            let one_pass = |w: &DMatrix<f64>| -> DMatrix<f64> {
                let core_sol = dagger_core[a].solve(&select(w)).expect("dagger core solve");
                w - &dagger_cols[a] * core_sol
            };
            let mut t = one_pass(u);
            // residual of (I + G C_a) t = u, using G C_a = cols · selector.
            let resid = u - &t - &dagger_cols[a] * select(&t);
            t += one_pass(&resid);
            t
        };

        // 𝒦 = Σ_a J q_a J K_a, one block of columns per feature.
        let mut kcal_coeff = DMatrix::zeros(ext, dim);
        for a in 0..p {
            let m_a = dims[a];
            // S2 = coefficient of J K_a: block (a,a) = H̃_a, ones row
            // −(1/n)(G E_a)[ones, :].
            let mut s2 = DMatrix::zeros(ext, m_a);
            s2.rows_mut(offsets[a], m_a).copy_from(&h_blocks[a]);
            let g_ones_block = g_ext.row(ext - 1).columns(offsets[a], m_a).into_owned();
            s2.rows_mut(ext - 1, 1)
                .copy_from(&(-(&g_ones_block * &h_blocks[a]) / nf));

            // q_a ∘ (J K_a): S3 = S2 + (−C_a)(I + G C_a)⁻¹ G S2.
            let g_s2 = g_ext.columns(offsets[a], m_a) * s2.rows(offsets[a], m_a)
                + g_ext.column(ext - 1) * s2.row(ext - 1);
            let t = shift_inv(a, &g_s2);
            let mut s3 = s2;
            let ht = &h_blocks[a] * t.rows(offsets[a], m_a);
            for j in 0..m_a {
                for i in 0..m_a {
                    s3[(offsets[a] + i, j)] += ht[(i, j)];
                }
                s3[(ext - 1, j)] -= t[(ext - 1, j)] / nf;
            }
            // Leading J: subtract (1/n) e_ones (G S3)[ones, :].
            let g_ones_s3 = g_ext.row(ext - 1) * &s3;
            for j in 0..m_a {
                s3[(ext - 1, j)] -= g_ones_s3[(0, j)] / nf;
            }
            kcal_coeff.columns_mut(offsets[a], m_a).copy_from(&s3);
        }

        // I + G A_𝒦; the ones column of A_𝒦 is zero.
        let mut big = DMatrix::identity(ext, ext);
        big.columns_mut(0, dim).add_assign(&(&g_ext * &kcal_coeff));
        let big: nalgebra::LU<f64, Dyn, Dyn> = big.lu();
        if big.determinant().abs() < 1e-300 {
            return Err(InferenceError::MSingular);
        }
        Ok(LooInfluence {
            g_ext,
            dagger_cols,
            dagger_core,
            kcal_coeff,
            big,
        })
    }

    /// `‖r⁽ᵏ⁾(x)‖` for the query's `h` row of feature `k`; `O((pm)²)`.
    fn r_norm(
        &self,
        k: usize,
        h: &DVector<f64>,
        h_block: &DMatrix<f64>,
        offsets: &[usize],
        dims: &[usize],
        n: usize,
    ) -> f64 {
        let ext = self.g_ext.nrows();
        let dim = ext - 1;
        let nf = n as f64;
        let m_k = dims[k];
        let off = offsets[k];

        // Track the Φ-coordinates u and their Gram image g = G u.
        let mut u = DVector::zeros(ext);
        u.rows_mut(off, m_k).copy_from(h);
        let mut g = self.g_ext.columns(off, m_k) * h;

        // J.
        let shift = g[ext - 1] / nf;
        u[ext - 1] -= shift;
        g -= self.g_ext.column(ext - 1) * shift;

        // q_k: u += (−C_k)(I + G C_k)⁻¹ g, with one refinement step.
        let select = |w: &DVector<f64>| {
            let mut sel = DVector::zeros(m_k + 1);
            sel.rows_mut(0, m_k).copy_from(&w.rows(off, m_k));
            sel[m_k] = w[ext - 1];
            sel
        };
        let one_pass = |w: &DVector<f64>| -> DVector<f64> {
            let core_sol = self.dagger_core[k].solve(&select(w)).expect("dagger core solve");
            w - &self.dagger_cols[k] * core_sol
        };
        let mut t = one_pass(&g);
        let resid = &g - &t - &self.dagger_cols[k] * select(&t);
        t += one_pass(&resid);
        let ht = h_block * t.rows(off, m_k);
        for j in 0..m_k {
            u[off + j] += ht[j];
        }
        u[ext - 1] -= t[ext - 1] / nf;
        g += self.g_ext.columns(off, m_k) * &ht;
        g -= self.g_ext.column(ext - 1) * (t[ext - 1] / nf);

        // J again.
        let shift = g[ext - 1] / nf;
        u[ext - 1] -= shift;
        g -= self.g_ext.column(ext - 1) * shift;

        // (I + 𝒦)⁻¹: u −= A_𝒦 (I + G A_𝒦)⁻¹ g, and since G A_𝒦 = big − I,
        // the updated Gram image G u is exactly the solve output. One
        // refinement step; big·v is reconstructed from the pieces.
        let big_apply = |w: &DVector<f64>| -> DVector<f64> {
            w + &self.g_ext * (&self.kcal_coeff * w.rows(0, dim).into_owned())
        };
        let mut v = self.big.solve(&g).expect("aggregated kernel solve");
        let resid = &g - big_apply(&v);
        v += self.big.solve(&resid).expect("aggregated kernel solve");
        let u_final = u - &self.kcal_coeff * v.rows(0, dim).into_owned();

        u_final.dot(&v).max(0.0).sqrt()
    }
}

/// The post-training bin-space cache. Immutable and cheap to query; safe
/// for unlimited concurrent readers.
#[derive(Debug)]
pub struct InferenceCache {
    /// Bins per feature; `offsets[k]` is the block start in stacked space.
    block_dims: Vec<usize>,
    offsets: Vec<usize>,
    dim: usize,
    ridge: f64,
    /// Per-feature mean `D B D` on its own `m_k` bins.
    h_blocks: Vec<DMatrix<f64>>,
    /// `Zᵀ J_n Z` on the stacked bins.
    gram: DMatrix<f64>,
    /// `blockdiag(H⁻¹) + gram`.
    m_stacked: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    /// Bin counts per feature.
    counts: Vec<Vec<f64>>,
    n: usize,
    sigma: f64,
    c_e_inv: f64,
    variant: InfluenceVariant,
    /// Leave-one-out influence machinery; present for variant B caches.
    loo: Option<LooInfluence>,
    negative_clamps: AtomicUsize,
}

impl Clone for InferenceCache {
    fn clone(&self) -> Self {
        InferenceCache {
            block_dims: self.block_dims.clone(),
            offsets: self.offsets.clone(),
            dim: self.dim,
            ridge: self.ridge,
            h_blocks: self.h_blocks.clone(),
            gram: self.gram.clone(),
            m_stacked: self.m_stacked.clone(),
            chol: self.chol.clone(),
            counts: self.counts.clone(),
            n: self.n,
            sigma: self.sigma,
            c_e_inv: self.c_e_inv,
            variant: self.variant,
            loo: self.loo.clone(),
            negative_clamps: AtomicUsize::new(self.negative_clamps.load(Ordering::Relaxed)),
        }
    }
}

impl InferenceCache {
    pub fn n_features(&self) -> usize {
        self.h_blocks.len()
    }

    /// Total stacked bin count `Σ_k m_k`.
    pub fn total_bins(&self) -> usize {
        self.dim
    }

    pub fn bins(&self, k: usize) -> usize {
        self.block_dims[k]
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn c_e_inv(&self) -> f64 {
        self.c_e_inv
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Which influence formula this cache answers queries with.
    pub fn influence_variant(&self) -> InfluenceVariant {
        self.variant
    }

    pub fn h_block(&self, k: usize) -> &DMatrix<f64> {
        &self.h_blocks[k]
    }

    /// The stacked system matrix `M = blockdiag(H⁻¹) + ZᵀJ_nZ`.
    pub fn m_matrix(&self) -> &DMatrix<f64> {
        &self.m_stacked
    }

    /// `ZᵀJ_nZ` on the stacked bins.
    pub fn gram_matrix(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn counts(&self, k: usize) -> &[f64] {
        &self.counts[k]
    }

    pub fn block_offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    /// Times a quadratic form went (negligibly) negative and was clamped.
    pub fn negative_clamp_count(&self) -> usize {
        self.negative_clamps.load(Ordering::Relaxed)
    }

    /// `h⁽ᵏ⁾(x)` for a query falling in `bin`: the bin's row of the
    /// feature's mean kernel block.
    pub fn h_row(&self, k: usize, bin: usize) -> DVector<f64> {
        let block = &self.h_blocks[k];
        let bin = bin.min(block.nrows() - 1);
        DVector::from_fn(block.ncols(), |j, _| block[(bin, j)])
    }

    /// `h⁽ᵏ⁾(x)` embedded into the stacked bin space (zeros off-block).
    pub fn h_row_stacked(&self, k: usize, bin: usize) -> DVector<f64> {
        let mut h = DVector::zeros(self.dim);
        let block = &self.h_blocks[k];
        let bin = bin.min(block.nrows() - 1);
        let off = self.offsets[k];
        for j in 0..block.ncols() {
            h[off + j] = block[(bin, j)];
        }
        h
    }

    /// `‖r⁽ᵏ⁾(x)‖` for a query in `bin` of feature `k`; `O((pm)²)`.
    /// Dispatches on the cache's influence variant.
    pub fn r_norm(&self, k: usize, bin: usize) -> f64 {
        if let Some(loo) = &self.loo {
            let h = self.h_row(k, bin);
            return loo.r_norm(k, &h, &self.h_blocks[k], &self.offsets, &self.block_dims, self.n);
        }
        let h = self.h_row_stacked(k, bin);
        // z = (ZᵀJZ) h touches only feature k's block of columns.
        let off = self.offsets[k];
        let m_k = self.block_dims[k];
        let hk = h.rows(off, m_k).into_owned();
        let z = self.gram.columns(off, m_k) * &hk;
        // One step of iterative refinement: the ridge makes M very stiff in
        // directions H barely observed, and the raw solve can shed digits.
        let mut w = self.chol.solve(&z);
        let resid = &z - &self.m_stacked * &w;
        w += self.chol.solve(&resid);
        let q = &h - w;
        let gq = &self.gram * &q;
        let mut val = q.dot(&gq);
        if val < 0.0 {
            if val < NEGATIVE_CLAMP {
                eprintln!("warning: influence quadratic form {val:e} clamped to 0");
            }
            self.negative_clamps.fetch_add(1, Ordering::Relaxed);
            val = 0.0;
        }
        val.sqrt()
    }

    /// Rebuild a cache from persisted parts, refactorizing `M` (and the
    /// leave-one-out operator pieces for variant B caches).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        h_blocks: Vec<DMatrix<f64>>,
        gram: DMatrix<f64>,
        m_stacked: DMatrix<f64>,
        counts: Vec<Vec<f64>>,
        n: usize,
        sigma: f64,
        c_e_inv: f64,
        ridge: f64,
        variant: InfluenceVariant,
    ) -> Result<Self, InferenceError> {
        let block_dims: Vec<usize> = h_blocks.iter().map(|b| b.nrows()).collect();
        let mut offsets = Vec::with_capacity(block_dims.len());
        let mut dim = 0;
        for (k, &m_k) in block_dims.iter().enumerate() {
            assert_eq!(h_blocks[k].ncols(), m_k);
            assert_eq!(counts[k].len(), m_k);
            offsets.push(dim);
            dim += m_k;
        }
        assert_eq!(gram.nrows(), dim);
        assert_eq!(m_stacked.nrows(), dim);
        let chol = Cholesky::new(symmetrize(&m_stacked)).ok_or(InferenceError::MSingular)?;
        let loo = match variant {
            InfluenceVariant::A => None,
            InfluenceVariant::B => {
                let g_ext = extend_gram(&gram, &counts, &offsets, dim, n);
                Some(LooInfluence::build(&h_blocks, g_ext, &offsets, &block_dims, n)?)
            }
        };
        Ok(InferenceCache {
            block_dims,
            offsets,
            dim,
            ridge,
            h_blocks,
            gram,
            m_stacked,
            chol,
            counts,
            n,
            sigma,
            c_e_inv,
            variant,
            loo,
            negative_clamps: AtomicUsize::new(0),
        })
    }
}

/// Extended Gram `ΦᵀΦ` for `Φ = [Z⁽¹⁾ … Z⁽ᵖ⁾ 1]`, recovered from
/// `ZᵀJ_nZ` plus the bin counts: the raw block is `gram + c cᵀ/n`, the
/// ones column is the stacked counts and `1ᵀ1 = n`.
fn extend_gram(
    gram: &DMatrix<f64>,
    counts: &[Vec<f64>],
    offsets: &[usize],
    dim: usize,
    n: usize,
) -> DMatrix<f64> {
    let mut c = DVector::zeros(dim);
    for (k, ck) in counts.iter().enumerate() {
        for (r, &v) in ck.iter().enumerate() {
            c[offsets[k] + r] = v;
        }
    }
    let mut g = DMatrix::zeros(dim + 1, dim + 1);
    g.view_mut((0, 0), (dim, dim))
        .copy_from(&(gram + &c * c.transpose() / n as f64));
    for i in 0..dim {
        g[(i, dim)] = c[i];
        g[(dim, i)] = c[i];
    }
    g[(dim, dim)] = n as f64;
    g
}

/// `ZᵀJ_nZ` from bin assignments alone: diagonal blocks
/// `diag(c⁽ᵏ⁾) − c⁽ᵏ⁾c⁽ᵏ⁾ᵀ/n`, off-diagonal blocks
/// `C_ab − c⁽ᵃ⁾c⁽ᵇ⁾ᵀ/n` with `C_ab` the bin contingency table.
pub fn stacked_gram(binned: &BinnedDataset) -> DMatrix<f64> {
    let p = binned.n_features();
    let n = binned.n_samples();
    let dims: Vec<usize> = (0..p).map(|k| binned.bins(k)).collect();
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, &m| {
            let o = *acc;
            *acc += m;
            Some(o)
        })
        .collect();
    let dim: usize = dims.iter().sum();
    let mut c = DMatrix::zeros(dim, dim);
    for a in 0..p {
        let ia = binned.bin_indices(a);
        for (r, &cnt) in binned.counts(a).iter().enumerate() {
            c[(offsets[a] + r, offsets[a] + r)] = cnt as f64;
        }
        for b in (a + 1)..p {
            let ib = binned.bin_indices(b);
            for i in 0..n {
                let (ra, rb) = (ia[i] as usize, ib[i] as usize);
                c[(offsets[a] + ra, offsets[b] + rb)] += 1.0;
                c[(offsets[b] + rb, offsets[a] + ra)] += 1.0;
            }
        }
    }
    let mut counts = DVector::zeros(dim);
    for a in 0..p {
        for (r, &cnt) in binned.counts(a).iter().enumerate() {
            counts[offsets[a] + r] = cnt as f64;
        }
    }
    c - &counts * counts.transpose() / n as f64
}

/// Assemble the cache from the training accumulator: ridge and invert each
/// feature's mean kernel, build the stacked Gram from bin counts and
/// contingency tables, and factorize `M` once. `O((pm)³)` at build time.
pub fn build_cache(
    acc: &KernelAccumulator,
    binned: &BinnedDataset,
    sigma: f64,
    c_e_inv: f64,
    variant: Variant,
) -> Result<InferenceCache, InferenceError> {
    let p = acc.n_features();
    let n = binned.n_samples();
    let dims: Vec<usize> = (0..p).map(|k| acc.bins(k)).collect();
    let dim: usize = dims.iter().sum();

    let mut h_blocks = Vec::with_capacity(p);
    let mut m_stacked = stacked_gram(binned);
    let gram = m_stacked.clone();
    let mut off = 0;
    for k in 0..p {
        if acc.rounds_counted(k) == 0 {
            return Err(InferenceError::EmptyAccumulator(k));
        }
        let mut block = acc.mean_dbd_matrix(k);
        for i in 0..dims[k] {
            block[(i, i)] += H_RIDGE;
        }
        let inv = match Cholesky::new(block.clone()) {
            Some(ch) => symmetrize(&ch.inverse()),
            None => {
                let (min_eig, max_eig) = eig_range_sym(&block);
                return Err(InferenceError::HSingular {
                    feature: k,
                    ridge: H_RIDGE,
                    min_eig,
                    max_eig,
                });
            }
        };
        for i in 0..dims[k] {
            for j in 0..dims[k] {
                m_stacked[(off + i, off + j)] += inv[(i, j)];
            }
        }
        h_blocks.push(block);
        off += dims[k];
    }
    let m_stacked = symmetrize(&m_stacked);
    let chol = Cholesky::new(m_stacked.clone()).ok_or(InferenceError::MSingular)?;

    let counts: Vec<Vec<f64>> = (0..p)
        .map(|k| binned.counts(k).iter().map(|&c| c as f64).collect())
        .collect();
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, &m| {
            let o = *acc;
            *acc += m;
            Some(o)
        })
        .collect();
    let variant = InfluenceVariant::from(variant);
    let loo = match variant {
        InfluenceVariant::A => None,
        InfluenceVariant::B => {
            let g_ext = extend_gram(&gram, &counts, &offsets, dim, n);
            Some(LooInfluence::build(&h_blocks, g_ext, &offsets, &dims, n)?)
        }
    };
    Ok(InferenceCache {
        block_dims: dims,
        offsets,
        dim,
        ridge: H_RIDGE,
        h_blocks,
        gram,
        m_stacked,
        chol,
        counts,
        n,
        sigma,
        c_e_inv,
        variant,
        loo,
        negative_clamps: AtomicUsize::new(0),
    })
}

/// Noise-scale estimate `σ̂`: in-sample residuals against the rescaled fit
/// with a leaf-count degrees-of-freedom correction, or residuals against
/// the out-of-bag fit.
pub fn estimate_sigma(
    model: &EnsembleModel,
    binned: &BinnedDataset,
    y: &[f64],
    mode: SigmaMode,
) -> Result<f64, InferenceError> {
    let n = binned.n_samples();
    let df = model.df_proxy;
    if (n as f64) <= df {
        return Err(InferenceError::SigmaDf { n, df });
    }
    let fitted = match mode {
        SigmaMode::InSample => model.fitted_rescaled(binned),
        SigmaMode::Oob => model.fitted_oob(binned).ok_or(InferenceError::NoOobRecord)?,
    };
    let ss: f64 = y.iter().zip(&fitted).map(|(&yi, &fi)| (yi - fi) * (yi - fi)).sum();
    Ok((ss / (n as f64 - df)).sqrt())
}

/// `(1-α)` confidence interval for the feature-`k` effect at `x_k`:
/// `c_E⁻¹ f̂⁽ᵏ⁾ ± z_{1-α/2} c_E⁻¹ σ̂ ‖r⁽ᵏ⁾(x)‖`.
pub fn feature_ci(
    model: &EnsembleModel,
    cache: &InferenceCache,
    k: usize,
    x_k: f64,
    alpha: f64,
) -> IntervalResult {
    let rn = cache.r_norm(k, model.bin_of(k, x_k));
    let center = model.feature_effect(k, x_k);
    let half = z_two_sided(alpha) * cache.c_e_inv * cache.sigma * rn;
    interval(IntervalKind::FeatureCi, center, half, rn, alpha)
}

/// `β̂ ± z_{1-α/2} σ̂ / √n`.
pub fn intercept_ci(model: &EnsembleModel, cache: &InferenceCache, alpha: f64) -> IntervalResult {
    let rn = 1.0 / (cache.n as f64).sqrt();
    let half = z_two_sided(alpha) * cache.sigma * rn;
    interval(IntervalKind::InterceptCi, model.intercept, half, rn, alpha)
}

fn aggregate_r(model: &EnsembleModel, cache: &InferenceCache, x: &[f64], mode: OverallMode) -> f64 {
    let norms = (0..model.n_features()).map(|k| cache.r_norm(k, model.bin_of(k, x[k])));
    match mode {
        OverallMode::OrthogonalSum => norms.map(|r| r * r).sum::<f64>(),
        OverallMode::Conservative => {
            let s: f64 = norms.sum();
            s * s
        }
    }
}

/// `(1-α)` confidence interval for the response surface at `x`:
/// `f̂(x) ± z_{1-α/2} c_E⁻¹ σ̂ √(1/n + ‖Σ_k r⁽ᵏ⁾(x)‖²)`.
pub fn overall_ci(
    model: &EnsembleModel,
    cache: &InferenceCache,
    x: &[f64],
    alpha: f64,
    mode: OverallMode,
) -> IntervalResult {
    let agg = aggregate_r(model, cache, x, mode);
    let half = z_two_sided(alpha) * cache.c_e_inv * cache.sigma * (1.0 / cache.n as f64 + agg).sqrt();
    interval(IntervalKind::OverallCi, model.predict(x), half, agg.sqrt(), alpha)
}

fn plain_pi_half(model: &EnsembleModel, cache: &InferenceCache, x: &[f64], alpha: f64) -> (f64, f64) {
    let agg = aggregate_r(model, cache, x, OverallMode::OrthogonalSum);
    let half = z_two_sided(alpha) * cache.c_e_inv * cache.sigma * (1.0 + agg).sqrt();
    (half, agg.sqrt())
}

/// Split-conformal width multiplier: the `(1-α)` quantile of
/// `|residual| / half_width` over the calibration rows. Query-independent,
/// so batch callers compute it once per model.
pub fn conformal_factor(
    model: &EnsembleModel,
    cache: &InferenceCache,
    calibration: &CalibrationSet,
    alpha: f64,
) -> Result<f64, InferenceError> {
    if calibration.y.is_empty() {
        return Err(InferenceError::NoCalibration);
    }
    let ratios: Vec<f64> = calibration
        .x
        .iter()
        .zip(&calibration.y)
        .map(|(xj, &yj)| {
            let resid = (yj - model.predict(xj)).abs();
            let (hj, _) = plain_pi_half(model, cache, xj, alpha);
            if hj > 0.0 {
                resid / hj
            } else if resid == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    Ok(conformal_quantile(&ratios, 1.0 - alpha))
}

/// Prediction interval with a precomputed width multiplier (1 for plain).
pub fn prediction_interval_prescaled(
    model: &EnsembleModel,
    cache: &InferenceCache,
    x: &[f64],
    alpha: f64,
    width_factor: f64,
) -> IntervalResult {
    let (half, rn) = plain_pi_half(model, cache, x, alpha);
    interval(IntervalKind::Prediction, model.predict(x), half * width_factor, rn, alpha)
}

/// `(1-α)` prediction interval for a new response at `x`:
/// `f̂(x) ± z_{1-α/2} c_E⁻¹ σ̂ √(1 + ‖r(x)‖²)` with the orthogonal-sum
/// aggregate. With `conformal` the half-width is rescaled by the
/// `(1-α)` split-conformal quantile of `|residual| / half_width` on the
/// calibration rows.
pub fn prediction_interval(
    model: &EnsembleModel,
    cache: &InferenceCache,
    calibration: Option<&CalibrationSet>,
    x: &[f64],
    alpha: f64,
    conformal: bool,
) -> Result<IntervalResult, InferenceError> {
    let factor = if conformal {
        let cal = calibration.ok_or(InferenceError::NoCalibration)?;
        conformal_factor(model, cache, cal, alpha)?
    } else {
        1.0
    };
    Ok(prediction_interval_prescaled(model, cache, x, alpha, factor))
}

/// Reproduction interval for an independently retrained model's estimate:
/// the same center with the half-width scaled by √2.
pub fn reproduction_interval(base: &IntervalResult) -> Result<IntervalResult, InferenceError> {
    match base.kind {
        IntervalKind::FeatureCi | IntervalKind::InterceptCi | IntervalKind::OverallCi => {
            Ok(interval(
                IntervalKind::Reproduction,
                base.center,
                base.half_width * std::f64::consts::SQRT_2,
                base.r_norm,
                base.alpha,
            ))
        }
        other => Err(InferenceError::NotACi(other)),
    }
}

/// A variable-importance test at one point: `z = f̂⁽ᵏ⁾ / (c_E⁻¹ σ̂ ‖r⁽ᵏ⁾‖)`
/// with a two-sided normal p-value.
#[derive(Debug, Clone, Copy)]
pub struct Significance {
    pub z: f64,
    pub p_value: f64,
}

/// `None` when the test is undefined (`σ̂ = 0` or `‖r⁽ᵏ⁾‖ = 0`).
pub fn feature_significance(
    model: &EnsembleModel,
    cache: &InferenceCache,
    k: usize,
    x_k: f64,
) -> Option<Significance> {
    let rn = cache.r_norm(k, model.bin_of(k, x_k));
    let denom = cache.c_e_inv * cache.sigma * rn;
    if denom <= 0.0 {
        return None;
    }
    let z = model.feature_effect(k, x_k) / denom;
    Some(Significance {
        z,
        p_value: two_sided_p(z),
    })
}
