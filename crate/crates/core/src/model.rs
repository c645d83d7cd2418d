//! The end-to-end fit pipeline and the versioned on-disk model container.
//!
//! A model file is a self-describing JSON document holding everything a
//! later process needs to predict and to answer interval queries: binning
//! edges, raw effects, intercept, the aggregated bin kernel `H` with its
//! per-feature blocks, the `M⁽ᵏ⁾` system matrices, bin counts, `σ̂`, the
//! config echo, and the optional conformal calibration split. Floats are
//! written in shortest-round-trip decimal form, so save → load → save is
//! byte-identical.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boost::{train, BoostError, EnsembleModel, TrainConfig, Variant};
use crate::data::{bin_features, DataError, Dataset};
use crate::inference::{
    build_cache, estimate_sigma, CalibrationSet, InferenceCache, InferenceError, SigmaMode,
};
use crate::oracle::InfluenceVariant;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Boost(#[from] BoostError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("model file parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported model format version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("model file inconsistent: {0}")]
    Corrupt(String),
    #[error("invalid fit options: {0}")]
    BadOptions(String),
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_bins: usize,
    /// Fraction of rows held out (before binning) for conformal
    /// calibration; 0 disables the split.
    pub calibration_fraction: f64,
    pub sigma_mode: SigmaMode,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_bins: 255,
            calibration_fraction: 0.0,
            sigma_mode: SigmaMode::InSample,
        }
    }
}

/// A trained ensemble bundled with its inference cache and optional
/// calibration split: the unit of persistence.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub ensemble: EnsembleModel,
    pub cache: InferenceCache,
    pub calibration: Option<CalibrationSet>,
    /// Which input rows were held out for calibration (training-time
    /// bookkeeping; not persisted).
    pub holdout: Option<Vec<bool>>,
}

/// Train end to end: optional calibration split, binning on the training
/// rows, the boosting loop, `σ̂`, and the bin-space cache.
pub fn fit_dataset(
    ds: &Dataset,
    cfg: TrainConfig,
    opts: &FitOptions,
) -> Result<FittedModel, ModelError> {
    if !(0.0..0.9).contains(&opts.calibration_fraction) {
        return Err(ModelError::BadOptions(format!(
            "calibration fraction must be in [0, 0.9), got {}",
            opts.calibration_fraction
        )));
    }
    let (train_ds, calibration, holdout) = if opts.calibration_fraction > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00CA_11B8);
        let mask: Vec<bool> = (0..ds.n_samples())
            .map(|_| rng.gen::<f64>() < opts.calibration_fraction)
            .collect();
        if mask.iter().filter(|&&h| !h).count() < 2 || mask.iter().filter(|&&h| h).count() == 0 {
            return Err(ModelError::BadOptions(
                "calibration split left too few rows on one side".into(),
            ));
        }
        let (train_ds, cal_ds) = ds.split_rows(&mask);
        let cal = CalibrationSet {
            x: (0..cal_ds.n_samples()).map(|i| cal_ds.row(i)).collect(),
            y: cal_ds.y().to_vec(),
        };
        (train_ds, Some(cal), Some(mask))
    } else {
        (ds.clone(), None, None)
    };

    let binned = bin_features(&train_ds, opts.max_bins);
    let (ensemble, acc) = train(&binned, train_ds.y(), cfg)?;
    let sigma = estimate_sigma(&ensemble, &binned, train_ds.y(), opts.sigma_mode)?;
    let cache = build_cache(&acc, &binned, sigma, ensemble.c_e_inv, ensemble.variant)?;
    Ok(FittedModel {
        ensemble,
        cache,
        calibration,
        holdout,
    })
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ModelError> {
    let r = rows.len();
    if r == 0 {
        return Err(ModelError::Corrupt(format!("{what}: empty matrix")));
    }
    let c = rows[0].len();
    if rows.iter().any(|row| row.len() != c) {
        return Err(ModelError::Corrupt(format!("{what}: ragged matrix rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// The serialized document. Field order is fixed, which together with
/// shortest-round-trip float formatting makes round-trips byte-exact.
#[derive(Debug, Serialize, Deserialize)]
struct SavedModel {
    format_version: u32,
    variant: Variant,
    lambda: f64,
    c_e_inv: f64,
    rounds: usize,
    burn_in: usize,
    seed: u64,
    feature_names: Vec<String>,
    edges: Vec<Vec<f64>>,
    value_range: Vec<(f64, f64)>,
    effects: Vec<Vec<f64>>,
    intercept: f64,
    ybar: f64,
    df_proxy: f64,
    avg_leaves: Vec<f64>,
    n: usize,
    sigma: f64,
    h_ridge: f64,
    h_blocks: Vec<Vec<Vec<f64>>>,
    gram: Vec<Vec<f64>>,
    m_stacked: Vec<Vec<f64>>,
    counts: Vec<Vec<f64>>,
    calibration: Option<CalibrationSet>,
    config: TrainConfig,
}

/// Serialize a fitted model to the versioned JSON text format.
pub fn to_model_string(fitted: &FittedModel) -> Result<String, ModelError> {
    let e = &fitted.ensemble;
    let c = &fitted.cache;
    let saved = SavedModel {
        format_version: FORMAT_VERSION,
        variant: e.variant,
        lambda: e.lambda,
        c_e_inv: e.c_e_inv,
        rounds: e.rounds,
        burn_in: e.burn_in,
        seed: e.seed,
        feature_names: e.feature_names.clone(),
        edges: e.edges.clone(),
        value_range: e.value_range.clone(),
        effects: e.effects.clone(),
        intercept: e.intercept,
        ybar: e.ybar,
        df_proxy: e.df_proxy,
        avg_leaves: e.avg_leaves.clone(),
        n: c.n_samples(),
        sigma: c.sigma(),
        h_ridge: c.ridge(),
        h_blocks: (0..e.n_features()).map(|k| matrix_to_rows(c.h_block(k))).collect(),
        gram: matrix_to_rows(c.gram_matrix()),
        m_stacked: matrix_to_rows(c.m_matrix()),
        counts: (0..e.n_features()).map(|k| c.counts(k).to_vec()).collect(),
        calibration: fitted.calibration.clone(),
        config: e.config.clone(),
    };
    let mut s = serde_json::to_string_pretty(&saved)?;
    s.push('\n');
    Ok(s)
}

/// Parse the text format back into a usable model, validating the version
/// and every matrix dimension.
pub fn from_model_string(text: &str) -> Result<FittedModel, ModelError> {
    let saved: SavedModel = serde_json::from_str(text)?;
    if saved.format_version != FORMAT_VERSION {
        return Err(ModelError::Version(saved.format_version));
    }
    let p = saved.feature_names.len();
    for (name, len) in [
        ("edges", saved.edges.len()),
        ("value_range", saved.value_range.len()),
        ("effects", saved.effects.len()),
        ("h_blocks", saved.h_blocks.len()),
        ("counts", saved.counts.len()),
        ("avg_leaves", saved.avg_leaves.len()),
    ] {
        if len != p {
            return Err(ModelError::Corrupt(format!(
                "{name} has {len} entries for {p} features"
            )));
        }
    }
    for k in 0..p {
        if saved.effects[k].len() != saved.edges[k].len() + 1 {
            return Err(ModelError::Corrupt(format!(
                "feature {k}: {} effects for {} edges",
                saved.effects[k].len(),
                saved.edges[k].len()
            )));
        }
    }
    let h_blocks = saved
        .h_blocks
        .iter()
        .enumerate()
        .map(|(k, rows)| {
            let b = matrix_from_rows(rows, &format!("H block {k}"))?;
            if b.nrows() != saved.effects[k].len() || b.ncols() != b.nrows() {
                return Err(ModelError::Corrupt(format!(
                    "H block {k} is {}x{} for {} bins",
                    b.nrows(),
                    b.ncols(),
                    saved.effects[k].len()
                )));
            }
            Ok(b)
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let dim: usize = h_blocks.iter().map(|b| b.nrows()).sum();
    let gram = matrix_from_rows(&saved.gram, "gram")?;
    let m_stacked = matrix_from_rows(&saved.m_stacked, "M")?;
    for (name, m) in [("gram", &gram), ("M", &m_stacked)] {
        if m.nrows() != dim || m.ncols() != dim {
            return Err(ModelError::Corrupt(format!(
                "{name} is {}x{}, stacked dimension is {dim}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    for (k, c) in saved.counts.iter().enumerate() {
        if c.len() != saved.effects[k].len() {
            return Err(ModelError::Corrupt(format!(
                "counts {k} has {} entries for {} bins",
                c.len(),
                saved.effects[k].len()
            )));
        }
    }

    let cache = InferenceCache::from_parts(
        h_blocks,
        gram,
        m_stacked,
        saved.counts,
        saved.n,
        saved.sigma,
        saved.c_e_inv,
        saved.h_ridge,
        InfluenceVariant::from(saved.variant),
    )?;
    let ensemble = EnsembleModel {
        variant: saved.variant,
        lambda: saved.lambda,
        c_e_inv: saved.c_e_inv,
        rounds: saved.rounds,
        burn_in: saved.burn_in,
        seed: saved.seed,
        feature_names: saved.feature_names,
        edges: saved.edges,
        value_range: saved.value_range,
        effects: saved.effects,
        intercept: saved.intercept,
        ybar: saved.ybar,
        df_proxy: saved.df_proxy,
        avg_leaves: saved.avg_leaves,
        structure_pools: Vec::new(),
        oob: None,
        config: saved.config,
    };
    Ok(FittedModel {
        ensemble,
        cache,
        calibration: saved.calibration,
        holdout: None,
    })
}

pub fn save_model(fitted: &FittedModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let text = to_model_string(fitted)?;
    std::fs::write(path, text).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FittedModel, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_model_string(&text)
}
