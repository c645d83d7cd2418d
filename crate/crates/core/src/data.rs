//! Tabular ingestion and per-feature quantile binning.
//!
//! Training and inference never touch raw feature values after this point:
//! every sample is reduced to a per-feature bin index, and all later
//! computation happens on the `m_k` bins of each feature. Bin edges are
//! quantile cut points (equal-count binning, the histogram-GBM convention),
//! deduplicated and then merged so that every bin holds at least one
//! training sample — downstream formulas divide by bin counts.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("target column {0:?} not found in header")]
    TargetMissing(String),
    #[error("zero usable rows after dropping {rejected} malformed rows")]
    ZeroUsableRows { rejected: usize },
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("dataset must contain at least one feature column")]
    NoFeatures,
    #[error("non-finite value in column {column} (row {row})")]
    NonFinite { column: String, row: usize },
}

/// A fully numeric design matrix in column-major layout plus the response.
#[derive(Debug, Clone)]
pub struct Dataset {
    feature_names: Vec<String>,
    /// `columns[k][i]` is feature `k` of sample `i`.
    columns: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl Dataset {
    /// Build from column-major features. Validates `n >= 2` and finiteness.
    pub fn from_columns(
        feature_names: Vec<String>,
        columns: Vec<Vec<f64>>,
        y: Vec<f64>,
    ) -> Result<Self, DataError> {
        if columns.is_empty() {
            return Err(DataError::NoFeatures);
        }
        let n = y.len();
        if n < 2 {
            return Err(DataError::TooFewRows(n));
        }
        assert_eq!(feature_names.len(), columns.len());
        for (k, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), n, "column {k} length mismatch");
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite {
                    column: feature_names[k].clone(),
                    row: i,
                });
            }
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                column: "<target>".into(),
                row: i,
            });
        }
        Ok(Self {
            feature_names,
            columns,
            y,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.columns[k]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Row `i` as a feature vector.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    /// Split rows into (kept, held out) by a boolean mask over samples.
    pub fn split_rows(&self, hold_out: &[bool]) -> (Dataset, Dataset) {
        assert_eq!(hold_out.len(), self.n_samples());
        let pick = |keep_held: bool| -> Dataset {
            let idx: Vec<usize> = (0..self.n_samples())
                .filter(|&i| hold_out[i] == keep_held)
                .collect();
            Dataset {
                feature_names: self.feature_names.clone(),
                columns: self
                    .columns
                    .iter()
                    .map(|c| idx.iter().map(|&i| c[i]).collect())
                    .collect(),
                y: idx.iter().map(|&i| self.y[i]).collect(),
            }
        };
        (pick(false), pick(true))
    }
}

/// What `load_csv` dropped and why.
#[derive(Debug, Clone, Default)]
pub struct RowRejection {
    /// Number of data rows dropped (missing cell, non-numeric, or non-finite).
    pub rejected: usize,
    /// 1-based line numbers of the first few dropped rows.
    pub sample_lines: Vec<u64>,
}

/// Load a comma-separated file with one header row; `target` names the
/// response column and every other column must parse as a finite float.
/// Rows with any missing or unparsable cell are dropped and counted.
pub fn load_csv(path: impl AsRef<Path>, target: &str) -> Result<(Dataset, RowRejection), DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);

    let headers = reader.headers()?.clone();
    let target_idx = headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| DataError::TargetMissing(target.to_string()))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    if feature_names.is_empty() {
        return Err(DataError::NoFeatures);
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); feature_names.len()];
    let mut y = Vec::new();
    let mut report = RowRejection::default();

    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parsed: Option<Vec<f64>> = if record.len() == headers.len() {
            record
                .iter()
                .map(|cell| cell.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect()
        } else {
            None
        };
        match parsed {
            Some(vals) => {
                y.push(vals[target_idx]);
                let mut kk = 0;
                for (i, v) in vals.into_iter().enumerate() {
                    if i != target_idx {
                        columns[kk].push(v);
                        kk += 1;
                    }
                }
            }
            None => {
                report.rejected += 1;
                if report.sample_lines.len() < 8 {
                    report.sample_lines.push(line);
                }
            }
        }
    }

    if y.is_empty() {
        return Err(DataError::ZeroUsableRows {
            rejected: report.rejected,
        });
    }
    let ds = Dataset::from_columns(feature_names, columns, y)?;
    Ok((ds, report))
}

/// Per-feature quantile binning of a [`Dataset`]: sorted strictly-increasing
/// cut points, per-sample bin indices, and per-bin counts. Immutable after
/// construction and safe to share across threads.
#[derive(Debug, Clone)]
pub struct BinnedDataset {
    feature_names: Vec<String>,
    /// `edges[k]`: strictly increasing cut points; bin count is `edges[k].len() + 1`.
    edges: Vec<Vec<f64>>,
    /// `bin_index[k][i]`: bin of sample `i` along feature `k`.
    bin_index: Vec<Vec<u16>>,
    /// `counts[k][r]`: samples in bin `r` of feature `k`; every entry >= 1.
    counts: Vec<Vec<u32>>,
    /// Observed (min, max) per feature, kept for query grids.
    value_range: Vec<(f64, f64)>,
    n: usize,
}

impl BinnedDataset {
    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_features(&self) -> usize {
        self.edges.len()
    }

    /// Number of bins `m_k` for feature `k`.
    pub fn bins(&self, k: usize) -> usize {
        self.edges[k].len() + 1
    }

    /// Largest `m_k` across features: the common padded grid size.
    pub fn max_bins_used(&self) -> usize {
        (0..self.n_features()).map(|k| self.bins(k)).max().unwrap()
    }

    pub fn edges(&self, k: usize) -> &[f64] {
        &self.edges[k]
    }

    pub fn all_edges(&self) -> &[Vec<f64>] {
        &self.edges
    }

    pub fn counts(&self, k: usize) -> &[u32] {
        &self.counts[k]
    }

    pub fn bin_indices(&self, k: usize) -> &[u16] {
        &self.bin_index[k]
    }

    pub fn bin_index(&self, i: usize, k: usize) -> usize {
        self.bin_index[k][i] as usize
    }

    pub fn value_range(&self, k: usize) -> (f64, f64) {
        self.value_range[k]
    }

    /// Features that collapsed to a single bin (constant columns).
    pub fn constant_features(&self) -> Vec<usize> {
        (0..self.n_features()).filter(|&k| self.bins(k) == 1).collect()
    }

    /// Bin of an arbitrary value along feature `k`, right-closed:
    /// `x >= edge` goes to the right bin, out-of-range values clamp to the
    /// boundary bins.
    pub fn bin_of(&self, k: usize, x: f64) -> usize {
        bin_of(&self.edges[k], x)
    }
}

/// Edge bisection with the right-closed convention (`x >= edge` goes right).
pub fn bin_of(edges: &[f64], x: f64) -> usize {
    edges.partition_point(|&e| x >= e)
}

/// Quantile-bin every feature into at most `max_bins` equal-count bins.
///
/// Duplicate quantile edges collapse, and edges bounding an empty bin are
/// removed (merging the bin into its left neighbor) until every bin holds
/// at least one sample. A constant feature yields a single bin.
pub fn bin_features(ds: &Dataset, max_bins: usize) -> BinnedDataset {
    assert!(max_bins >= 2, "max_bins must be at least 2");
    assert!(max_bins <= u16::MAX as usize + 1, "max_bins exceeds bin index width");
    let n = ds.n_samples();

    let mut edges = Vec::with_capacity(ds.n_features());
    let mut bin_index = Vec::with_capacity(ds.n_features());
    let mut counts = Vec::with_capacity(ds.n_features());
    let mut value_range = Vec::with_capacity(ds.n_features());

    for k in 0..ds.n_features() {
        let col = ds.column(k);
        let mut sorted = col.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        value_range.push((sorted[0], sorted[n - 1]));

        let mut cuts: Vec<f64> = if sorted[0] == sorted[n - 1] {
            Vec::new()
        } else {
            // Linear-interpolation quantiles at j/max_bins, j = 1..max_bins-1.
            (1..max_bins)
                .map(|j| {
                    let pos = (j as f64 / max_bins as f64) * (n - 1) as f64;
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(n - 1);
                    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
                })
                .collect()
        };
        cuts.dedup();

        // Drop edges that bound an empty bin. Right-closed assignment means
        // bin r covers [cuts[r-1], cuts[r]); scan counts and remove the
        // offending edge until all bins are populated.
        loop {
            let mut c = vec![0u32; cuts.len() + 1];
            for &x in col {
                c[bin_of(&cuts, x)] += 1;
            }
            match c.iter().position(|&v| v == 0) {
                None => {
                    let idx: Vec<u16> = col.iter().map(|&x| bin_of(&cuts, x) as u16).collect();
                    edges.push(cuts);
                    bin_index.push(idx);
                    counts.push(c);
                    break;
                }
                Some(r) => {
                    cuts.remove(r.saturating_sub(1));
                }
            }
        }
    }

    BinnedDataset {
        feature_names: ds.feature_names().to_vec(),
        edges,
        bin_index,
        counts,
        value_range,
        n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds_from(cols: Vec<Vec<f64>>, y: Vec<f64>) -> Dataset {
        let names = (0..cols.len()).map(|k| format!("x{}", k + 1)).collect();
        Dataset::from_columns(names, cols, y).unwrap()
    }

    #[test]
    fn median_split_of_four_values() {
        let ds = ds_from(vec![vec![1.0, 2.0, 3.0, 4.0]], vec![0.0; 4]);
        let b = bin_features(&ds, 2);
        assert_eq!(b.edges(0), &[2.5]);
        assert_eq!(b.bin_indices(0), &[0, 0, 1, 1]);
        assert_eq!(b.counts(0), &[2, 2]);
    }

    #[test]
    fn constant_feature_single_bin() {
        let ds = ds_from(vec![vec![7.0, 7.0, 7.0]], vec![0.0; 3]);
        let b = bin_features(&ds, 255);
        assert_eq!(b.bins(0), 1);
        assert_eq!(b.counts(0), &[3]);
        assert_eq!(b.constant_features(), vec![0]);
    }

    #[test]
    fn uniform_draws_fill_all_bins() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let col: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>()).collect();
        let n = col.len();
        let ds = ds_from(vec![col], vec![0.0; n]);
        let b = bin_features(&ds, 255);
        assert_eq!(b.bins(0), 255);
        assert_eq!(b.counts(0).iter().map(|&c| c as usize).sum::<usize>(), 1000);
        assert!(b.counts(0).iter().all(|&c| c >= 1));
    }

    #[test]
    fn right_closed_convention_and_clamping() {
        assert_eq!(bin_of(&[2.5], 1.0), 0);
        assert_eq!(bin_of(&[2.5], 2.5), 1);
        assert_eq!(bin_of(&[1.0, 2.0], 99.0), 2);
        assert_eq!(bin_of(&[1.0, 2.0], -99.0), 0);
    }

    #[test]
    fn csv_round_trip_with_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "a,y\n1.0,2.0\noops,3.0\n2.5,4.0\n5.0,6.0\n").unwrap();
        let (ds, rep) = load_csv(&path, "y").unwrap();
        assert_eq!(ds.n_samples(), 3);
        assert_eq!(ds.n_features(), 1);
        assert_eq!(rep.rejected, 1);
        assert_eq!(ds.y(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "a,y\n").unwrap();
        match load_csv(&path, "y") {
            Err(DataError::ZeroUsableRows { .. }) => {}
            other => panic!("expected ZeroUsableRows, got {other:?}"),
        }
        match load_csv(&path, "z") {
            Err(DataError::TargetMissing(_)) => {}
            other => panic!("expected TargetMissing, got {other:?}"),
        }
        assert!(load_csv(dir.path().join("absent.csv"), "y").is_err());
    }

    #[test]
    fn missing_cell_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "a,b,y\n1,2,3\n1,,3\n4,5,6\n").unwrap();
        let (ds, rep) = load_csv(&path, "y").unwrap();
        assert_eq!(ds.n_samples(), 2);
        assert_eq!(rep.rejected, 1);
    }

    proptest! {
        /// Shuffling rows changes neither edges nor counts, and stored bin
        /// indices agree with `bin_of` on every training sample.
        #[test]
        fn binning_permutation_invariant(mut xs in proptest::collection::vec(-50.0f64..50.0, 8..60),
                                         rot in 0usize..50,
                                         max_bins in 2usize..12) {
            let n = xs.len();
            let ds = ds_from(vec![xs.clone()], vec![0.0; n]);
            let b = bin_features(&ds, max_bins);

            xs.rotate_left(rot % n);
            let ds2 = ds_from(vec![xs.clone()], vec![0.0; n]);
            let b2 = bin_features(&ds2, max_bins);

            prop_assert_eq!(b.edges(0), b2.edges(0));
            prop_assert_eq!(b.counts(0), b2.counts(0));
            prop_assert_eq!(b.counts(0).iter().map(|&c| c as usize).sum::<usize>(), n);
            for (i, &x) in xs.iter().enumerate() {
                prop_assert_eq!(b2.bin_index(i, 0), b2.bin_of(0, x));
            }
        }
    }
}
