//! Tabular regression data: CSV loading, a synthetic generator with known
//! feature relevance, z-score standardization, train/test splits and
//! per-client column views.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::rng::SimRng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("label column `{0}` not found in header")]
    MissingLabel(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a finite number")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row} has {found} cells, header has {expected}")]
    RaggedRow {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("duplicate feature name `{0}`")]
    DuplicateName(String),
    #[error("need at least {need} rows, found {found}")]
    TooFewRows { need: usize, found: usize },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("column index {0} out of range")]
    ColumnOutOfRange(usize),
    #[error("column index {0} listed twice")]
    DuplicateColumn(usize),
    #[error("a client must own at least one feature")]
    EmptyColumns,
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Samples × features matrix with one regression label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<f64>,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<f64>, feature_names: Vec<String>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(DatasetError::Invalid(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if feature_names.len() != features.cols() {
            return Err(DatasetError::Invalid(format!(
                "{} names for {} columns",
                feature_names.len(),
                features.cols()
            )));
        }
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(DatasetError::DuplicateName(name.clone()));
            }
        }
        if !features.is_finite() || labels.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::Invalid("non-finite value".into()));
        }
        Ok(Self {
            features,
            labels,
            feature_names,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Reads a comma-separated file with one header row. The label column is
/// removed from the feature set; every other column becomes a feature.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, label_column)
}

pub fn read_csv<R: std::io::Read>(reader: R, label_column: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DatasetError::MissingLabel(label_column.to_owned()))?;

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        // 1-based data row numbering, header excluded
        let row = i + 1;
        if record.len() != header.len() {
            return Err(DatasetError::RaggedRow {
                row,
                found: record.len(),
                expected: header.len(),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let value = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DatasetError::BadCell {
                    row,
                    column: header[c].clone(),
                    value: cell.to_owned(),
                })?;
            if c == label_idx {
                labels.push(value);
            } else {
                data.push(value);
            }
        }
    }
    if labels.len() < 2 {
        return Err(DatasetError::TooFewRows {
            need: 2,
            found: labels.len(),
        });
    }
    let names: Vec<String> = header
        .into_iter()
        .enumerate()
        .filter(|&(c, _)| c != label_idx)
        .map(|(_, h)| h)
        .collect();
    let features = Matrix::from_vec(labels.len(), names.len(), data);
    Dataset::new(features, labels, names)
}

/// Weight of the `rank`-th informative feature (0-based, ascending column order).
pub fn synthetic_weight(rank: usize) -> f64 {
    1.0 / (1.0 + 0.25 * rank as f64)
}

/// Coefficient of the squared term on the first informative feature.
pub const SYNTHETIC_SQUARE_COEF: f64 = 0.25;

/// Generates `x ~ N(0, I)` and
/// `y = Σ_r w_r·x[j_r] + 0.25·x[j_0]² + ε`, `ε ~ N(0, noise_std²)`,
/// where `j_0 < j_1 < …` are the informative columns and
/// `w_r = 1 / (1 + r/4)`. Relevance therefore decreases with column index
/// among informative features and is zero elsewhere.
pub fn generate_synthetic(
    n_samples: usize,
    n_features: usize,
    informative: &[usize],
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_samples < 2 {
        return Err(DatasetError::TooFewRows {
            need: 2,
            found: n_samples,
        });
    }
    if n_features == 0 {
        return Err(DatasetError::Invalid("n_features must be ≥ 1".into()));
    }
    if informative.is_empty() {
        return Err(DatasetError::Invalid("informative set is empty".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(DatasetError::Invalid("noise_std must be finite and ≥ 0".into()));
    }
    let mut cols: Vec<usize> = informative.to_vec();
    cols.sort_unstable();
    cols.dedup();
    if let Some(&bad) = cols.iter().find(|&&c| c >= n_features) {
        return Err(DatasetError::ColumnOutOfRange(bad));
    }

    let mut rng = SimRng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n_samples, n_features);
    for v in x.as_mut_slice() {
        *v = StandardNormal.sample(&mut rng);
    }
    let mut labels = Vec::with_capacity(n_samples);
    for r in 0..n_samples {
        let row = x.row(r);
        let mut y: f64 = cols
            .iter()
            .enumerate()
            .map(|(rank, &c)| synthetic_weight(rank) * row[c])
            .sum();
        y += SYNTHETIC_SQUARE_COEF * row[cols[0]] * row[cols[0]];
        if noise_std > 0.0 {
            let e: f64 = StandardNormal.sample(&mut rng);
            y += noise_std * e;
        }
        labels.push(y);
    }
    let names = (0..n_features).map(|j| format!("f{j}")).collect();
    Dataset::new(x, labels, names)
}

/// Per-feature population mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Population z-scores per column. Constant columns become all zeros.
pub fn standardize(ds: &Dataset) -> (Dataset, Standardization) {
    let (n, j) = ds.features.shape();
    let mut mean = vec![0.0; j];
    let mut std = vec![0.0; j];
    let mut out = ds.features.clone();
    for c in 0..j {
        let col = ds.features.column(c);
        let m = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        let s = var.sqrt();
        mean[c] = m;
        std[c] = s;
        for r in 0..n {
            out[(r, c)] = if s > 0.0 { (col[r] - m) / s } else { 0.0 };
        }
    }
    let standardized = Dataset {
        features: out,
        labels: ds.labels.clone(),
        feature_names: ds.feature_names.clone(),
    };
    (standardized, Standardization { mean, std })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Shuffles the sample indices and takes `round(test_fraction·n)` of them as test.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<DataSplit> {
    split_indices(ds.n_samples(), test_fraction, seed)
}

pub fn split_indices(n_samples: usize, test_fraction: f64, seed: u64) -> Result<DataSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::Invalid(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let n_test = (test_fraction * n_samples as f64).round() as usize;
    if n_test < 1 || n_samples < n_test + 2 {
        return Err(DatasetError::Invalid(format!(
            "split of {n_samples} samples at {test_fraction} leaves {n_test} test / {} train",
            n_samples.saturating_sub(n_test)
        )));
    }
    let mut idx: Vec<usize> = (0..n_samples).collect();
    idx.shuffle(&mut SimRng::seed_from_u64(seed));
    let test_indices = idx[..n_test].to_vec();
    let train_indices = idx[n_test..].to_vec();
    Ok(DataSplit {
        train_indices,
        test_indices,
    })
}

/// The subset of columns one client holds, over all samples in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientView {
    pub client_id: usize,
    pub columns: Vec<usize>,
    pub data: Matrix,
}

impl ClientView {
    /// Rows of this view at the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Matrix {
        self.data.select_rows(indices)
    }
}

pub fn project(ds: &Dataset, columns: &[usize], client_id: usize) -> Result<ClientView> {
    if columns.is_empty() {
        return Err(DatasetError::EmptyColumns);
    }
    let mut seen = vec![false; ds.n_features()];
    for &c in columns {
        if c >= ds.n_features() {
            return Err(DatasetError::ColumnOutOfRange(c));
        }
        if std::mem::replace(&mut seen[c], true) {
            return Err(DatasetError::DuplicateColumn(c));
        }
    }
    Ok(ClientView {
        client_id,
        columns: columns.to_vec(),
        data: ds.features.select_columns(columns),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        read_csv("f1,f2,qoe\n1,2,0.5\n3,4,0.9\n".as_bytes(), "qoe").unwrap()
    }

    #[test]
    fn parses_minimal_csv() {
        let ds = small();
        assert_eq!(ds.n_samples(), 2);
        assert_eq!(ds.n_features(), 2);
        assert_eq!(ds.labels(), &[0.5, 0.9]);
        assert_eq!(ds.feature_names(), &["f1".to_string(), "f2".to_string()]);
        assert_eq!(ds.features().as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn label_column_may_sit_anywhere() {
        let ds = read_csv("qoe,a,b\n1,2,3\n4,5,6\n".as_bytes(), "qoe").unwrap();
        assert_eq!(ds.labels(), &[1.0, 4.0]);
        assert_eq!(ds.features().as_slice(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn rejects_nan_with_location() {
        let err = read_csv("f1,f2,qoe\n1,2,0.5\n3,NaN,0.9\n".as_bytes(), "qoe").unwrap_err();
        match err {
            DatasetError::BadCell { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "f2");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_missing_label_and_short_files() {
        assert!(matches!(
            read_csv("a,b\n1,2\n3,4\n".as_bytes(), "qoe"),
            Err(DatasetError::MissingLabel(_))
        ));
        assert!(matches!(
            read_csv("a,qoe\n1,2\n".as_bytes(), "qoe"),
            Err(DatasetError::TooFewRows { .. })
        ));
        assert!(matches!(
            load_csv("/nonexistent/file.csv", "qoe"),
            Err(DatasetError::Io { .. })
        ));
    }

    #[test]
    fn synthetic_single_feature_is_exact() {
        let ds = generate_synthetic(100, 5, &[0], 0.0, 7).unwrap();
        for r in 0..ds.n_samples() {
            let x0 = ds.features()[(r, 0)];
            let expect = x0 + SYNTHETIC_SQUARE_COEF * x0 * x0;
            assert_eq!(ds.labels()[r], expect);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(50, 4, &[0, 2], 0.3, 7).unwrap();
        let b = generate_synthetic(50, 4, &[0, 2], 0.3, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(50, 4, &[0, 2], 0.3, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_rejects_bad_parameters() {
        assert!(generate_synthetic(10, 3, &[], 0.0, 1).is_err());
        assert!(generate_synthetic(1, 3, &[0], 0.0, 1).is_err());
        assert!(generate_synthetic(10, 3, &[3], 0.0, 1).is_err());
        assert!(generate_synthetic(10, 3, &[0], -1.0, 1).is_err());
    }

    #[test]
    fn standardize_hand_values() {
        let x = Matrix::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]]);
        let ds = Dataset::new(x, vec![0.0, 1.0, 2.0], vec!["a".into(), "b".into()]).unwrap();
        let (z, stats) = standardize(&ds);
        // population z-scores of (1, 2, 3): ±1/sqrt(2/3)
        let e = 1.0 / (2.0f64 / 3.0).sqrt();
        for (r, want) in [-e, 0.0, e].into_iter().enumerate() {
            assert!((z.features()[(r, 0)] - want).abs() < 1e-12);
            assert!((z.features()[(r, 0)] - [-1.2247, 0.0, 1.2247][r]).abs() < 1e-3);
            assert_eq!(z.features()[(r, 1)], 0.0);
        }
        assert_eq!(stats.mean, vec![2.0, 5.0]);
        assert_eq!(stats.std[1], 0.0);
    }

    #[test]
    fn standardize_is_idempotent() {
        let ds = generate_synthetic(200, 6, &[0, 1], 0.5, 3).unwrap();
        let (once, _) = standardize(&ds);
        let (twice, _) = standardize(&once);
        for (a, b) in once.features().as_slice().iter().zip(twice.features().as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
        for c in 0..once.n_features() {
            let col = once.features().column(c);
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 1e-9);
            assert!((v.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split_indices(10, 0.2, 5).unwrap();
        assert_eq!(s.test_indices.len(), 2);
        assert_eq!(s.train_indices.len(), 8);
        let all: HashSet<_> = s.train_indices.iter().chain(&s.test_indices).collect();
        assert_eq!(all.len(), 10);
        assert_eq!(s, split_indices(10, 0.2, 5).unwrap());
        assert_ne!(split_indices(40, 0.25, 1).unwrap(), split_indices(40, 0.25, 2).unwrap());
    }

    #[test]
    fn split_boundaries() {
        assert!(split_indices(10, 0.0, 1).is_err());
        assert!(split_indices(10, 1.0, 1).is_err());
        // 0.99·10 rounds to 10 test samples, leaving no training data
        assert!(split_indices(10, 0.99, 1).is_err());
        // 0.8·10 leaves exactly two training samples
        assert_eq!(split_indices(10, 0.8, 1).unwrap().train_indices.len(), 2);
    }

    #[test]
    fn projection_rules() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let ds = Dataset::new(x, vec![0.0, 1.0], vec!["a".into(), "b".into(), "c".into()])
            .unwrap();
        assert!(matches!(project(&ds, &[], 0), Err(DatasetError::EmptyColumns)));
        assert!(matches!(project(&ds, &[0, 0], 0), Err(DatasetError::DuplicateColumn(0))));
        assert!(matches!(project(&ds, &[3], 0), Err(DatasetError::ColumnOutOfRange(3))));
        let v = project(&ds, &[2, 0], 1).unwrap();
        assert_eq!(v.data.as_slice(), &[3.0, 1.0, 6.0, 4.0]);
        let full = project(&ds, &[0, 1, 2], 0).unwrap();
        assert_eq!(&full.data, ds.features());
    }
}
