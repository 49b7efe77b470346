use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Matrix;

/// Contiguous one-hot column range produced from one categorical column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub source: String,
    pub start: usize,
    pub end: usize,
}

/// Per-column affine map applied during ingestion: `stored = (raw − mean) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub mean: f64,
    pub scale: f64,
}

impl ColumnScale {
    pub fn restore(&self, stored: f64) -> f64 {
        stored * self.scale + self.mean
    }
}

/// Tabular dataset of nonsensitive features `x`, sensitive attribute `a` and
/// binary label `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Matrix,
    a: Vec<usize>,
    y: Vec<u8>,
    sensitive_classes: usize,
    feature_names: Vec<String>,
    feature_groups: Vec<FeatureGroup>,
    scales: Vec<ColumnScale>,
}

impl Dataset {
    pub fn new(x: Matrix, a: Vec<usize>, y: Vec<u8>, sensitive_classes: usize) -> Result<Self> {
        let names = (0..x.cols()).map(|j| format!("x{j}")).collect();
        Dataset::with_metadata(x, a, y, sensitive_classes, names, Vec::new(), Vec::new())
    }

    pub fn with_metadata(
        x: Matrix,
        a: Vec<usize>,
        y: Vec<u8>,
        sensitive_classes: usize,
        feature_names: Vec<String>,
        feature_groups: Vec<FeatureGroup>,
        scales: Vec<ColumnScale>,
    ) -> Result<Self> {
        let n = x.rows();
        if n == 0 {
            return Err(Error::InvalidConfig("dataset has no rows".into()));
        }
        if a.len() != n || y.len() != n {
            return Err(Error::InvalidConfig(format!(
                "row count mismatch: x {n}, a {}, y {}",
                a.len(),
                y.len()
            )));
        }
        if sensitive_classes < 2 {
            return Err(Error::InvalidConfig("need at least two sensitive classes".into()));
        }
        if let Some(&bad) = a.iter().find(|&&v| v >= sensitive_classes) {
            return Err(Error::InvalidConfig(format!(
                "sensitive value {bad} out of range for K = {sensitive_classes}"
            )));
        }
        if y.iter().any(|&v| v > 1) {
            return Err(Error::InvalidConfig("labels must be binary".into()));
        }
        if feature_names.len() != x.cols() {
            return Err(Error::InvalidConfig("feature name count mismatch".into()));
        }
        if !x.is_finite() {
            return Err(Error::InvalidConfig("non-finite feature value".into()));
        }
        Ok(Dataset {
            x,
            a,
            y,
            sensitive_classes,
            feature_names,
            feature_groups,
            scales,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn a(&self) -> &[usize] {
        &self.a
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    pub fn sensitive_classes(&self) -> usize {
        self.sensitive_classes
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_groups(&self) -> &[FeatureGroup] {
        &self.feature_groups
    }

    /// Column scales recorded at ingestion (empty for generated data).
    pub fn scales(&self) -> &[ColumnScale] {
        &self.scales
    }

    /// Rows `idx` in the given order, sharing metadata.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            sensitive_classes: self.sensitive_classes,
            feature_names: self.feature_names.clone(),
            feature_groups: self.feature_groups.clone(),
            scales: self.scales.clone(),
        }
    }

    /// Same rows with replaced features, labels and sensitive values.
    pub fn with_rows(&self, x: Matrix, a: Vec<usize>, y: Vec<u8>) -> Result<Dataset> {
        Dataset::with_metadata(
            x,
            a,
            y,
            self.sensitive_classes,
            self.feature_names.clone(),
            self.feature_groups.clone(),
            self.scales.clone(),
        )
    }

    /// Count of rows per sensitive class.
    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.sensitive_classes];
        for &v in &self.a {
            counts[v] += 1;
        }
        counts
    }
}
