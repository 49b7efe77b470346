use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Matrix;

use super::dataset::{ColumnScale, Dataset, FeatureGroup};

/// Floor applied to the standard deviation of constant columns.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Column roles for CSV ingestion. Supplied by configuration, never inferred.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub sensitive: String,
    pub label: String,
    /// Feature columns; `None` means every column except sensitive and label.
    #[serde(default)]
    pub features: Option<Vec<String>>,
    #[serde(default)]
    pub categorical: Vec<String>,
    /// Allowed levels per categorical column. A value outside the list is an error.
    #[serde(default)]
    pub levels: BTreeMap<String, Vec<String>>,
    /// Binarize a numeric sensitive column as `value >= threshold`.
    #[serde(default)]
    pub sensitive_threshold: Option<f64>,
    /// Raw label string mapped to 1; default is the lexicographically larger value.
    #[serde(default)]
    pub positive_label: Option<String>,
}

/// Reads a headered CSV into a standardized [`Dataset`].
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file =
        std::fs::File::open(path.as_ref()).map_err(|e| Error::Ingest(format!("{}: {e}", path.as_ref().display())))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Ingest(format!("missing column `{name}`")))
    };
    let s_col = col(&schema.sensitive)?;
    let y_col = col(&schema.label)?;
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| col(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&j| j != s_col && j != y_col).collect(),
    };
    for c in &schema.categorical {
        let j = col(c)?;
        if !feature_cols.contains(&j) {
            return Err(Error::Ingest(format!("categorical column `{c}` is not a feature")));
        }
    }

    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    if records.is_empty() {
        return Err(Error::Ingest("no data rows".into()));
    }

    // Sensitive attribute.
    let raw_s: Vec<&str> = records.iter().map(|r| r.get(s_col).unwrap_or("")).collect();
    let (a, k) = match schema.sensitive_threshold {
        Some(t) => {
            let vals = raw_s
                .iter()
                .enumerate()
                .map(|(i, s)| parse_num(s, &schema.sensitive, i).map(|v| usize::from(v >= t)))
                .collect::<Result<Vec<_>>>()?;
            (vals, 2)
        }
        None => {
            let levels: BTreeSet<&str> = raw_s.iter().copied().collect();
            let index: HashMap<&str, usize> = levels.iter().enumerate().map(|(i, s)| (*s, i)).collect();
            (raw_s.iter().map(|s| index[s]).collect(), levels.len().max(2))
        }
    };

    // Label.
    let raw_y: Vec<&str> = records.iter().map(|r| r.get(y_col).unwrap_or("")).collect();
    let y_levels: BTreeSet<&str> = raw_y.iter().copied().collect();
    if y_levels.len() > 2 {
        return Err(Error::Ingest(format!(
            "label `{}` has {} distinct values, expected 2",
            schema.label,
            y_levels.len()
        )));
    }
    let positive = match &schema.positive_label {
        Some(p) => p.clone(),
        None => y_levels.iter().next_back().map(|s| s.to_string()).unwrap_or_default(),
    };
    let y: Vec<u8> = raw_y.iter().map(|s| u8::from(*s == positive)).collect();

    // Features: categorical columns one-hot, numeric parsed.
    let n = records.len();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    let mut groups = Vec::new();
    for &j in &feature_cols {
        let name = &headers[j];
        if schema.categorical.contains(name) {
            let raw: Vec<&str> = records.iter().map(|r| r.get(j).unwrap_or("")).collect();
            let levels: Vec<String> = match schema.levels.get(name) {
                Some(allowed) => {
                    if let Some(bad) = raw.iter().find(|v| !allowed.iter().any(|l| l == *v)) {
                        return Err(Error::Ingest(format!("column `{name}`: unseen category `{bad}`")));
                    }
                    allowed.clone()
                }
                None => raw
                    .iter()
                    .copied()
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .map(str::to_owned)
                    .collect(),
            };
            let start = columns.len();
            for level in &levels {
                columns.push(raw.iter().map(|v| f64::from(u8::from(v == level))).collect());
                names.push(format!("{name}={level}"));
            }
            groups.push(FeatureGroup {
                source: name.clone(),
                start,
                end: columns.len(),
            });
        } else {
            let vals = records
                .iter()
                .enumerate()
                .map(|(i, r)| parse_num(r.get(j).unwrap_or(""), name, i))
                .collect::<Result<Vec<_>>>()?;
            columns.push(vals);
            names.push(name.clone());
        }
    }

    let mut scales = Vec::with_capacity(columns.len());
    let m = columns.len();
    let mut x = Matrix::zeros(n, m);
    for (j, c) in columns.iter().enumerate() {
        let scale = standardize_params(c);
        for (i, v) in c.iter().enumerate() {
            x[(i, j)] = (v - scale.mean) / scale.scale;
        }
        scales.push(scale);
    }
    Dataset::with_metadata(x, a, y, k, names, groups, scales)
}

fn parse_num(s: &str, column: &str, row: usize) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Ingest(format!("column `{column}` row {row}: non-numeric `{s}`")))
}

/// Mean and population standard deviation, floored.
pub fn standardize_params(values: &[f64]) -> ColumnScale {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    ColumnScale {
        mean,
        scale: var.sqrt().max(VARIANCE_FLOOR),
    }
}
