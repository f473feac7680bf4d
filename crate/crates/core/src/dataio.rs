//! Dataset ingestion, temporal splitting, normalization, and a seeded
//! synthetic generator with planted signal for verification runs.
//!
//! CSV files are UTF-8, comma-separated, with a required header row and '.'
//! decimal points. A [`Schema`] names the label, month, sensitive, and
//! feature columns and carries explicit category-to-integer code maps for
//! categorical features, keeping the feature width fixed.

use crate::diffcore::Tensor;
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("ingestion error at row {row}: {message}")]
    Ingest { row: usize, message: String },
    #[error("split error: {0}")]
    Split(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// The three demographic attributes used for fairness reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitiveAttr {
    Age,
    Income,
    Employment,
}

impl SensitiveAttr {
    pub const ALL: [SensitiveAttr; 3] = [
        SensitiveAttr::Age,
        SensitiveAttr::Income,
        SensitiveAttr::Employment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SensitiveAttr::Age => "age",
            SensitiveAttr::Income => "income",
            SensitiveAttr::Employment => "employment",
        }
    }

    /// Default group boundary: values at or above it form the "high" group
    /// (older / rich / unstable).
    pub fn default_cut(self) -> f64 {
        match self {
            SensitiveAttr::Age => 50.0,
            SensitiveAttr::Income => 0.5,
            SensitiveAttr::Employment => 3.0,
        }
    }
}

/// Column roles and categorical code maps for one CSV layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub label_column: String,
    pub month_column: String,
    /// Sensitive attribute role to column name.
    pub sensitive_columns: BTreeMap<SensitiveAttr, String>,
    /// Model inputs, in order; may include sensitive columns.
    pub feature_columns: Vec<String>,
    /// Column name to category-string-to-code map.
    #[serde(default)]
    pub categorical_columns: BTreeMap<String, BTreeMap<String, i64>>,
}

impl Schema {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.feature_columns.is_empty() {
            return Err(DataError::Schema("no feature columns declared".into()));
        }
        let mut reserved = vec![self.label_column.as_str(), self.month_column.as_str()];
        for col in self.sensitive_columns.values() {
            reserved.push(col);
        }
        for (i, a) in reserved.iter().enumerate() {
            for b in &reserved[i + 1..] {
                if a == b {
                    return Err(DataError::Schema(format!(
                        "column '{a}' assigned to more than one of label/month/sensitive"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Schema, DataError> {
        let text = std::fs::read_to_string(path)?;
        let schema: Schema = serde_json::from_str(&text)
            .map_err(|e| DataError::Schema(format!("{}: {e}", path.display())))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("schema serializes");
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// In-memory dataset: row-major feature matrix plus aligned label, month, and
/// sensitive-attribute columns. Read-only after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub num_features: usize,
    pub labels: Vec<u8>,
    pub months: Vec<u8>,
    pub sensitive: Vec<(SensitiveAttr, Vec<f64>)>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    /// Feature row as a `[1, num_features]` tensor (single input channel).
    pub fn row_tensor(&self, i: usize) -> Tensor {
        Tensor::new(vec![1, self.num_features], self.feature_row(i).to_vec())
            .expect("row shape consistent")
    }

    pub fn sensitive_values(&self, attr: SensitiveAttr) -> Option<&[f64]> {
        self.sensitive
            .iter()
            .find(|(a, _)| *a == attr)
            .map(|(_, v)| v.as_slice())
    }

    fn select(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        let mut features = Vec::with_capacity(idx.len() * self.num_features);
        for &i in &idx {
            features.extend_from_slice(self.feature_row(i));
        }
        Dataset {
            features,
            num_features: self.num_features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            months: idx.iter().map(|&i| self.months[i]).collect(),
            sensitive: self
                .sensitive
                .iter()
                .map(|(a, v)| (*a, idx.iter().map(|&i| v[i]).collect()))
                .collect(),
            feature_names: self.feature_names.clone(),
        }
    }
}

fn parse_cell(
    raw: &str,
    column: &str,
    codes: Option<&BTreeMap<String, i64>>,
    row: usize,
) -> Result<f64, DataError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Err(DataError::Ingest {
            row,
            message: format!("missing value in column '{column}'"),
        });
    }
    let value = match codes {
        Some(map) => map.get(raw).map(|c| *c as f64).ok_or(DataError::Ingest {
            row,
            message: format!("unknown category '{raw}' in column '{column}'"),
        })?,
        None => raw.parse::<f64>().map_err(|_| DataError::Ingest {
            row,
            message: format!("cannot parse '{raw}' in column '{column}' as a number"),
        })?,
    };
    if !value.is_finite() {
        return Err(DataError::Ingest {
            row,
            message: format!("non-finite value in column '{column}'"),
        });
    }
    Ok(value)
}

/// Loads a CSV per the schema: categorical cells go through the code maps,
/// missing values and unknown categories are rejected with their row index,
/// and row order is preserved.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset, DataError> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let col_index = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::Schema(format!("column '{name}' missing from header")))
    };

    let label_idx = col_index(&schema.label_column)?;
    let month_idx = col_index(&schema.month_column)?;
    let mut sens_idx = Vec::new();
    for (attr, col) in &schema.sensitive_columns {
        sens_idx.push((*attr, col.as_str(), col_index(col)?));
    }
    let mut feat_idx = Vec::new();
    for col in &schema.feature_columns {
        feat_idx.push((col.as_str(), col_index(col)?));
    }

    let num_features = feat_idx.len();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut months = Vec::new();
    let mut sensitive: Vec<(SensitiveAttr, Vec<f64>)> = sens_idx
        .iter()
        .map(|(attr, _, _)| (*attr, Vec::new()))
        .collect();

    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let label = parse_cell(&record[label_idx], &schema.label_column, None, row)?;
        if label != 0.0 && label != 1.0 {
            return Err(DataError::Ingest {
                row,
                message: format!("label must be 0 or 1, got {label}"),
            });
        }
        labels.push(label as u8);
        let month = parse_cell(&record[month_idx], &schema.month_column, None, row)?;
        if !(0.0..=u8::MAX as f64).contains(&month) || month.fract() != 0.0 {
            return Err(DataError::Ingest {
                row,
                message: format!("month must be a small non-negative integer, got {month}"),
            });
        }
        months.push(month as u8);
        for (slot, (_, col, idx)) in sensitive.iter_mut().zip(&sens_idx) {
            let codes = schema.categorical_columns.get(*col);
            slot.1.push(parse_cell(&record[*idx], col, codes, row)?);
        }
        for (col, idx) in &feat_idx {
            let codes = schema.categorical_columns.get(*col);
            features.push(parse_cell(&record[*idx], col, codes, row)?);
        }
    }

    Ok(Dataset {
        features,
        num_features,
        labels,
        months,
        sensitive,
        feature_names: schema.feature_columns.clone(),
    })
}

/// Writes a dataset back out in a layout `load_csv` accepts with the same
/// schema. Floats use the shortest round-trippable representation.
pub fn save_csv(ds: &Dataset, path: &Path, schema: &Schema) -> Result<(), DataError> {
    schema.validate()?;
    let mut inverse: BTreeMap<&str, BTreeMap<i64, &str>> = BTreeMap::new();
    for (col, codes) in &schema.categorical_columns {
        inverse.insert(
            col.as_str(),
            codes
                .iter()
                .map(|(cat, code)| (*code, cat.as_str()))
                .collect(),
        );
    }
    let encode = |col: &str, value: f64| -> Result<String, DataError> {
        match inverse.get(col) {
            Some(map) => {
                let code = value as i64;
                map.get(&code).map(|s| s.to_string()).ok_or_else(|| {
                    DataError::Input(format!("no category for code {code} in '{col}'"))
                })
            }
            None => Ok(format!("{value}")),
        }
    };

    let mut writer = csv::Writer::from_path(path)?;
    let mut columns: Vec<String> = vec![schema.label_column.clone(), schema.month_column.clone()];
    for col in schema.sensitive_columns.values() {
        if !schema.feature_columns.contains(col) {
            columns.push(col.clone());
        }
    }
    columns.extend(schema.feature_columns.iter().cloned());
    writer.write_record(&columns)?;

    let sens_by_col: Vec<(&str, &[f64])> = schema
        .sensitive_columns
        .iter()
        .filter(|(_, col)| !schema.feature_columns.contains(col))
        .map(|(attr, col)| {
            let values = ds
                .sensitive_values(*attr)
                .expect("dataset carries every schema sensitive attribute");
            (col.as_str(), values)
        })
        .collect();

    for i in 0..ds.len() {
        let mut record = vec![ds.labels[i].to_string(), ds.months[i].to_string()];
        for (col, values) in &sens_by_col {
            record.push(encode(col, values[i])?);
        }
        for (j, col) in schema.feature_columns.iter().enumerate() {
            record.push(encode(col, ds.feature_row(i)[j])?);
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Splits on the month boundary: rows with `month < train_months` train, the
/// rest test. No shuffling; row order is preserved on both sides.
pub fn temporal_split(ds: &Dataset, train_months: u8) -> Result<(Dataset, Dataset), DataError> {
    let train = ds.select(|i| ds.months[i] < train_months);
    let test = ds.select(|i| ds.months[i] >= train_months);
    if train.is_empty() || test.is_empty() {
        return Err(DataError::Split(format!(
            "month boundary {train_months} leaves {} train and {} test rows",
            train.len(),
            test.len()
        )));
    }
    Ok((train, test))
}

/// Per-feature mean and standard deviation fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fits z-score statistics on the given (training) rows only.
pub fn fit_stats(train: &Dataset) -> Result<NormStats, DataError> {
    if train.is_empty() {
        return Err(DataError::Input(
            "cannot fit statistics on an empty dataset".into(),
        ));
    }
    let f = train.num_features;
    let n = train.len() as f64;
    let mut mean = vec![0.0; f];
    for i in 0..train.len() {
        for (m, v) in mean.iter_mut().zip(train.feature_row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; f];
    for i in 0..train.len() {
        for (j, v) in train.feature_row(i).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt()).collect();
    Ok(NormStats { mean, std })
}

/// Applies fitted statistics: `(x - mean) / std`, or plain centering where the
/// training std was zero. Not idempotent; apply exactly once per dataset.
pub fn apply_stats(ds: &Dataset, stats: &NormStats) -> Dataset {
    let f = ds.num_features;
    assert_eq!(stats.mean.len(), f, "stats fitted on a different width");
    let mut out = ds.clone();
    for i in 0..out.len() {
        let row = &mut out.features[i * f..(i + 1) * f];
        for (j, v) in row.iter_mut().enumerate() {
            *v -= stats.mean[j];
            if stats.std[j] > 0.0 {
                *v /= stats.std[j];
            }
        }
    }
    out
}

/// Z-scores both splits with statistics fitted on the training rows only.
pub fn normalize(
    train: &Dataset,
    test: &Dataset,
) -> Result<(Dataset, Dataset, NormStats), DataError> {
    let stats = fit_stats(train)?;
    Ok((apply_stats(train, &stats), apply_stats(test, &stats), stats))
}

/// Per-group fraud prevalence override for the synthetic generator, keyed on
/// the attribute's default cut.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupBias {
    pub attribute: SensitiveAttr,
    /// Prevalence for rows at/above the attribute's default cut.
    pub high_prevalence: f64,
    /// Prevalence for rows below the cut.
    pub low_prevalence: f64,
}

/// Generates a planted-signal dataset: negatives are standard normal in every
/// feature, positives shift the planted features by +2.0. Sensitive
/// attributes are drawn independently of the features unless `group_bias`
/// sets per-group prevalences; months are uniform over 0..=7. Positive counts
/// are deterministic (rounded per group), placement is randomized by `seed`.
pub fn synth_generate(
    n: usize,
    prevalence: f64,
    num_features: usize,
    planted: &[usize],
    group_bias: Option<GroupBias>,
    seed: u64,
) -> Result<Dataset, DataError> {
    if !(prevalence > 0.0 && prevalence < 1.0) {
        return Err(DataError::Generation(format!(
            "prevalence must lie in (0, 1), got {prevalence}"
        )));
    }
    if num_features == 0 {
        return Err(DataError::Generation("num_features must be positive".into()));
    }
    if let Some(&bad) = planted.iter().find(|&&j| j >= num_features) {
        return Err(DataError::Generation(format!(
            "planted feature index {bad} out of range for {num_features} features"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut age = Vec::with_capacity(n);
    let mut income = Vec::with_capacity(n);
    let mut employment = Vec::with_capacity(n);
    for _ in 0..n {
        age.push(rng.gen_range(18.0..82.0));
        income.push(rng.gen_range(0.0..1.0));
        employment.push(rng.gen_range(0..=5) as f64);
    }
    let months: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=7u8)).collect();

    let mut labels = vec![0u8; n];
    match group_bias {
        None => {
            let n_pos = (n as f64 * prevalence).round() as usize;
            if n_pos == 0 {
                return Err(DataError::Generation(format!(
                    "{n} rows at prevalence {prevalence} round to zero positives"
                )));
            }
            for i in index_sample(&mut rng, n, n_pos) {
                labels[i] = 1;
            }
        }
        Some(bias) => {
            let values = match bias.attribute {
                SensitiveAttr::Age => &age,
                SensitiveAttr::Income => &income,
                SensitiveAttr::Employment => &employment,
            };
            let cut = bias.attribute.default_cut();
            for (group_high, prev) in [(true, bias.high_prevalence), (false, bias.low_prevalence)]
            {
                let members: Vec<usize> = (0..n)
                    .filter(|&i| (values[i] >= cut) == group_high)
                    .collect();
                let n_pos = (members.len() as f64 * prev).round() as usize;
                for k in index_sample(&mut rng, members.len(), n_pos) {
                    labels[members[k]] = 1;
                }
            }
            if labels.iter().all(|&l| l == 0) {
                return Err(DataError::Generation(
                    "group prevalences round to zero positives".into(),
                ));
            }
        }
    }

    let mut features = Vec::with_capacity(n * num_features);
    for _ in 0..n * num_features {
        let v: f64 = StandardNormal.sample(&mut rng);
        features.push(v);
    }
    for (i, &label) in labels.iter().enumerate() {
        if label == 1 {
            for &j in planted {
                features[i * num_features + j] += 2.0;
            }
        }
    }

    Ok(Dataset {
        features,
        num_features,
        labels,
        months,
        sensitive: vec![
            (SensitiveAttr::Age, age),
            (SensitiveAttr::Income, income),
            (SensitiveAttr::Employment, employment),
        ],
        feature_names: (0..num_features).map(|j| format!("feature_{j}")).collect(),
    })
}

/// Schema matching the column layout [`save_csv`] emits for synthetic data.
pub fn synth_schema(num_features: usize) -> Schema {
    Schema {
        label_column: "label".into(),
        month_column: "month".into(),
        sensitive_columns: [
            (SensitiveAttr::Age, "customer_age".to_string()),
            (SensitiveAttr::Income, "income_level".to_string()),
            (SensitiveAttr::Employment, "employment_status".to_string()),
        ]
        .into_iter()
        .collect(),
        feature_columns: (0..num_features).map(|j| format!("feature_{j}")).collect(),
        categorical_columns: BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn tiny_schema() -> Schema {
        Schema {
            label_column: "fraud".into(),
            month_column: "month".into(),
            sensitive_columns: [(SensitiveAttr::Age, "customer_age".to_string())]
                .into_iter()
                .collect(),
            feature_columns: vec!["amount".into(), "channel".into()],
            categorical_columns: [(
                "channel".to_string(),
                [("web".to_string(), 0i64), ("branch".to_string(), 1i64)]
                    .into_iter()
                    .collect(),
            )]
            .into_iter()
            .collect(),
        }
    }

    #[test]
    fn load_csv_encodes_hand_fixture_exactly() {
        let csv = "fraud,month,customer_age,amount,channel\n\
                   0,0,34,10.5,web\n\
                   1,1,61,-2.25,branch\n\
                   0,2,45,0.125,web\n";
        let file = write_temp(csv);
        let ds = load_csv(file.path(), &tiny_schema()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.features, vec![10.5, 0.0, -2.25, 1.0, 0.125, 0.0]);
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(ds.months, vec![0, 1, 2]);
        assert_eq!(
            ds.sensitive_values(SensitiveAttr::Age).unwrap(),
            &[34.0, 61.0, 45.0]
        );
    }

    #[test]
    fn load_csv_rejects_empty_file_as_schema_error() {
        let file = write_temp("");
        match load_csv(file.path(), &tiny_schema()) {
            Err(DataError::Schema(msg)) => assert!(msg.contains("missing"), "{msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn load_csv_rejects_unknown_category_with_row_index() {
        let csv = "fraud,month,customer_age,amount,channel\n\
                   0,0,30,1.0,web\n\
                   0,0,30,1.0,carrier_pigeon\n";
        let file = write_temp(csv);
        match load_csv(file.path(), &tiny_schema()) {
            Err(DataError::Ingest { row, message }) => {
                assert_eq!(row, 1);
                assert!(message.contains("carrier_pigeon"));
            }
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn load_csv_rejects_missing_values() {
        let csv = "fraud,month,customer_age,amount,channel\n0,0,30,,web\n";
        let file = write_temp(csv);
        assert!(matches!(
            load_csv(file.path(), &tiny_schema()),
            Err(DataError::Ingest { row: 0, .. })
        ));
    }

    #[test]
    fn csv_round_trip_preserves_dataset() {
        let ds = synth_generate(120, 0.1, 5, &[0, 2], None, 7).unwrap();
        let schema = synth_schema(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round.csv");
        save_csv(&ds, &path, &schema).unwrap();
        let reloaded = load_csv(&path, &schema).unwrap();
        assert_eq!(ds, reloaded);
    }

    fn dataset_with_months(months: Vec<u8>) -> Dataset {
        let n = months.len();
        Dataset {
            features: (0..n).map(|i| i as f64).collect(),
            num_features: 1,
            labels: vec![0; n],
            months,
            sensitive: Vec::new(),
            feature_names: vec!["f".into()],
        }
    }

    #[test]
    fn temporal_split_respects_month_boundary() {
        // Months cycle 0..=7 uniformly: 6 of 8 months -> 75% of rows.
        let months: Vec<u8> = (0..800).map(|i| (i % 8) as u8).collect();
        let ds = dataset_with_months(months);
        let (train, test) = temporal_split(&ds, 6).unwrap();
        assert_eq!(train.len(), 600);
        assert_eq!(test.len(), 200);
        assert!(train.months.iter().all(|&m| m < 6));
        assert!(test.months.iter().all(|&m| m >= 6));
        // Union is a partition of the original rows.
        let mut all: Vec<f64> = train.features.clone();
        all.extend(&test.features);
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected: Vec<f64> = (0..800).map(|i| i as f64).collect();
        assert_eq!(all, expected);
    }

    #[test]
    fn temporal_split_rejects_empty_side() {
        let ds = dataset_with_months(vec![0; 10]);
        assert!(matches!(temporal_split(&ds, 6), Err(DataError::Split(_))));
        assert!(matches!(temporal_split(&ds, 0), Err(DataError::Split(_))));
    }

    #[test]
    fn normalize_centers_constant_features_to_zero() {
        let mut ds = dataset_with_months(vec![0, 0, 1, 7]);
        ds.features = vec![3.5, 3.5, 3.5, 3.5];
        let (train, test) = temporal_split(&ds, 2).unwrap();
        let (train_n, test_n, stats) = normalize(&train, &test).unwrap();
        assert!(train_n.features.iter().all(|&v| v == 0.0));
        assert!(test_n.features.iter().all(|&v| v == 0.0));
        assert_eq!(stats.std, vec![0.0]);
    }

    #[test]
    fn normalized_train_has_zero_mean_unit_std() {
        let ds = synth_generate(500, 0.05, 4, &[1], None, 3).unwrap();
        let stats = fit_stats(&ds).unwrap();
        let n = apply_stats(&ds, &stats);
        for j in 0..4 {
            let col: Vec<f64> = (0..n.len()).map(|i| n.feature_row(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-9, "feature {j} mean {mean}");
            assert!(
                (var.sqrt() - 1.0).abs() < 1e-9,
                "feature {j} std {}",
                var.sqrt()
            );
        }
    }

    #[test]
    fn stats_depend_only_on_training_rows() {
        let ds = synth_generate(400, 0.05, 3, &[0], None, 5).unwrap();
        let (train, test) = temporal_split(&ds, 6).unwrap();
        let stats = fit_stats(&train).unwrap();
        // Fitting on train alone matches the normalize() result and is
        // unaffected by whatever the test split holds.
        let (_, _, stats_via_normalize) = normalize(&train, &test).unwrap();
        assert_eq!(stats, stats_via_normalize);
        let (_, _, stats_other_test) = normalize(&train, &train).unwrap();
        assert_eq!(stats, stats_other_test);
    }

    #[test]
    fn synth_positive_count_is_deterministic() {
        let ds = synth_generate(20_000, 0.011, 30, &[0, 3, 7, 12, 21], None, 7).unwrap();
        let positives = ds.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(positives, 220);
        assert_eq!(ds.len(), 20_000);
        assert_eq!(ds.num_features, 30);
    }

    #[test]
    fn synth_same_seed_same_dataset() {
        let a = synth_generate(300, 0.05, 6, &[1, 4], None, 11).unwrap();
        let b = synth_generate(300, 0.05, 6, &[1, 4], None, 11).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(300, 0.05, 6, &[1, 4], None, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_rejects_degenerate_requests() {
        assert!(synth_generate(10, 0.011, 4, &[0], None, 0).is_err());
        assert!(synth_generate(100, 0.0, 4, &[0], None, 0).is_err());
        assert!(synth_generate(100, 0.1, 4, &[9], None, 0).is_err());
    }

    #[test]
    fn synth_group_bias_hits_target_prevalences() {
        let bias = GroupBias {
            attribute: SensitiveAttr::Income,
            high_prevalence: 0.019,
            low_prevalence: 0.004,
        };
        let ds = synth_generate(40_000, 0.011, 8, &[0], Some(bias), 13).unwrap();
        let income = ds.sensitive_values(SensitiveAttr::Income).unwrap();
        let mut counts = [[0usize; 2]; 2]; // [group][label]
        for (i, &label) in ds.labels.iter().enumerate() {
            let g = usize::from(income[i] >= 0.5);
            counts[g][label as usize] += 1;
        }
        let high_prev = counts[1][1] as f64 / (counts[1][0] + counts[1][1]) as f64;
        let low_prev = counts[0][1] as f64 / (counts[0][0] + counts[0][1]) as f64;
        assert!((high_prev - 0.019).abs() <= 0.002, "high {high_prev}");
        assert!((low_prev - 0.004).abs() <= 0.002, "low {low_prev}");
    }

    #[test]
    fn synth_planted_features_carry_the_shift() {
        let ds = synth_generate(5_000, 0.2, 6, &[2, 5], None, 17).unwrap();
        let mut planted_sum = 0.0;
        let mut unplanted_sum = 0.0;
        let mut n_pos = 0.0;
        for i in 0..ds.len() {
            if ds.labels[i] == 1 {
                planted_sum += ds.feature_row(i)[2];
                unplanted_sum += ds.feature_row(i)[1];
                n_pos += 1.0;
            }
        }
        assert!((planted_sum / n_pos - 2.0).abs() < 0.15);
        assert!((unplanted_sum / n_pos).abs() < 0.15);
    }

    #[test]
    fn loaded_cells_are_always_finite() {
        let ds = synth_generate(200, 0.05, 4, &[0], None, 23).unwrap();
        let schema = synth_schema(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("finite.csv");
        save_csv(&ds, &path, &schema).unwrap();
        let reloaded = load_csv(&path, &schema).unwrap();
        assert!(reloaded.features.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn schema_round_trips_through_json() {
        let schema = tiny_schema();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("schema.json");
        schema.save(&path).unwrap();
        assert_eq!(Schema::load(&path).unwrap(), schema);
    }

    #[test]
    fn schema_rejects_role_collisions() {
        let mut schema = tiny_schema();
        schema.month_column = "fraud".into();
        assert!(schema.validate().is_err());
    }
}
