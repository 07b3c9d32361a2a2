//! Census-income loader: one-hot encoding for the categorical columns,
//! z-normalization for the numeric ones (statistics fit on the train split
//! only), income bracket as the label, and sex as the group attribute.
//!
//! Accepts the canonical comma-separated census export: optional header
//! row, optional trailing period on test labels, `?` as a regular category,
//! and `|`-prefixed comment lines. Malformed rows are skipped and counted.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;

use super::TabularDataset;
use crate::error::{Error, Result};

const COLUMNS: usize = 15;
const NUMERIC: [usize; 6] = [0, 2, 4, 10, 11, 12]; // age, fnlwgt, education-num, capital-gain, capital-loss, hours-per-week
const CATEGORICAL: [usize; 7] = [1, 3, 5, 6, 7, 8, 13]; // workclass, education, marital-status, occupation, relationship, race, native-country
const SEX: usize = 9;
const LABEL: usize = 14;

const NUMERIC_NAMES: [&str; 6] = [
    "age",
    "fnlwgt",
    "education-num",
    "capital-gain",
    "capital-loss",
    "hours-per-week",
];
const CATEGORICAL_NAMES: [&str; 7] = [
    "workclass",
    "education",
    "marital-status",
    "occupation",
    "relationship",
    "race",
    "native-country",
];

/// Group ids in lexicographic order of the category value.
pub const GROUP_NAMES: [&str; 2] = ["Female", "Male"];

#[derive(Debug, Clone)]
struct RawRow {
    numeric: [f64; 6],
    categorical: [String; 7],
    sex: u32,
    label: u32,
}

#[derive(Debug, Clone, Default)]
pub struct LoadStats {
    pub rows_kept_train: usize,
    pub rows_kept_test: usize,
    pub rows_skipped_train: usize,
    pub rows_skipped_test: usize,
    pub feature_names: Vec<String>,
}

pub struct AdultOptions {
    /// Keep sex out of the feature matrix (it is the group attribute); set
    /// to true to also one-hot it as a feature.
    pub include_group_feature: bool,
}

impl Default for AdultOptions {
    fn default() -> Self {
        AdultOptions {
            include_group_feature: false,
        }
    }
}

fn parse_row(line: &str) -> Option<RawRow> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != COLUMNS {
        return None;
    }
    let mut numeric = [0.0; 6];
    for (slot, &col) in NUMERIC.iter().enumerate() {
        numeric[slot] = fields[col].parse::<f64>().ok()?;
    }
    let mut categorical: [String; 7] = Default::default();
    for (slot, &col) in CATEGORICAL.iter().enumerate() {
        if fields[col].is_empty() {
            return None;
        }
        categorical[slot] = fields[col].to_string();
    }
    let sex = match fields[SEX] {
        "Female" => 0,
        "Male" => 1,
        _ => return None,
    };
    let label_text = fields[LABEL].trim_end_matches('.');
    let label = match label_text {
        ">50K" => 1,
        "<=50K" => 0,
        _ => return None,
    };
    Some(RawRow {
        numeric,
        categorical,
        sex,
        label,
    })
}

fn is_header(line: &str) -> bool {
    let mut fields = line.split(',').map(str::trim);
    fields.next() == Some("age") && fields.next() == Some("workclass")
}

fn parse_file(text: &str) -> (Vec<RawRow>, usize) {
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('|') || is_header(line) {
            continue;
        }
        match parse_row(line) {
            Some(row) => rows.push(row),
            None => skipped += 1,
        }
    }
    (rows, skipped)
}

/// Category vocabulary per categorical column, sorted, from the train rows.
fn vocabularies(rows: &[RawRow]) -> Vec<Vec<String>> {
    (0..CATEGORICAL.len())
        .map(|slot| {
            let set: BTreeSet<&str> = rows.iter().map(|r| r.categorical[slot].as_str()).collect();
            set.into_iter().map(str::to_string).collect()
        })
        .collect()
}

struct Normalization {
    mean: [f64; 6],
    std: [f64; 6],
}

fn fit_normalization(rows: &[RawRow]) -> Normalization {
    let n = rows.len() as f64;
    let mut mean = [0.0; 6];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(&row.numeric) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = [0.0; 6];
    for row in rows {
        for ((v, m), x) in var.iter_mut().zip(&mean).zip(&row.numeric) {
            let d = x - m;
            *v += d * d;
        }
    }
    let mut std = [0.0; 6];
    for (s, v) in std.iter_mut().zip(&var) {
        let variance = v / n;
        *s = if variance > 0.0 { variance.sqrt() } else { 1.0 };
    }
    Normalization { mean, std }
}

fn encode(
    rows: &[RawRow],
    vocab: &[Vec<String>],
    norm: &Normalization,
    include_group: bool,
) -> TabularDataset {
    let cat_width: usize = vocab.iter().map(Vec::len).sum();
    let width = 6 + cat_width + if include_group { 2 } else { 0 };
    let mut features = Array2::zeros((rows.len(), width));
    let mut labels = Vec::with_capacity(rows.len());
    let mut groups = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        for (slot, &x) in row.numeric.iter().enumerate() {
            features[[i, slot]] = (x - norm.mean[slot]) / norm.std[slot];
        }
        let mut at = 6;
        for (slot, categories) in vocab.iter().enumerate() {
            if let Ok(pos) = categories.binary_search(&row.categorical[slot]) {
                features[[i, at + pos]] = 1.0;
            }
            // unseen test category: all-zero block
            at += categories.len();
        }
        if include_group {
            features[[i, at + row.sex as usize]] = 1.0;
        }
        labels.push(row.label);
        groups.push(row.sex);
    }
    TabularDataset {
        features,
        labels,
        groups,
    }
}

fn feature_names(vocab: &[Vec<String>], include_group: bool) -> Vec<String> {
    let mut names: Vec<String> = NUMERIC_NAMES.iter().map(|s| s.to_string()).collect();
    for (slot, categories) in vocab.iter().enumerate() {
        for c in categories {
            names.push(format!("{}={}", CATEGORICAL_NAMES[slot], c));
        }
    }
    if include_group {
        for g in GROUP_NAMES {
            names.push(format!("sex={g}"));
        }
    }
    names
}

/// Load the census-income train/test pair from raw text.
pub fn load_adult_from_text(
    train_text: &str,
    test_text: &str,
    options: &AdultOptions,
) -> Result<(TabularDataset, TabularDataset, LoadStats)> {
    let (train_rows, skipped_train) = parse_file(train_text);
    let (test_rows, skipped_test) = parse_file(test_text);
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(Error::Format(
            "census input parsed to an empty train or test split".into(),
        ));
    }
    let vocab = vocabularies(&train_rows);
    let norm = fit_normalization(&train_rows);
    let train = encode(&train_rows, &vocab, &norm, options.include_group_feature);
    let test = encode(&test_rows, &vocab, &norm, options.include_group_feature);
    let stats = LoadStats {
        rows_kept_train: train_rows.len(),
        rows_kept_test: test_rows.len(),
        rows_skipped_train: skipped_train,
        rows_skipped_test: skipped_test,
        feature_names: feature_names(&vocab, options.include_group_feature),
    };
    Ok((train, test, stats))
}

pub fn load_adult(
    train_path: &Path,
    test_path: &Path,
    options: &AdultOptions,
) -> Result<(TabularDataset, TabularDataset, LoadStats)> {
    let read = |p: &Path| -> Result<String> {
        std::fs::read_to_string(p)
            .map_err(|e| Error::MissingData(format!("{}: {e}", p.display())))
    };
    load_adult_from_text(&read(train_path)?, &read(test_path)?, options)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE_TRAIN: &str = "\
age,workclass,fnlwgt,education,education-num,marital-status,occupation,relationship,race,sex,capital-gain,capital-loss,hours-per-week,native-country,income-per-year
39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K
50, Self-emp-not-inc, 83311, Bachelors, 13, Married-civ-spouse, Exec-managerial, Husband, White, Male, 0, 0, 13, United-States, <=50K
38, Private, 215646, HS-grad, 9, Divorced, Handlers-cleaners, Not-in-family, White, Male, 0, 0, 40, United-States, <=50K
28, Private, 338409, Bachelors, 13, Married-civ-spouse, Prof-specialty, Wife, Black, Female, 0, 0, 40, Cuba, >50K
37, ?, 284582, Masters, 14, Married-civ-spouse, Exec-managerial, Wife, White, Female, 0, 0, 40, United-States, >50K
garbage line without commas
49, Private, 160187, 9th, 5, Married-spouse-absent, Other-service, Not-in-family, Black, Female, 0, 0, 16, Jamaica, <=50K
";

    const SAMPLE_TEST: &str = "\
|1x3 Cross validator
25, Private, 226802, 11th, 7, Never-married, Machine-op-inspct, Own-child, Black, Male, 0, 0, 40, United-States, <=50K.
38, Private, 89814, HS-grad, 9, Married-civ-spouse, Farming-fishing, Husband, White, Male, 0, 0, 50, United-States, <=50K.
28, Local-gov, 336951, Assoc-acdm, 12, Married-civ-spouse, Protective-serv, Husband, White, Male, 0, 0, 40, NewPlace, >50K.
";

    #[test]
    fn parses_both_variants_and_counts_skips() {
        let (train, test, stats) =
            load_adult_from_text(SAMPLE_TRAIN, SAMPLE_TEST, &AdultOptions::default()).unwrap();
        assert_eq!(stats.rows_kept_train, 6);
        assert_eq!(stats.rows_skipped_train, 1);
        assert_eq!(stats.rows_kept_test, 3);
        assert_eq!(stats.rows_skipped_test, 0);
        assert_eq!(train.labels, vec![0, 0, 0, 1, 1, 0]);
        assert_eq!(train.groups, vec![1, 1, 1, 0, 0, 0]);
        assert_eq!(test.labels, vec![0, 0, 1]);
        // '?' is a category of workclass
        assert!(stats.feature_names.iter().any(|n| n == "workclass=?"));
        // sex excluded from features by default
        assert!(!stats.feature_names.iter().any(|n| n.starts_with("sex=")));
        assert_eq!(train.features.ncols(), stats.feature_names.len());
        assert_eq!(test.features.ncols(), train.features.ncols());
    }

    #[test]
    fn train_numeric_columns_are_z_normalized() {
        let (train, _, _) =
            load_adult_from_text(SAMPLE_TRAIN, SAMPLE_TEST, &AdultOptions::default()).unwrap();
        for col in 0..6 {
            let column = train.features.column(col);
            let n = column.len() as f64;
            let mean = column.sum() / n;
            let var = column.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "col {col} mean {mean}");
            if var > 0.0 {
                assert!((var - 1.0).abs() < 1e-6, "col {col} var {var}");
            }
        }
    }

    #[test]
    fn unseen_test_category_encodes_to_zero_block() {
        let (train, test, stats) =
            load_adult_from_text(SAMPLE_TRAIN, SAMPLE_TEST, &AdultOptions::default()).unwrap();
        // "NewPlace" is not in the train vocabulary for native-country:
        // that row's native-country block must be all zero.
        let start = stats
            .feature_names
            .iter()
            .position(|n| n.starts_with("native-country="))
            .unwrap();
        let width = stats
            .feature_names
            .iter()
            .filter(|n| n.starts_with("native-country="))
            .count();
        let row = test.features.row(2);
        let block_sum: f64 = row.iter().skip(start).take(width).sum();
        assert_eq!(block_sum, 0.0);
        let _ = train;
    }

    #[test]
    fn loader_is_deterministic() {
        let a = load_adult_from_text(SAMPLE_TRAIN, SAMPLE_TEST, &AdultOptions::default()).unwrap();
        let b = load_adult_from_text(SAMPLE_TRAIN, SAMPLE_TEST, &AdultOptions::default()).unwrap();
        assert_eq!(a.0.features, b.0.features);
        assert_eq!(a.1.features, b.1.features);
    }

    #[test]
    fn group_feature_flag_appends_sex_one_hot() {
        let opts = AdultOptions {
            include_group_feature: true,
        };
        let (train, _, stats) = load_adult_from_text(SAMPLE_TRAIN, SAMPLE_TEST, &opts).unwrap();
        assert!(stats.feature_names.iter().any(|n| n == "sex=Female"));
        let col = stats.feature_names.iter().position(|n| n == "sex=Male").unwrap();
        assert_eq!(train.features[[0, col]], 1.0);
    }
}
