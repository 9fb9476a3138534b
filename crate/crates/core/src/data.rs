//! Survival datasets, CSV ingestion, preprocessing and censoring-stratified
//! splits.
//!
//! The pipeline is `load_csv` → `fit_preprocess` → `apply_preprocess`. The
//! fitted [`PreprocessRecipe`] carries every constant needed to transform new
//! rows exactly like the training rows, and serializes to JSON.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Categorical columns with more levels than this are almost certainly
/// misdeclared continuous columns or identifiers.
pub const MAX_CATEGORY_LEVELS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    pub kind: ColumnKind,
}

/// Which CSV columns hold the label and which hold features.
///
/// JSON form: `{"time": "...", "event": "...", "features": [{"name": "...", "kind": "continuous"}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub time: String,
    pub event: String,
    pub features: Vec<FeatureColumn>,
}

impl ColumnSchema {
    pub fn new(time: &str, event: &str, features: &[(&str, ColumnKind)]) -> Result<Self> {
        let schema = Self {
            time: time.to_string(),
            event: event.to_string(),
            features: features
                .iter()
                .map(|(name, kind)| FeatureColumn {
                    name: name.to_string(),
                    kind: *kind,
                })
                .collect(),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.time == self.event {
            return Err(Error::Schema(format!(
                "time and event columns are both `{}`",
                self.time
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &self.features {
            if f.name == self.time || f.name == self.event {
                return Err(Error::Schema(format!(
                    "label column `{}` is also listed as a feature",
                    f.name
                )));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("feature `{}` listed twice", f.name)));
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(s)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawColumn {
    Continuous(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

impl RawColumn {
    fn len(&self) -> usize {
        match self {
            RawColumn::Continuous(v) => v.len(),
            RawColumn::Categorical(v) => v.len(),
        }
    }
}

/// Typed, not yet preprocessed table. Feature columns follow the schema
/// order; missing cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub schema: ColumnSchema,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub columns: Vec<RawColumn>,
}

impl RawTable {
    pub fn n_rows(&self) -> usize {
        self.times.len()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let columns = self
            .columns
            .iter()
            .map(|c| match c {
                RawColumn::Continuous(v) => RawColumn::Continuous(rows.iter().map(|&i| v[i]).collect()),
                RawColumn::Categorical(v) => {
                    RawColumn::Categorical(rows.iter().map(|&i| v[i].clone()).collect())
                }
            })
            .collect();
        Self {
            schema: self.schema.clone(),
            times: rows.iter().map(|&i| self.times[i]).collect(),
            events: rows.iter().map(|&i| self.events[i]).collect(),
            columns,
        }
    }

    /// Labels only, with an empty feature matrix; enough for stratified
    /// splitting.
    pub fn labels(&self) -> Result<SurvivalDataset> {
        SurvivalDataset::new(
            Array2::zeros((self.n_rows(), 0)),
            self.times.clone(),
            self.events.clone(),
            Vec::new(),
        )
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

fn parse_event(cell: &str) -> Option<bool> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<RawTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, schema)
}

/// Parses CSV text with a header row. Rows in error messages are 1-based
/// data rows (the header is not counted).
pub fn read_csv<R: Read>(reader: R, schema: &ColumnSchema) -> Result<RawTable> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let index_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let time_idx = index_of(&schema.time)?;
    let event_idx = index_of(&schema.event)?;
    let feature_idx = schema
        .features
        .iter()
        .map(|f| index_of(&f.name))
        .collect::<Result<Vec<_>>>()?;

    let mut times = Vec::new();
    let mut events = Vec::new();
    let mut columns: Vec<RawColumn> = schema
        .features
        .iter()
        .map(|f| match f.kind {
            ColumnKind::Continuous => RawColumn::Continuous(Vec::new()),
            ColumnKind::Categorical => RawColumn::Categorical(Vec::new()),
        })
        .collect();

    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |idx: usize| record.get(idx).unwrap_or("");

        let raw_time = cell(time_idx);
        let time = raw_time
            .parse::<f64>()
            .ok()
            .filter(|t| t.is_finite() && *t >= 0.0)
            .ok_or_else(|| Error::Parse {
                row,
                column: schema.time.clone(),
                value: raw_time.to_string(),
                expected: "a finite non-negative time",
            })?;
        let raw_event = cell(event_idx);
        let event = parse_event(raw_event).ok_or_else(|| Error::Parse {
            row,
            column: schema.event.clone(),
            value: raw_event.to_string(),
            expected: "an event flag in {0, 1, true, false}",
        })?;
        times.push(time);
        events.push(event);

        for ((col, &idx), spec) in columns.iter_mut().zip(&feature_idx).zip(&schema.features) {
            let raw = cell(idx);
            match col {
                RawColumn::Continuous(v) => {
                    if is_missing(raw) {
                        v.push(None);
                    } else {
                        let x = raw
                            .parse::<f64>()
                            .ok()
                            .filter(|x| x.is_finite())
                            .ok_or_else(|| Error::Parse {
                                row,
                                column: spec.name.clone(),
                                value: raw.to_string(),
                                expected: "a finite number",
                            })?;
                        v.push(Some(x));
                    }
                }
                RawColumn::Categorical(v) => {
                    v.push(if is_missing(raw) {
                        None
                    } else {
                        Some(raw.to_string())
                    });
                }
            }
        }
    }

    Ok(RawTable {
        schema: schema.clone(),
        times,
        events,
        columns,
    })
}

/// Fitted transformation for one feature column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnStep {
    Continuous {
        name: String,
        impute_mean: f64,
        center: f64,
        scale: f64,
    },
    Categorical {
        name: String,
        mode: String,
        categories: Vec<String>,
    },
    /// Zero-variance continuous column, removed from the feature matrix.
    Dropped { name: String, reason: String },
}

impl ColumnStep {
    pub fn name(&self) -> &str {
        match self {
            ColumnStep::Continuous { name, .. }
            | ColumnStep::Categorical { name, .. }
            | ColumnStep::Dropped { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessRecipe {
    pub schema: ColumnSchema,
    pub steps: Vec<ColumnStep>,
}

impl PreprocessRecipe {
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for step in &self.steps {
            match step {
                ColumnStep::Continuous { name, .. } => names.push(name.clone()),
                ColumnStep::Categorical {
                    name, categories, ..
                } => names.extend(categories.iter().map(|c| format!("{name}={c}"))),
                ColumnStep::Dropped { .. } => {}
            }
        }
        names
    }

    pub fn dropped(&self) -> Vec<&str> {
        self.steps
            .iter()
            .filter(|s| matches!(s, ColumnStep::Dropped { .. }))
            .map(ColumnStep::name)
            .collect()
    }
}

fn sample_sd(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

pub fn fit_preprocess(table: &RawTable) -> Result<PreprocessRecipe> {
    if table.n_rows() == 0 {
        return Err(Error::Empty("table has no rows"));
    }
    let mut steps = Vec::with_capacity(table.columns.len());
    for (col, spec) in table.columns.iter().zip(&table.schema.features) {
        let name = spec.name.clone();
        match col {
            RawColumn::Continuous(v) => {
                let present: Vec<f64> = v.iter().flatten().copied().collect();
                if present.is_empty() {
                    return Err(Error::AllMissing(name));
                }
                let mean = present.iter().sum::<f64>() / present.len() as f64;
                let imputed: Vec<f64> = v.iter().map(|x| x.unwrap_or(mean)).collect();
                let center = imputed.iter().sum::<f64>() / imputed.len() as f64;
                let scale = sample_sd(&imputed, center);
                if scale > 0.0 && scale.is_finite() {
                    steps.push(ColumnStep::Continuous {
                        name,
                        impute_mean: mean,
                        center,
                        scale,
                    });
                } else {
                    steps.push(ColumnStep::Dropped {
                        name,
                        reason: "zero variance".to_string(),
                    });
                }
            }
            RawColumn::Categorical(v) => {
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for level in v.iter().flatten() {
                    *counts.entry(level.as_str()).or_default() += 1;
                }
                if counts.is_empty() {
                    return Err(Error::AllMissing(name));
                }
                if counts.len() > MAX_CATEGORY_LEVELS {
                    return Err(Error::TooManyLevels {
                        column: name,
                        levels: counts.len(),
                        limit: MAX_CATEGORY_LEVELS,
                    });
                }
                // BTreeMap iterates in sorted order, so ties go to the
                // lexicographically smallest level.
                let mut mode = "";
                let mut best = 0;
                for (&level, &c) in &counts {
                    if c > best {
                        best = c;
                        mode = level;
                    }
                }
                steps.push(ColumnStep::Categorical {
                    name,
                    mode: mode.to_string(),
                    categories: counts.keys().map(|s| s.to_string()).collect(),
                });
            }
        }
    }
    Ok(PreprocessRecipe {
        schema: table.schema.clone(),
        steps,
    })
}

fn check_recipe_matches(table: &RawTable, recipe: &PreprocessRecipe) -> Result<()> {
    if table.columns.len() != recipe.steps.len() {
        return Err(Error::Schema(format!(
            "table has {} feature columns, recipe expects {}",
            table.columns.len(),
            recipe.steps.len()
        )));
    }
    for ((col, spec), step) in table
        .columns
        .iter()
        .zip(&table.schema.features)
        .zip(&recipe.steps)
    {
        if spec.name != step.name() {
            return Err(Error::Schema(format!(
                "column `{}` where the recipe expects `{}`",
                spec.name,
                step.name()
            )));
        }
        let ok = matches!(
            (col, step),
            (RawColumn::Continuous(_), ColumnStep::Continuous { .. })
                | (RawColumn::Continuous(_), ColumnStep::Dropped { .. })
                | (RawColumn::Categorical(_), ColumnStep::Categorical { .. })
        );
        if !ok {
            return Err(Error::Schema(format!(
                "column `{}` has a different kind than when the recipe was fitted",
                spec.name
            )));
        }
    }
    Ok(())
}

/// Fills missing cells with the recipe's means and modes, leaving everything
/// else untouched.
pub fn impute(table: &RawTable, recipe: &PreprocessRecipe) -> Result<RawTable> {
    check_recipe_matches(table, recipe)?;
    let columns = table
        .columns
        .iter()
        .zip(&recipe.steps)
        .map(|(col, step)| match (col, step) {
            (RawColumn::Continuous(v), ColumnStep::Continuous { impute_mean, .. }) => {
                RawColumn::Continuous(v.iter().map(|x| Some(x.unwrap_or(*impute_mean))).collect())
            }
            (RawColumn::Categorical(v), ColumnStep::Categorical { mode, .. }) => {
                RawColumn::Categorical(
                    v.iter()
                        .map(|x| Some(x.clone().unwrap_or_else(|| mode.clone())))
                        .collect(),
                )
            }
            (other, _) => other.clone(),
        })
        .collect();
    Ok(RawTable {
        schema: table.schema.clone(),
        times: table.times.clone(),
        events: table.events.clone(),
        columns,
    })
}

/// Imputes, standardizes continuous columns and one-hot expands categorical
/// columns. A level not seen at fit time encodes as an all-zero block.
pub fn apply_preprocess(table: &RawTable, recipe: &PreprocessRecipe) -> Result<SurvivalDataset> {
    let imputed = impute(table, recipe)?;
    let n = imputed.n_rows();
    let names = recipe.feature_names();
    let mut features = Array2::<f64>::zeros((n, names.len()));
    let mut offset = 0;
    for (col, step) in imputed.columns.iter().zip(&recipe.steps) {
        debug_assert_eq!(col.len(), n);
        match (col, step) {
            (RawColumn::Continuous(v), ColumnStep::Continuous { center, scale, .. }) => {
                for (i, x) in v.iter().enumerate() {
                    features[[i, offset]] = (x.expect("imputed") - center) / scale;
                }
                offset += 1;
            }
            (RawColumn::Categorical(v), ColumnStep::Categorical { categories, .. }) => {
                for (i, x) in v.iter().enumerate() {
                    let level = x.as_deref().expect("imputed");
                    if let Ok(j) = categories.binary_search_by(|c| c.as_str().cmp(level)) {
                        features[[i, offset + j]] = 1.0;
                    }
                }
                offset += categories.len();
            }
            _ => {}
        }
    }
    SurvivalDataset::new(
        features,
        imputed.times,
        imputed.events,
        names,
    )
}

/// Feature matrix plus right-censored labels. `ids` holds each row's index in
/// the table it originally came from, so splits can be traced back.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    pub features: Array2<f64>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub feature_names: Vec<String>,
    pub ids: Vec<usize>,
}

impl SurvivalDataset {
    pub fn new(
        features: Array2<f64>,
        times: Vec<f64>,
        events: Vec<bool>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let n = times.len();
        let ids = (0..n).collect();
        Self::with_ids(features, times, events, feature_names, ids)
    }

    pub fn with_ids(
        features: Array2<f64>,
        times: Vec<f64>,
        events: Vec<bool>,
        feature_names: Vec<String>,
        ids: Vec<usize>,
    ) -> Result<Self> {
        let n = times.len();
        for got in [events.len(), features.nrows(), ids.len()] {
            if got != n {
                return Err(Error::Dimension { expected: n, got });
            }
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::Dimension {
                expected: features.ncols(),
                got: feature_names.len(),
            });
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "time {t} is not finite and non-negative"
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(
                "feature matrix has missing or non-finite values".into(),
            ));
        }
        Ok(Self {
            features,
            times,
            events,
            feature_names,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// Fraction of censored rows, `Σ 1(d_i = 0) / N`.
    pub fn censoring_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.events.iter().filter(|e| !**e).count() as f64 / self.len() as f64
    }

    pub fn max_time(&self) -> f64 {
        self.times.iter().copied().fold(0.0, f64::max)
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            times: rows.iter().map(|&i| self.times[i]).collect(),
            events: rows.iter().map(|&i| self.events[i]).collect(),
            feature_names: self.feature_names.clone(),
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    pub fn concat(parts: &[&SurvivalDataset]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("no datasets to concatenate"))?;
        let views: Vec<_> = parts.iter().map(|p| p.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views).map_err(|_| Error::Dimension {
            expected: first.n_features(),
            got: parts
                .iter()
                .map(|p| p.n_features())
                .find(|&m| m != first.n_features())
                .unwrap_or(0),
        })?;
        Ok(Self {
            features,
            times: parts.iter().flat_map(|p| p.times.iter().copied()).collect(),
            events: parts.iter().flat_map(|p| p.events.iter().copied()).collect(),
            feature_names: first.feature_names.clone(),
            ids: parts.iter().flat_map(|p| p.ids.iter().copied()).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: SurvivalDataset,
    pub validation: SurvivalDataset,
    pub test: SurvivalDataset,
}

fn shuffled(mut rows: Vec<usize>, rng: &mut impl rand::Rng) -> Vec<usize> {
    rows.shuffle(rng);
    rows
}

/// Splits censored and uncensored rows independently at the given fractions.
/// Validation and test sizes are rounded; the remainder goes to training.
/// Rows keep their original relative order inside each part.
pub fn stratified_split(
    data: &SurvivalDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Split> {
    let (f_train, f_val, f_test) = fractions;
    if [f_train, f_val, f_test].iter().any(|f| !(*f > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    if (f_train + f_val + f_test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must sum to 1, got {fractions:?}"
        )));
    }

    let mut rng = seeds::rng(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for stratum in [false, true] {
        let rows: Vec<usize> = (0..data.len()).filter(|&i| data.events[i] == stratum).collect();
        let rows = shuffled(rows, &mut rng);
        let m = rows.len();
        let n_val = ((f_val * m as f64).round() as usize).min(m);
        let n_test = ((f_test * m as f64).round() as usize).min(m - n_val);
        parts[1].extend_from_slice(&rows[..n_val]);
        parts[2].extend_from_slice(&rows[n_val..n_val + n_test]);
        parts[0].extend_from_slice(&rows[n_val + n_test..]);
    }
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "{} rows are too few for a three-way split at {fractions:?}",
            data.len()
        )));
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(Split {
        train: data.subset(&parts[0]),
        validation: data.subset(&parts[1]),
        test: data.subset(&parts[2]),
    })
}

/// Assigns rows to `n_folds` folds, dealing censored and uncensored rows
/// round-robin after a seeded shuffle. Returns the row indices of each fold.
pub fn stratified_folds(data: &SurvivalDataset, n_folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_folds < 2 {
        return Err(Error::InvalidArgument("need at least 2 folds".into()));
    }
    if data.len() < n_folds {
        return Err(Error::InvalidArgument(format!(
            "{} rows cannot form {n_folds} folds",
            data.len()
        )));
    }
    let mut rng = seeds::rng(seed);
    let mut folds = vec![Vec::new(); n_folds];
    let mut next = 0;
    for stratum in [false, true] {
        let rows: Vec<usize> = (0..data.len()).filter(|&i| data.events[i] == stratum).collect();
        for i in shuffled(rows, &mut rng) {
            folds[next % n_folds].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}
