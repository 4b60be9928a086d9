//! Datasets: the synthetic `sin(x) + e^y` task, the UCI Adult census data,
//! deterministic splits and the canonical CSV cache.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{split} split has {found} rows, expected {expected}")]
    RowCount {
        split: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("encoded width {found} outside configured range {expected:?}")]
    Width {
        expected: RangeInclusive<usize>,
        found: usize,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    /// Header of the label column in the CSV cache.
    pub fn label_column(self) -> &'static str {
        match self {
            Task::Regression => "target",
            Task::Classification => "label",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureKind {
    Continuous,
    /// Indicator column of the one-hot group with the given id.
    OneHot {
        group: usize,
    },
}

/// Row-major `n × d` feature matrix with labels and per-column metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
    task: Task,
    feature_names: Vec<String>,
    feature_kinds: Vec<FeatureKind>,
    /// `(min, max)` a continuous column was scaled with, when it was scaled.
    scaling: Vec<Option<(f64, f64)>>,
}

/// Borrowed minibatch.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub labels: Vec<f64>,
    pub task: Task,
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Infers kinds from names: `column=value` columns form one-hot groups.
fn kinds_from_names(names: &[String]) -> Vec<FeatureKind> {
    let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
    names
        .iter()
        .map(|n| match n.split_once('=') {
            Some((col, _)) => {
                let next = groups.len();
                FeatureKind::OneHot {
                    group: *groups.entry(col).or_insert(next),
                }
            }
            None => FeatureKind::Continuous,
        })
        .collect()
}

impl Dataset {
    /// Builds a dataset from row-major features. Feature kinds are inferred
    /// from the names (see [`FeatureKind`]).
    pub fn new(
        features: Vec<f64>,
        labels: Vec<f64>,
        task: Task,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let d = feature_names.len();
        let kinds = kinds_from_names(&feature_names);
        Self::with_metadata(features, labels, task, feature_names, kinds, vec![None; d])
    }

    pub fn with_metadata(
        features: Vec<f64>,
        labels: Vec<f64>,
        task: Task,
        feature_names: Vec<String>,
        feature_kinds: Vec<FeatureKind>,
        scaling: Vec<Option<(f64, f64)>>,
    ) -> Result<Self> {
        let d = feature_names.len();
        let n = labels.len();
        if d == 0 {
            return Err(DataError::Invalid("no features".into()));
        }
        if features.len() != n * d {
            return Err(DataError::Invalid(format!(
                "{} feature values for {n} rows of width {d}",
                features.len()
            )));
        }
        if feature_kinds.len() != d || scaling.len() != d {
            return Err(DataError::Invalid(
                "metadata length differs from width".into(),
            ));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!(
                "non-finite feature at row {}, column {}",
                i / d,
                i % d
            )));
        }
        if let Some(i) = labels.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!("non-finite label at row {i}")));
        }
        if task == Task::Classification {
            if let Some(i) = labels.iter().position(|&y| y != 0.0 && y != 1.0) {
                return Err(DataError::Invalid(format!(
                    "classification label {} at row {i} is not 0 or 1",
                    labels[i]
                )));
            }
        }
        Ok(Dataset {
            n,
            d,
            features,
            labels,
            task,
            feature_names,
            feature_kinds,
            scaling,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.d)
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_kinds(&self) -> &[FeatureKind] {
        &self.feature_kinds
    }

    pub fn scaling(&self) -> &[Option<(f64, f64)>] {
        &self.scaling
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows().map(|r| r[k]).collect()
    }

    /// Smallest and largest value of column `k`.
    pub fn column_range(&self, k: usize) -> Option<(f64, f64)> {
        let mut it = self.rows().map(|r| r[k]);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            n: indices.len(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_metadata()
        }
    }

    fn clone_metadata(&self) -> Dataset {
        Dataset {
            n: 0,
            d: self.d,
            features: Vec::new(),
            labels: Vec::new(),
            task: self.task,
            feature_names: self.feature_names.clone(),
            feature_kinds: self.feature_kinds.clone(),
            scaling: self.scaling.clone(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch<'_> {
        Batch {
            inputs: indices.iter().map(|&i| self.row(i)).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            task: self.task,
        }
    }

    pub fn full_batch(&self) -> Batch<'_> {
        Batch {
            inputs: self.rows().collect(),
            labels: self.labels.clone(),
            task: self.task,
        }
    }

    /// Writes the canonical CSV cache: a header of feature names plus the
    /// label column, then one row per example.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(self.task.label_column());
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(self.d + 1);
        for (row, y) in self.rows().zip(&self.labels) {
            record.clear();
            record.extend(row.iter().map(|v| v.to_string()));
            record.push(y.to_string());
            w.write_record(&record)?;
        }
        w.flush().map_err(|source| DataError::Io {
            path: PathBuf::from("<csv>"),
            source,
        })?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_csv(io::BufWriter::new(file))
    }

    pub fn load_csv(path: &Path) -> Result<Dataset> {
        let file = fs::File::open(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(io::BufReader::new(file));
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let parse_err = |line: usize, reason: String| DataError::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let (names, label) = match header.split_last() {
            Some((label, names)) if !names.is_empty() => (names.to_vec(), label.as_str()),
            _ => {
                return Err(parse_err(
                    1,
                    "header needs feature columns and a label column".into(),
                ))
            }
        };
        let task = match label {
            "target" => Task::Regression,
            "label" => Task::Classification,
            other => {
                return Err(parse_err(
                    1,
                    format!("last column must be `target` or `label`, found `{other}`"),
                ))
            }
        };
        let d = names.len();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() != d + 1 {
                return Err(parse_err(
                    line,
                    format!("expected {} fields, found {}", d + 1, rec.len()),
                ));
            }
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad number `{field}`")))?;
                if j < d {
                    features.push(v);
                } else {
                    labels.push(v);
                }
            }
        }
        Dataset::new(features, labels, task, names)
    }
}

/// Index split: a deterministic shuffle, the first `floor(fraction · n)`
/// indices going to the first part. Both parts are returned sorted.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "split fraction {fraction} not in (0, 1)"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((fraction * n as f64) + 1e-9).floor() as usize;
    let mut second = idx.split_off(cut.min(n));
    idx.sort_unstable();
    second.sort_unstable();
    Ok((idx, second))
}

/// Splits into `(train, held_out)`.
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(dataset.len(), fraction, seed)?;
    Ok((dataset.subset(&a), dataset.subset(&b)))
}

// ── synthetic ──────────────────────────────────────────────────────────────

/// Index of `y`, the monotone (non-decreasing) feature of the synthetic task.
pub const SYNTHETIC_MONOTONE_FEATURE: usize = 1;
pub const SYNTHETIC_DEFAULT_N: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub seed: u64,
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: SYNTHETIC_DEFAULT_N,
            seed: 0,
            noise_std: 0.0,
        }
    }
}

pub fn synthetic_target(x: f64, y: f64) -> f64 {
    x.sin() + y.exp()
}

/// Uniform points on `[0, 1]²` labelled with `sin(x) + e^y` plus optional
/// Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(DataError::Invalid(
            "synthetic sample count must be at least 1".into(),
        ));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(DataError::Invalid(format!(
            "noise std {} must be >= 0",
            spec.noise_std
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut features = Vec::with_capacity(2 * spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x: f64 = rng.random_range(0.0..1.0);
        let y: f64 = rng.random_range(0.0..1.0);
        features.push(x);
        features.push(y);
        let noise = if spec.noise_std > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            spec.noise_std * z
        } else {
            0.0
        };
        labels.push(synthetic_target(x, y) + noise);
    }
    Dataset::with_metadata(
        features,
        labels,
        Task::Regression,
        vec!["x".into(), "y".into()],
        vec![FeatureKind::Continuous; 2],
        vec![Some((0.0, 1.0)); 2],
    )
}

// ── UCI Adult ──────────────────────────────────────────────────────────────

pub const ADULT_COLUMNS: [&str; 15] = [
    "age",
    "workclass",
    "fnlwgt",
    "education",
    "education-num",
    "marital-status",
    "occupation",
    "relationship",
    "race",
    "sex",
    "capital-gain",
    "capital-loss",
    "hours-per-week",
    "native-country",
    "income",
];
/// Columns kept as min-max scaled reals, in output order.
pub const ADULT_CONTINUOUS: [&str; 5] = [
    "age",
    "education-num",
    "capital-gain",
    "capital-loss",
    "hours-per-week",
];
/// Columns one-hot encoded, in output order. `education` is left out: it is
/// the same information as `education-num`, and keeping it would give the
/// network an unconstrained route around the monotone feature.
pub const ADULT_CATEGORICAL: [&str; 7] = [
    "workclass",
    "marital-status",
    "occupation",
    "relationship",
    "race",
    "sex",
    "native-country",
];
/// Features constrained to be non-decreasing.
pub const ADULT_MONOTONE: [&str; 3] = ["education-num", "hours-per-week", "capital-gain"];
pub const ADULT_TRAIN_ROWS: usize = 26_048;
pub const ADULT_TEST_ROWS: usize = 16_281;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingPolicy {
    /// `?` is kept as its own category.
    AsCategory,
    /// Rows containing `?` are dropped.
    DropRows,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdultOptions {
    pub missing: MissingPolicy,
    /// Fraction of `adult.data` used for training; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
    /// Required `(train, test)` row counts, if any.
    pub expected_rows: Option<(usize, usize)>,
    /// Allowed encoded width, if constrained.
    pub expected_width: Option<RangeInclusive<usize>>,
}

impl Default for AdultOptions {
    fn default() -> Self {
        AdultOptions {
            missing: MissingPolicy::AsCategory,
            train_fraction: 0.8,
            seed: 0,
            expected_rows: Some((ADULT_TRAIN_ROWS, ADULT_TEST_ROWS)),
            expected_width: Some(85..=95),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdultData {
    pub train: Dataset,
    pub held_out: Dataset,
    pub test: Dataset,
}

struct RawRecord {
    fields: Vec<String>,
    label: f64,
}

fn read_adult_file(path: &Path, missing: MissingPolicy) -> Result<Vec<RawRecord>> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        // the test file opens with a `|1x3 Cross validator` banner
        if line.is_empty() || line.starts_with('|') {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if fields.len() != ADULT_COLUMNS.len() {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!(
                    "expected {} fields, found {}",
                    ADULT_COLUMNS.len(),
                    fields.len()
                ),
            });
        }
        let label = match fields[14].trim_end_matches('.') {
            ">50K" => 1.0,
            "<=50K" => 0.0,
            other => {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("unknown income label `{other}`"),
                })
            }
        };
        for name in ADULT_CONTINUOUS {
            let j = ADULT_COLUMNS.iter().position(|c| *c == name).unwrap();
            if fields[j].parse::<f64>().is_err() {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("`{name}` is not a number: `{}`", fields[j]),
                });
            }
        }
        if missing == MissingPolicy::DropRows && fields.iter().any(|f| f == "?") {
            dropped += 1;
            continue;
        }
        out.push(RawRecord { fields, label });
    }
    if dropped > 0 {
        log::info!(
            "{}: dropped {dropped} rows with missing values",
            path.display()
        );
    }
    Ok(out)
}

struct AdultEncoder {
    continuous: Vec<(usize, f64, f64)>,
    categorical: Vec<(usize, Vec<String>)>,
    names: Vec<String>,
    kinds: Vec<FeatureKind>,
}

impl AdultEncoder {
    fn fit(records: &[&RawRecord]) -> Self {
        let col = |name: &str| ADULT_COLUMNS.iter().position(|c| *c == name).unwrap();
        let mut names = Vec::new();
        let mut kinds = Vec::new();
        let continuous = ADULT_CONTINUOUS
            .iter()
            .map(|&name| {
                let j = col(name);
                let (lo, hi) = records
                    .iter()
                    .map(|r| r.fields[j].parse::<f64>().unwrap())
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    });
                names.push(name.to_string());
                kinds.push(FeatureKind::Continuous);
                (j, lo, hi)
            })
            .collect();
        let categorical = ADULT_CATEGORICAL
            .iter()
            .enumerate()
            .map(|(g, &name)| {
                let j = col(name);
                let cats: BTreeSet<&str> = records.iter().map(|r| r.fields[j].as_str()).collect();
                let cats: Vec<String> = cats.into_iter().map(str::to_string).collect();
                for c in &cats {
                    names.push(format!("{name}={c}"));
                    kinds.push(FeatureKind::OneHot { group: g });
                }
                (j, cats)
            })
            .collect();
        AdultEncoder {
            continuous,
            categorical,
            names,
            kinds,
        }
    }

    fn width(&self) -> usize {
        self.names.len()
    }

    fn encode(&self, records: &[&RawRecord], split: &str) -> Result<Dataset> {
        let mut features = Vec::with_capacity(records.len() * self.width());
        let mut unknown: BTreeMap<(usize, String), usize> = BTreeMap::new();
        for r in records {
            for &(j, lo, hi) in &self.continuous {
                let v: f64 = r.fields[j].parse().unwrap();
                features.push(if hi > lo { (v - lo) / (hi - lo) } else { 0.0 });
            }
            for (j, cats) in &self.categorical {
                let value = &r.fields[*j];
                let hit = cats.binary_search(value).ok();
                if hit.is_none() {
                    *unknown.entry((*j, value.clone())).or_default() += 1;
                }
                features.extend((0..cats.len()).map(|c| if Some(c) == hit { 1.0 } else { 0.0 }));
            }
        }
        for ((j, value), count) in unknown {
            log::warn!(
                "{split}: unseen {} category `{value}` in {count} rows, encoded as all zeros",
                ADULT_COLUMNS[j]
            );
        }
        let mut scaling = vec![None; self.width()];
        for (k, &(_, lo, hi)) in self.continuous.iter().enumerate() {
            scaling[k] = Some((lo, hi));
        }
        Dataset::with_metadata(
            features,
            records.iter().map(|r| r.label).collect(),
            Task::Classification,
            self.names.clone(),
            self.kinds.clone(),
            scaling,
        )
    }
}

/// Loads `adult.data` / `adult.test`, splits the training file, fits the
/// encoding on the training part and applies it to all three parts.
pub fn load_adult(
    train_path: &Path,
    test_path: &Path,
    options: &AdultOptions,
) -> Result<AdultData> {
    let raw_train = read_adult_file(train_path, options.missing)?;
    let raw_test = read_adult_file(test_path, options.missing)?;
    let (tr, ho) = split_indices(raw_train.len(), options.train_fraction, options.seed)?;
    let train_rows: Vec<&RawRecord> = tr.iter().map(|&i| &raw_train[i]).collect();
    let held_rows: Vec<&RawRecord> = ho.iter().map(|&i| &raw_train[i]).collect();
    let test_rows: Vec<&RawRecord> = raw_test.iter().collect();

    let encoder = AdultEncoder::fit(&train_rows);
    log::info!(
        "adult: {} train / {} held-out / {} test rows, {} encoded features",
        train_rows.len(),
        held_rows.len(),
        test_rows.len(),
        encoder.width()
    );
    if let Some((train_n, test_n)) = options.expected_rows {
        if train_rows.len() != train_n {
            return Err(DataError::RowCount {
                split: "train",
                expected: train_n,
                found: train_rows.len(),
            });
        }
        if test_rows.len() != test_n {
            return Err(DataError::RowCount {
                split: "test",
                expected: test_n,
                found: test_rows.len(),
            });
        }
    }
    if let Some(range) = &options.expected_width {
        if !range.contains(&encoder.width()) {
            return Err(DataError::Width {
                expected: range.clone(),
                found: encoder.width(),
            });
        }
    }
    Ok(AdultData {
        train: encoder.encode(&train_rows, "train")?,
        held_out: encoder.encode(&held_rows, "held-out")?,
        test: encoder.encode(&test_rows, "test")?,
    })
}
