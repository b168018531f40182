//! Datasets: synthesis, CSV I/O, splitting and mini-batch sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::noise::Injection;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Meta,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    true_labels: Vec<usize>,
    observed_labels: Vec<usize>,
    split: SplitTag,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor, true_labels: Vec<usize>, classes: usize, split: SplitTag) -> Result<Self> {
        Self::with_observed(features, true_labels.clone(), true_labels, classes, split)
    }

    pub fn with_observed(
        features: Tensor,
        true_labels: Vec<usize>,
        observed_labels: Vec<usize>,
        classes: usize,
        split: SplitTag,
    ) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::dim("features", "2-D", format!("{:?}", features.shape())));
        }
        let n = features.rows();
        if true_labels.len() != n {
            return Err(Error::dim("true labels", n, true_labels.len()));
        }
        if observed_labels.len() != n {
            return Err(Error::dim("observed labels", n, observed_labels.len()));
        }
        if let Some(&bad) = true_labels.iter().chain(&observed_labels).find(|&&l| l >= classes) {
            return Err(Error::Schema(format!("label {bad} outside [0, {classes})")));
        }
        if split == SplitTag::Meta && true_labels != observed_labels {
            return Err(Error::Contract("meta split must be noise free".into()));
        }
        Ok(Self {
            features,
            true_labels,
            observed_labels,
            split,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    pub fn observed_labels(&self) -> &[usize] {
        &self.observed_labels
    }

    /// `observed != true`, per sample.
    pub fn corruption_mask(&self) -> Vec<bool> {
        self.true_labels
            .iter()
            .zip(&self.observed_labels)
            .map(|(a, b)| a != b)
            .collect()
    }

    /// Replaces the observed labels with an injection result. Only the
    /// training split accepts noise.
    pub fn apply_noise(&mut self, injection: &Injection) -> Result<()> {
        if self.split != SplitTag::Train {
            return Err(Error::Contract(format!("noise applied to {:?} split", self.split)));
        }
        if injection.noisy.len() != self.len() {
            return Err(Error::dim("injection", self.len(), injection.noisy.len()));
        }
        if let Some(&bad) = injection.noisy.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Schema(format!("label {bad} outside [0, {})", self.classes)));
        }
        self.observed_labels = injection.noisy.clone();
        Ok(())
    }

    /// Rows `indices` as a new dataset with the given tag.
    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Self {
        Self {
            features: self.features.select_rows(indices),
            true_labels: indices.iter().map(|&i| self.true_labels[i]).collect(),
            observed_labels: indices.iter().map(|&i| self.observed_labels[i]).collect(),
            split,
            classes: self.classes,
        }
    }

    /// One-hot observed labels of the given rows.
    pub fn one_hot_observed(&self, indices: &[usize]) -> Tensor {
        one_hot(indices.iter().map(|&i| self.observed_labels[i]), indices.len(), self.classes)
    }

    /// SHA-256 over dimensions, feature bits and both label arrays.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        h.update((self.classes as u64).to_le_bytes());
        for v in self.features.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        for l in self.true_labels.iter().chain(&self.observed_labels) {
            h.update((*l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn one_hot(labels: impl Iterator<Item = usize>, n: usize, classes: usize) -> Tensor {
    let mut data = vec![0.0; n * classes];
    for (r, l) in labels.enumerate() {
        data[r * classes + l] = 1.0;
    }
    Tensor::new(vec![n, classes], data).expect("one-hot shape")
}

/// Gaussian-cluster dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Radius of the ball the class centers are drawn from.
    pub spread: f64,
    /// Isotropic within-class standard deviation.
    pub stddev: f64,
    pub seed: u64,
}

/// `classes` isotropic Gaussian clusters; centers uniform in a ball of
/// radius `spread`. Samples are emitted class by class.
pub fn synth_gaussian(spec: &SynthSpec) -> Result<LabeledDataset> {
    if spec.classes < 2 || spec.dim < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs classes >= 2 and dim >= 2, got {} and {}",
            spec.classes, spec.dim
        )));
    }
    let mut rng = rng::rng_for(spec.seed, rng::stream::DATA);
    let d = spec.dim;
    let mut centers = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let radius = spec.spread * rng.random::<f64>().powf(1.0 / d as f64);
        centers.push(dir.iter().map(|v| v / norm * radius).collect::<Vec<f64>>());
    }
    let n = spec.classes * spec.per_class;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(c + spec.stddev * z);
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(Tensor::matrix(n, d, features)?, labels, spec.classes, SplitTag::Full)
}

/// Train/meta/test partition of one dataset; indices refer to the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: LabeledDataset,
    pub meta: LabeledDataset,
    pub test: LabeledDataset,
    pub train_indices: Vec<usize>,
    pub meta_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Carves a class-balanced meta set of `meta_size` and a random test set of
/// `test_size`; the rest is training data. Index lists are sorted.
pub fn split(dataset: &LabeledDataset, meta_size: usize, test_size: usize, seed: u64) -> Result<Splits> {
    if meta_size == 0 {
        return Err(Error::Config("meta set size must be positive".into()));
    }
    let n = dataset.len();
    if meta_size + test_size >= n {
        return Err(Error::Config(format!(
            "meta ({meta_size}) + test ({test_size}) must be smaller than the dataset ({n})"
        )));
    }
    let c = dataset.classes();
    let mut rng = rng::rng_for(seed, rng::stream::SPLIT);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    // Round-robin over classes in permutation order gives counts that differ
    // by at most one whenever every class has enough samples.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for &i in &perm {
        by_class[dataset.true_labels()[i]].push(i);
    }
    let mut taken = vec![false; n];
    let mut meta = Vec::with_capacity(meta_size);
    let mut cursor = vec![0usize; c];
    while meta.len() < meta_size {
        let mut progressed = false;
        for k in 0..c {
            if meta.len() == meta_size {
                break;
            }
            if let Some(&i) = by_class[k].get(cursor[k]) {
                cursor[k] += 1;
                meta.push(i);
                taken[i] = true;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    let mut test = Vec::with_capacity(test_size);
    for &i in &perm {
        if test.len() == test_size {
            break;
        }
        if !taken[i] {
            taken[i] = true;
            test.push(i);
        }
    }
    let mut train: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    meta.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Splits {
        train: dataset.subset(&train, SplitTag::Train),
        meta: {
            let mut m = dataset.subset(&meta, SplitTag::Meta);
            m.observed_labels = m.true_labels.clone();
            m
        },
        test: dataset.subset(&test, SplitTag::Test),
        train_indices: train,
        meta_indices: meta,
        test_indices: test,
    })
}

/// CSV column mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    /// Column holding the observed label.
    pub label_column: String,
    /// Optional column with the clean label (noisy training files).
    #[serde(default)]
    pub true_label_column: Option<String>,
    /// Feature columns, in order; `None` takes every other column.
    #[serde(default)]
    pub feature_columns: Option<Vec<String>>,
    pub classes: usize,
}

impl CsvSchema {
    pub fn standard(classes: usize) -> Self {
        Self {
            label_column: "label".into(),
            true_label_column: Some("true_label".into()),
            feature_columns: None,
            classes,
        }
    }
}

/// Reads a headered CSV. When the schema's true-label column is absent
/// from the file, the observed label is taken as the truth.
pub fn load_csv(path: &Path, schema: &CsvSchema, split: SplitTag) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let label_col = find(&schema.label_column)
        .ok_or_else(|| Error::Schema(format!("missing label column {:?}", schema.label_column)))?;
    let true_col = schema.true_label_column.as_deref().and_then(find);
    let feature_cols: Vec<usize> = match &schema.feature_columns {
        Some(names) => names
            .iter()
            .map(|n| find(n).ok_or_else(|| Error::Schema(format!("missing feature column {n:?}"))))
            .collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|&i| i != label_col && Some(i) != true_col)
            .collect(),
    };
    let d = feature_cols.len();
    let mut features = Vec::new();
    let mut observed = Vec::new();
    let mut truth = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_label = |col: usize, what: &str| -> Result<usize> {
            let raw = record.get(col).unwrap_or("");
            let v: usize = raw.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("{what} {raw:?} is not a non-negative integer"),
            })?;
            if v >= schema.classes {
                return Err(Error::Schema(format!(
                    "line {line}: {what} {v} outside [0, {})",
                    schema.classes
                )));
            }
            Ok(v)
        };
        let obs = parse_label(label_col, "label")?;
        observed.push(obs);
        truth.push(match true_col {
            Some(c) => parse_label(c, "true label")?,
            None => obs,
        });
        for &c in &feature_cols {
            let raw = record.get(c).unwrap_or("");
            let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("feature {:?} value {raw:?} is not a number", &headers[c]),
            })?;
            features.push(v);
        }
    }
    let n = observed.len();
    LabeledDataset::with_observed(Tensor::matrix(n, d, features)?, truth, observed, schema.classes, split)
}

/// Writes `x0..x{d-1},label,true_label`. Floats use the shortest decimal
/// form that round-trips, so reload is exact.
pub fn save_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    header.push("true_label".into());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..dataset.len() {
        let mut row: Vec<String> = dataset.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        row.push(dataset.observed_labels[i].to_string());
        row.push(dataset.true_labels[i].to_string());
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Shuffled epoch-wise batches; the permutation is a pure function of
/// `(seed, epoch)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    len: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self { len, batch_size, seed })
    }

    pub fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.len).collect();
        perm.shuffle(&mut rng::rng_for_epoch(self.seed, rng::stream::TRAIN_SAMPLER, epoch));
        perm
    }

    /// All batches of one epoch; the last may be short.
    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.permutation(epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Endless shuffled cycling over a (small) meta set. Each cycle uses a
/// fresh permutation; a batch may straddle two cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSampler {
    len: usize,
    batch_size: usize,
    seed: u64,
    cycle: u64,
    position: usize,
}

impl MetaSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("meta set is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("meta batch size must be positive".into()));
        }
        Ok(Self {
            len,
            batch_size: batch_size.min(len),
            seed,
            cycle: 0,
            position: 0,
        })
    }

    pub fn cursor(&self) -> (u64, usize) {
        (self.cycle, self.position)
    }

    pub fn set_cursor(&mut self, cycle: u64, position: usize) {
        self.cycle = cycle;
        self.position = position.min(self.len);
    }

    fn permutation(&self, cycle: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.len).collect();
        perm.shuffle(&mut rng::rng_for_epoch(self.seed, rng::stream::META_SAMPLER, cycle));
        perm
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        let mut perm = self.permutation(self.cycle);
        while out.len() < self.batch_size {
            if self.position == self.len {
                self.cycle += 1;
                self.position = 0;
                perm = self.permutation(self.cycle);
            }
            out.push(perm[self.position]);
            self.position += 1;
        }
        out
    }
}
