//! Metrics, per-epoch records, label snapshots and report emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corrector::{hard_label, Corrector, PseudoLabelStore};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::ClassifierMlp;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Epochs averaged into "Last".
pub const LAST_WINDOW: usize = 5;

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

/// Argmax predictions of the classifier on every row of `dataset`.
pub fn predict_labels(classifier: &ClassifierMlp, dataset: &LabeledDataset) -> Result<Vec<usize>> {
    let (_, probs) = classifier.predict(dataset.features())?;
    Ok((0..probs.rows()).map(|r| hard_label(probs.row(r))).collect())
}

/// Accuracy against the true labels.
pub fn test_accuracy(classifier: &ClassifierMlp, dataset: &LabeledDataset) -> Result<f64> {
    Ok(accuracy(&predict_labels(classifier, dataset)?, dataset.true_labels()))
}

/// Row-normalized confusion matrix, rows indexed by true class. Rows of
/// absent classes are all zero.
pub fn confusion(truth: &[usize], predicted: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        m[t][p] += 1.0;
    }
    for row in &mut m {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    m
}

/// Accuracy of the corrected labels over all, originally clean, and
/// corrupted samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub overall: f64,
    pub clean: Option<f64>,
    pub noisy: Option<f64>,
}

/// Split accuracy of hard labels; `corrupted[i]` marks noisy samples.
pub fn label_split_accuracy(truth: &[usize], corrected: &[usize], corrupted: &[bool]) -> SplitAccuracy {
    let mut counts = [[0usize; 2]; 2];
    for ((t, c), &m) in truth.iter().zip(corrected).zip(corrupted) {
        let group = usize::from(m);
        counts[group][0] += 1;
        counts[group][1] += usize::from(t == c);
    }
    let ratio = |g: [usize; 2]| (g[0] > 0).then(|| g[1] as f64 / g[0] as f64);
    SplitAccuracy {
        overall: accuracy(corrected, truth),
        clean: ratio(counts[0]),
        noisy: ratio(counts[1]),
    }
}

fn check_cover(store: &PseudoLabelStore, n: usize) -> Result<()> {
    if store.len() != n {
        return Err(Error::dim("store", n, store.len()));
    }
    Ok(())
}

/// Fraction of samples whose hard corrected label equals the truth.
pub fn corrected_label_accuracy(store: &PseudoLabelStore, truth: &[usize]) -> Result<f64> {
    check_cover(store, truth.len())?;
    Ok(accuracy(&store.hard_labels(), truth))
}

pub fn split_accuracy(store: &PseudoLabelStore, truth: &[usize], corrupted: &[bool]) -> Result<SplitAccuracy> {
    check_cover(store, truth.len())?;
    if corrupted.len() != truth.len() {
        return Err(Error::dim("corruption mask", truth.len(), corrupted.len()));
    }
    Ok(label_split_accuracy(truth, &store.hard_labels(), corrupted))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSeparation {
    pub clean_mean: Option<f64>,
    pub noisy_mean: Option<f64>,
    /// `clean_mean - noisy_mean`.
    pub gap: Option<f64>,
}

pub fn alpha_separation(alphas: &[f64], corrupted: &[bool]) -> AlphaSeparation {
    let mean = |want: bool| {
        let v: Vec<f64> = alphas
            .iter()
            .zip(corrupted)
            .filter(|(_, &m)| m == want)
            .map(|(a, _)| *a)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let (clean_mean, noisy_mean) = (mean(false), mean(true));
    AlphaSeparation {
        clean_mean,
        noisy_mean,
        gap: clean_mean.zip(noisy_mean).map(|(c, n)| c - n),
    }
}

/// One training sample's labels and corrector state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub index: usize,
    pub true_label: usize,
    pub observed_label: usize,
    pub corrected_label: usize,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub l_alpha: f64,
    pub l_beta: f64,
}

/// Snapshot of the store. The coefficient columns are filled only when a
/// corrector is given; they are the values it assigns to the stored labels.
pub fn snapshot(train: &LabeledDataset, store: &PseudoLabelStore, corrector: Option<&Corrector>) -> Result<Vec<SnapshotRow>> {
    if store.len() != train.len() {
        return Err(Error::dim("store", train.len(), store.len()));
    }
    let c = train.classes();
    let mut y = vec![0.0; c];
    Ok((0..train.len())
        .map(|i| {
            y.iter_mut().for_each(|v| *v = 0.0);
            y[train.observed_labels()[i]] = 1.0;
            let (yh, yp) = (store.y_hat(i), store.y_tilde_prev(i));
            let (l_alpha, l_beta) = crate::corrector::corrector_inputs(&y, yh, yp);
            let (alpha, beta) = match corrector {
                Some(k) => (Some(k.alpha.forward(l_alpha)), Some(k.beta_value(l_beta))),
                None => (None, None),
            };
            SnapshotRow {
                index: i,
                true_label: train.true_labels()[i],
                observed_label: train.observed_labels()[i],
                corrected_label: hard_label(yp),
                alpha,
                beta,
                l_alpha,
                l_beta,
            }
        })
        .collect())
}

pub fn write_snapshot(rows: &[SnapshotRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_snapshot(path: &Path) -> Result<Vec<SnapshotRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut rows = Vec::new();
    for (k, rec) in r.deserialize().enumerate() {
        rows.push(rec.map_err(|e| Error::Parse {
            line: k as u64 + 2,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

/// Every label-quality metric of a record, derivable from a snapshot alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMetrics {
    pub corrected: SplitAccuracy,
    pub alpha: AlphaSeparation,
    pub beta_mean: Option<f64>,
    pub corrected_confusion: Vec<Vec<f64>>,
}

pub fn snapshot_metrics(rows: &[SnapshotRow], classes: usize) -> SnapshotMetrics {
    let truth: Vec<usize> = rows.iter().map(|r| r.true_label).collect();
    let corrected: Vec<usize> = rows.iter().map(|r| r.corrected_label).collect();
    let corrupted: Vec<bool> = rows.iter().map(|r| r.true_label != r.observed_label).collect();
    let alpha = if rows.iter().all(|r| r.alpha.is_some()) && !rows.is_empty() {
        let a: Vec<f64> = rows.iter().filter_map(|r| r.alpha).collect();
        alpha_separation(&a, &corrupted)
    } else {
        AlphaSeparation {
            clean_mean: None,
            noisy_mean: None,
            gap: None,
        }
    };
    let betas: Vec<f64> = rows.iter().filter_map(|r| r.beta).collect();
    SnapshotMetrics {
        corrected: label_split_accuracy(&truth, &corrected, &corrupted),
        alpha,
        beta_mean: (!betas.is_empty() && betas.len() == rows.len()).then(|| betas.iter().sum::<f64>() / betas.len() as f64),
        corrected_confusion: confusion(&truth, &corrected, classes),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Cross-entropy on the observed labels: the warm-up of every method
    /// and the whole schedule of the CE and finetune baselines.
    Plain,
    /// Method-specific targets.
    Main,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub train_loss: f64,
    pub meta_loss: Option<f64>,
    pub test_accuracy: f64,
    /// Running max of `test_accuracy`.
    pub best_accuracy: f64,
    /// Mean test accuracy of the last (up to five) epochs.
    pub last5_accuracy: f64,
    pub labels: Option<SnapshotMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub best_accuracy: f64,
    pub best_epoch: usize,
    /// Mean test accuracy over the final epochs.
    pub last_accuracy: f64,
    pub last_window: usize,
    /// Set when fewer than [`LAST_WINDOW`] epochs were available.
    pub last_window_short: bool,
    pub final_labels: Option<SnapshotMetrics>,
}

impl Summary {
    pub fn best_minus_last(&self) -> f64 {
        self.best_accuracy - self.last_accuracy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub manifest_hash: String,
    /// Shared by every run on the same splits and seeds.
    pub data_hash: String,
    pub method: String,
    pub seed: u64,
    pub classes: usize,
    pub train_size: usize,
    pub corrupted_fraction: f64,
    /// Row-normalized `true -> observed` matrix of the training split.
    pub observed_confusion: Vec<Vec<f64>>,
    pub epochs: Vec<EpochRecord>,
    pub summary: Option<Summary>,
}

impl RunReport {
    pub fn new(method: &str, seed: u64, train: &LabeledDataset) -> Self {
        let mask = train.corruption_mask();
        let corrupted = mask.iter().filter(|&&m| m).count();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            manifest_hash: String::new(),
            data_hash: String::new(),
            method: method.to_string(),
            seed,
            classes: train.classes(),
            train_size: train.len(),
            corrupted_fraction: if train.is_empty() { 0.0 } else { corrupted as f64 / train.len() as f64 },
            observed_confusion: confusion(train.true_labels(), train.observed_labels(), train.classes()),
            epochs: Vec::new(),
            summary: None,
        }
    }

    pub fn best_so_far(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.best_accuracy)
    }

    /// Mean of `current` and the test accuracies of the preceding epochs,
    /// over a window of [`LAST_WINDOW`].
    pub fn trailing_mean(&self, current: f64) -> f64 {
        let prev = LAST_WINDOW - 1;
        let tail = &self.epochs[self.epochs.len().saturating_sub(prev)..];
        (tail.iter().map(|e| e.test_accuracy).sum::<f64>() + current) / (tail.len() + 1) as f64
    }

    /// Computes the Best/Last summary from the epoch records.
    pub fn finalize(&mut self) {
        let Some(best) = self
            .epochs
            .iter()
            .max_by(|a, b| a.test_accuracy.total_cmp(&b.test_accuracy).then(b.epoch.cmp(&a.epoch)))
        else {
            self.summary = None;
            return;
        };
        let window = LAST_WINDOW.min(self.epochs.len());
        let tail = &self.epochs[self.epochs.len() - window..];
        self.summary = Some(Summary {
            best_accuracy: best.test_accuracy,
            best_epoch: best.epoch,
            last_accuracy: tail.iter().map(|e| e.test_accuracy).sum::<f64>() / window as f64,
            last_window: window,
            last_window_short: window < LAST_WINDOW,
            final_labels: self.epochs.last().and_then(|e| e.labels.clone()),
        });
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "report schema version {} (expected {REPORT_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Writes `report-<hash>.json`, `curve-<hash>.csv` and
    /// `confusion-<hash>.csv` into `dir`.
    pub fn emit(&self, dir: &Path) -> Result<EmittedFiles> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tag = if self.manifest_hash.is_empty() { "unhashed" } else { &self.manifest_hash[..16.min(self.manifest_hash.len())] };
        let files = EmittedFiles {
            report: dir.join(format!("report-{tag}.json")),
            curve: dir.join(format!("curve-{tag}.csv")),
            confusion: dir.join(format!("confusion-{tag}.csv")),
        };
        fs::write(&files.report, self.to_json()?).map_err(|e| Error::io(&files.report, e))?;
        self.write_curve(&files.curve)?;
        self.write_confusion(&files.confusion)?;
        Ok(files)
    }

    fn write_curve(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let io = |e: csv::Error| Error::io(path, e.into());
        w.write_record([
            "epoch",
            "phase",
            "lr",
            "train_loss",
            "meta_loss",
            "test_accuracy",
            "best_accuracy",
            "last5_accuracy",
            "corrected_accuracy",
            "clean_accuracy",
            "noisy_accuracy",
            "alpha_clean",
            "alpha_noisy",
            "beta_mean",
        ])
        .map_err(io)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for e in &self.epochs {
            let l = e.labels.as_ref();
            w.write_record([
                e.epoch.to_string(),
                serde_json::to_value(e.phase)?.as_str().unwrap_or_default().to_string(),
                e.lr.to_string(),
                e.train_loss.to_string(),
                opt(e.meta_loss),
                e.test_accuracy.to_string(),
                e.best_accuracy.to_string(),
                e.last5_accuracy.to_string(),
                opt(l.map(|m| m.corrected.overall)),
                opt(l.and_then(|m| m.corrected.clean)),
                opt(l.and_then(|m| m.corrected.noisy)),
                opt(l.and_then(|m| m.alpha.clean_mean)),
                opt(l.and_then(|m| m.alpha.noisy_mean)),
                opt(l.and_then(|m| m.beta_mean)),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_confusion(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let io = |e: csv::Error| Error::io(path, e.into());
        let mut header = vec!["matrix".to_string(), "true_class".to_string()];
        header.extend((0..self.classes).map(|k| format!("p{k}")));
        w.write_record(&header).map_err(io)?;
        let mut matrices = vec![("observed", &self.observed_confusion)];
        let final_labels = self.summary.as_ref().and_then(|s| s.final_labels.as_ref());
        if let Some(m) = final_labels {
            matrices.push(("corrected", &m.corrected_confusion));
        }
        for (name, m) in matrices {
            for (t, row) in m.iter().enumerate() {
                let mut rec = vec![name.to_string(), t.to_string()];
                rec.extend(row.iter().map(f64::to_string));
                w.write_record(&rec).map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmittedFiles {
    pub report: PathBuf,
    pub curve: PathBuf,
    pub confusion: PathBuf,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Best/Last aggregated across repetitions of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub best_mean: f64,
    pub best_std: f64,
    pub last_mean: f64,
    pub last_std: f64,
    pub corrected_accuracy_mean: Option<f64>,
}

/// Groups finalized reports by method name (sorted by name).
pub fn summarize_by_method(reports: &[RunReport]) -> Result<Vec<MethodSummary>> {
    let mut groups: BTreeMap<&str, Vec<&Summary>> = BTreeMap::new();
    for r in reports {
        let s = r
            .summary
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("report for {} has no summary", r.method)))?;
        groups.entry(r.method.as_str()).or_default().push(s);
    }
    Ok(groups
        .into_iter()
        .map(|(method, ss)| {
            let (best_mean, best_std) = mean_std(&ss.iter().map(|s| s.best_accuracy).collect::<Vec<_>>());
            let (last_mean, last_std) = mean_std(&ss.iter().map(|s| s.last_accuracy).collect::<Vec<_>>());
            let corrected: Vec<f64> = ss
                .iter()
                .filter_map(|s| s.final_labels.as_ref().map(|m| m.corrected.overall))
                .collect();
            MethodSummary {
                method: method.to_string(),
                runs: ss.len(),
                best_mean,
                best_std,
                last_mean,
                last_std,
                corrected_accuracy_mean: (corrected.len() == ss.len()).then(|| mean_std(&corrected).0),
            }
        })
        .collect())
}
