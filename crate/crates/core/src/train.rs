//! Training loop shared by the corrector and all baselines.
//!
//! Every method runs the same warm-up (plain cross-entropy on the observed
//! labels, identical random streams) for the first `W` epochs. After that
//! the method-specific target construction takes over.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corrector::{hard_label, BetaSource, Corrector, PseudoLabelStore};
use crate::data::{one_hot, BatchSampler, LabeledDataset, MetaSampler};
use crate::error::{Error, Result};
use crate::meta::{actual_step, meta_gradient, meta_update, ActualGradient, MetaBatch, TrainBatch};
use crate::models::{ClassifierMlp, COEFFICIENT_HIDDEN};
use crate::optim::OptimizerState;
use crate::report::{self, EpochRecord, Phase, RunReport, SnapshotRow};
use crate::rng;
use crate::tensor::Tensor;

/// When the pseudo-label store is rewritten.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RefreshMode {
    /// After each actual step, for the samples of that batch.
    #[default]
    PerBatch,
    /// Once per epoch, for the whole training split.
    PerEpoch,
}

/// Form of the stored prediction `y_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionForm {
    #[default]
    Soft,
    /// One-hot argmax.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None`: `ceil(2 * epochs / 3)`.
    pub warmup_epochs: Option<usize>,
    pub batch_size: usize,
    pub meta_batch_size: usize,
    /// Hidden widths of the classifier.
    pub hidden: Vec<usize>,
    pub coef_hidden: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by
    /// `lr_drop_factor`. `None`: a single drop at `ceil(2 * epochs / 3)`.
    pub lr_drops: Option<Vec<usize>>,
    pub lr_drop_factor: f64,
    /// Step size of the virtual update. `None`: the current classifier lr.
    pub virtual_lr: Option<f64>,
    pub meta_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub refresh: RefreshMode,
    pub prediction: PredictionForm,
    pub actual_gradient: ActualGradient,
    pub finetune_epochs: usize,
    pub finetune_lr_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            warmup_epochs: None,
            batch_size: 32,
            meta_batch_size: 32,
            hidden: vec![64],
            coef_hidden: COEFFICIENT_HIDDEN,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drops: None,
            lr_drop_factor: 0.1,
            virtual_lr: None,
            meta_lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            refresh: RefreshMode::PerBatch,
            prediction: PredictionForm::Soft,
            actual_gradient: ActualGradient::Recompute,
            finetune_epochs: 5,
            finetune_lr_factor: 0.1,
            seed: 1,
        }
    }
}

fn two_thirds(epochs: usize) -> usize {
    (2 * epochs).div_ceil(3)
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or_else(|| two_thirds(self.epochs)).min(self.epochs)
    }

    pub fn drops(&self) -> Vec<usize> {
        self.lr_drops.clone().unwrap_or_else(|| vec![two_thirds(self.epochs)])
    }

    /// Classifier learning rate of epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.drops().iter().filter(|&&d| epoch >= d).count();
        self.lr * self.lr_drop_factor.powi(n as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.warmup_epochs.is_some_and(|w| w > self.epochs) {
            return bad("warm-up cannot exceed the number of epochs");
        }
        if self.batch_size == 0 || self.meta_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.hidden.contains(&0) || self.coef_hidden == 0 {
            return bad("hidden widths must be positive");
        }
        if !(self.lr > 0.0) || !(self.meta_lr > 0.0) || self.virtual_lr.is_some_and(|v| !(v > 0.0)) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight decay non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam hyper-parameters");
        }
        if !(self.lr_drop_factor > 0.0) || !(self.finetune_lr_factor > 0.0) {
            return bad("learning-rate factors must be positive");
        }
        Ok(())
    }
}

/// Training method. All variants share the warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Method {
    /// Learned α and β.
    Mslc,
    /// Cross-entropy on observed labels throughout.
    Ce,
    /// Cross-entropy, then extra epochs on the clean meta set.
    Finetune,
    /// Target `lambda * y + (1 - lambda) * y_hat` with the current prediction.
    Bootstrap { lambda: f64 },
    /// Target is the mean prediction of the last `q` epochs.
    JointOpt { q: usize },
    /// Learned α, constant β.
    FixedBeta { beta: f64 },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Mslc => "mslc".into(),
            Method::Ce => "ce".into(),
            Method::Finetune => "finetune".into(),
            Method::Bootstrap { lambda } => format!("bootstrap-{lambda}"),
            Method::JointOpt { q } => format!("joint-opt-{q}"),
            Method::FixedBeta { beta } => format!("fixed-beta-{beta}"),
        }
    }

    pub fn uses_corrector(&self) -> bool {
        matches!(self, Method::Mslc | Method::FixedBeta { .. })
    }

    fn uses_store(&self) -> bool {
        !matches!(self, Method::Ce | Method::Finetune)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Method::Bootstrap { lambda } if !(0.0..=1.0).contains(&lambda) => {
                Err(Error::Config(format!("bootstrap lambda {lambda} outside [0, 1]")))
            }
            Method::JointOpt { q: 0 } => Err(Error::Config("joint-opt window must be positive".into())),
            Method::FixedBeta { beta } if !(0.0..=1.0).contains(&beta) => {
                Err(Error::Config(format!("fixed beta {beta} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Ring of per-sample predictions from recent epochs.
#[derive(Debug, Clone, PartialEq)]
struct PredictionHistory {
    q: usize,
    classes: usize,
    data: Vec<f64>,
    filled: usize,
}

impl PredictionHistory {
    fn new(initial: &Tensor, q: usize) -> Self {
        let (n, c) = (initial.rows(), initial.cols());
        let mut data = vec![0.0; n * q * c];
        for i in 0..n {
            data[i * q * c..i * q * c + c].copy_from_slice(initial.row(i));
        }
        Self {
            q,
            classes: c,
            data,
            filled: 1,
        }
    }

    fn slot(&self, i: usize, s: usize) -> std::ops::Range<usize> {
        let start = (i * self.q + s) * self.classes;
        start..start + self.classes
    }

    fn mean(&self, i: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.classes];
        for s in 0..self.filled {
            for (acc, v) in m.iter_mut().zip(&self.data[self.slot(i, s)]) {
                *acc += v;
            }
        }
        let total: f64 = m.iter().sum();
        m.iter_mut().for_each(|v| *v /= total);
        m
    }

    fn record(&mut self, i: usize, s: usize, p: &[f64]) {
        let r = self.slot(i, s);
        self.data[r].copy_from_slice(p);
    }
}

/// Indices consumed by one bi-level iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterationTrace {
    pub step: u64,
    pub virtual_batch: Vec<usize>,
    pub actual_batch: Vec<usize>,
    pub meta_batch: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a LabeledDataset,
    pub meta: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    config: TrainConfig,
    method: Method,
    epoch: usize,
    step: u64,
    meta_cursor: (u64, usize),
    history_filled: usize,
    dataset_hashes: [String; 3],
    report: RunReport,
}

pub struct Trainer<'a> {
    data: TrainData<'a>,
    config: TrainConfig,
    method: Method,
    classifier: ClassifierMlp,
    opt: OptimizerState,
    corrector: Option<Corrector>,
    meta_opt: Option<OptimizerState>,
    store: Option<PseudoLabelStore>,
    history: Option<PredictionHistory>,
    sampler: BatchSampler,
    finetune_sampler: BatchSampler,
    meta_sampler: MetaSampler,
    epoch: usize,
    step: u64,
    report: RunReport,
    trace: Option<Vec<IterationTrace>>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: TrainData<'a>, config: TrainConfig, method: Method) -> Result<Self> {
        config.validate()?;
        method.validate()?;
        let (train, meta) = (data.train, data.meta);
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        for (name, ds) in [("meta", meta), ("test", data.test)] {
            if ds.classes() != train.classes() || (!ds.is_empty() && ds.dim() != train.dim()) {
                return Err(Error::Config(format!("{name} split does not match the training split")));
            }
        }
        let mut sizes = vec![train.dim()];
        sizes.extend(&config.hidden);
        sizes.push(train.classes());
        let seed = config.seed;
        let classifier = ClassifierMlp::new(&sizes, seed)?;
        let opt = OptimizerState::sgd(classifier.params().len(), config.lr, config.momentum, config.weight_decay);
        let corrector = match method {
            Method::Mslc => Some(Corrector::new(config.coef_hidden, seed, None)?),
            Method::FixedBeta { beta } => Some(Corrector::new(config.coef_hidden, seed, Some(beta))?),
            _ => None,
        };
        let meta_opt = corrector.as_ref().map(|k| {
            OptimizerState::adam(k.theta_len(), config.meta_lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
        });
        let meta_sampler = if method.uses_corrector() || method == Method::Finetune {
            MetaSampler::new(meta.len(), config.meta_batch_size, seed)?
        } else {
            // unused, but keeps the struct uniform
            MetaSampler::new(meta.len().max(1), 1, seed)?
        };
        Ok(Self {
            sampler: BatchSampler::new(train.len(), config.batch_size, seed)?,
            finetune_sampler: BatchSampler::new(meta.len(), config.batch_size, rng::derive(seed, rng::stream::FINETUNE_SAMPLER))?,
            meta_sampler,
            report: RunReport::new(&method.label(), seed, train),
            data,
            config,
            method,
            classifier,
            opt,
            corrector,
            meta_opt,
            store: None,
            history: None,
            epoch: 0,
            step: 0,
            trace: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn classifier(&self) -> &ClassifierMlp {
        &self.classifier
    }

    pub fn corrector(&self) -> Option<&Corrector> {
        self.corrector.as_ref()
    }

    pub fn store(&self) -> Option<&PseudoLabelStore> {
        self.store.as_ref()
    }

    pub fn report(&self) -> &RunReport {
        &self.report
    }

    pub fn report_mut(&mut self) -> &mut RunReport {
        &mut self.report
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Completed classifier updates.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn total_epochs(&self) -> usize {
        self.config.epochs
            + if self.method == Method::Finetune {
                self.config.finetune_epochs
            } else {
                0
            }
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.total_epochs()
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[IterationTrace] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn phase_of(&self, epoch: usize) -> Phase {
        if epoch >= self.config.epochs {
            Phase::Finetune
        } else if epoch < self.config.warmup() || !self.method.uses_store() {
            Phase::Plain
        } else {
            Phase::Main
        }
    }

    pub fn train_batch(&self, indices: &[usize]) -> Result<TrainBatch> {
        let store = self
            .store
            .as_ref()
            .ok_or_else(|| Error::Contract("pseudo-label store not initialized".into()))?;
        let c = self.data.train.classes();
        let mut y_hat = Tensor::zeros(&[indices.len(), c]);
        let mut y_prev = Tensor::zeros(&[indices.len(), c]);
        for (r, &i) in indices.iter().enumerate() {
            store.check_index(i)?;
            y_hat.row_mut(r).copy_from_slice(store.y_hat(i));
            y_prev.row_mut(r).copy_from_slice(store.y_tilde_prev(i));
        }
        Ok(TrainBatch {
            indices: indices.to_vec(),
            x: self.data.train.features().select_rows(indices),
            y: self.data.train.one_hot_observed(indices),
            y_hat,
            y_prev,
        })
    }

    pub fn meta_batch(&self, indices: &[usize]) -> MetaBatch {
        let meta = self.data.meta;
        MetaBatch {
            indices: indices.to_vec(),
            x: meta.features().select_rows(indices),
            y: one_hot(indices.iter().map(|&i| meta.true_labels()[i]), indices.len(), meta.classes()),
        }
    }

    fn form(&self, probs: &Tensor) -> Tensor {
        match self.config.prediction {
            PredictionForm::Soft => probs.clone(),
            PredictionForm::Hard => one_hot(
                (0..probs.rows()).map(|r| hard_label(probs.row(r))),
                probs.rows(),
                probs.cols(),
            ),
        }
    }

    fn check_loss(&self, loss: f64, indices: &[usize]) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                step: self.step,
                context: format!("training loss on batch {indices:?}"),
            })
        }
    }

    fn ce_batch(&mut self, ds: &LabeledDataset, indices: &[usize], labels_are_true: bool) -> Result<f64> {
        let x = ds.features().select_rows(indices);
        let y = if labels_are_true {
            one_hot(indices.iter().map(|&i| ds.true_labels()[i]), indices.len(), ds.classes())
        } else {
            ds.one_hot_observed(indices)
        };
        let (loss, grad) = self.classifier.loss_grad(&x, &y)?;
        self.check_loss(loss, indices)?;
        self.opt.step(self.classifier.params_mut().values_mut(), &grad)?;
        Ok(loss)
    }

    fn bootstrap_batch(&mut self, indices: &[usize], lambda: f64) -> Result<f64> {
        let x = self.data.train.features().select_rows(indices);
        let y = self.data.train.one_hot_observed(indices);
        let hard = self.config.prediction == PredictionForm::Hard;
        let mut captured = None;
        let (loss, grad, _) = self.classifier.loss_grad_from_probs(&x, |p| {
            let yh = if hard {
                one_hot((0..p.rows()).map(|r| hard_label(p.row(r))), p.rows(), p.cols())
            } else {
                p.clone()
            };
            let t: Vec<f64> = y.data().iter().zip(yh.data()).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
            let t = Tensor::new(p.shape().to_vec(), t)?;
            captured = Some((yh, t.clone()));
            Ok(t)
        })?;
        self.check_loss(loss, indices)?;
        self.opt.step(self.classifier.params_mut().values_mut(), &grad)?;
        let (y_hat, targets) = captured.expect("target closure ran");
        let step = self.step + 1;
        self.store_mut()?.update(indices, &y_hat, &targets, step)?;
        Ok(loss)
    }

    fn joint_opt_batch(&mut self, indices: &[usize], slot: usize) -> Result<f64> {
        let history = self
            .history
            .as_ref()
            .ok_or_else(|| Error::Contract("prediction history not initialized".into()))?;
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| history.mean(i)).collect();
        let targets = Tensor::from_rows(&rows)?;
        let x = self.data.train.features().select_rows(indices);
        let (loss, grad, probs) = self.classifier.loss_grad_from_probs(&x, |_| Ok(targets.clone()))?;
        self.check_loss(loss, indices)?;
        self.opt.step(self.classifier.params_mut().values_mut(), &grad)?;
        let recorded = self.form(&probs);
        let history = self.history.as_mut().expect("checked above");
        for (r, &i) in indices.iter().enumerate() {
            history.record(i, slot, recorded.row(r));
        }
        let step = self.step + 1;
        self.store_mut()?.update(indices, &recorded, &targets, step)?;
        Ok(loss)
    }

    fn mslc_batch(&mut self, indices: &[usize], eta: f64) -> Result<(f64, f64)> {
        let batch = self.train_batch(indices)?;
        let meta_indices = self.meta_sampler.next_batch();
        let meta = self.meta_batch(&meta_indices);
        let corrector = self.corrector.as_mut().expect("corrector methods own a corrector");
        let meta_opt = self.meta_opt.as_mut().expect("corrector methods own a meta optimizer");

        let mg = meta_gradient(&self.classifier, corrector, &batch, &meta, eta, self.step)?;
        meta_update(corrector, &mg.grad, meta_opt)?;
        let act = actual_step(
            &mut self.classifier,
            corrector,
            &batch,
            &mut self.opt,
            self.config.actual_gradient,
            Some(&mg.logprob_grads),
        )?;
        if mg.consumed != act.consumed {
            return Err(Error::Contract(format!(
                "virtual step used batch {:?} but actual step used {:?}",
                mg.consumed, act.consumed
            )));
        }
        if let Some(t) = self.trace.as_mut() {
            t.push(IterationTrace {
                step: self.step,
                virtual_batch: mg.consumed.clone(),
                actual_batch: act.consumed.clone(),
                meta_batch: meta_indices,
            });
        }
        self.check_loss(act.loss, indices)?;
        if self.config.refresh == RefreshMode::PerBatch {
            let (_, probs) = self.classifier.predict(&batch.x)?;
            let y_hat = self.form(&probs);
            let step = self.step + 1;
            self.store_mut()?.update(indices, &y_hat, &act.targets, step)?;
        }
        Ok((act.loss, mg.meta_loss))
    }

    fn store_mut(&mut self) -> Result<&mut PseudoLabelStore> {
        self.store
            .as_mut()
            .ok_or_else(|| Error::Contract("pseudo-label store not initialized".into()))
    }

    fn full_train_predictions(&self) -> Result<Tensor> {
        let (_, probs) = self.classifier.predict(self.data.train.features())?;
        Ok(self.form(&probs))
    }

    /// Re-corrects every training sample with the current corrector and
    /// classifier.
    fn refresh_all(&mut self) -> Result<()> {
        let y_hat_new = self.full_train_predictions()?;
        let train = self.data.train;
        let (store, corrector) = match (self.store.as_ref(), self.corrector.as_ref()) {
            (Some(s), Some(k)) => (s, k),
            _ => return Ok(()),
        };
        let c = train.classes();
        let mut targets = Tensor::zeros(&[train.len(), c]);
        let mut y = vec![0.0; c];
        for i in 0..train.len() {
            y.iter_mut().for_each(|v| *v = 0.0);
            y[train.observed_labels()[i]] = 1.0;
            let out = corrector.correct(&y, store.y_hat(i), store.y_tilde_prev(i));
            targets.row_mut(i).copy_from_slice(&out.y_tilde);
        }
        let all: Vec<usize> = (0..train.len()).collect();
        let step = self.step;
        self.store_mut()?.update(&all, &y_hat_new, &targets, step)
    }

    /// Runs one epoch and appends its record.
    pub fn step_epoch(&mut self) -> Result<&EpochRecord> {
        if self.is_finished() {
            return Err(Error::Contract("training already finished".into()));
        }
        let e = self.epoch;
        let phase = self.phase_of(e);
        let lr = match phase {
            Phase::Finetune => self.config.lr * self.config.finetune_lr_factor,
            _ => self.config.lr_at(e),
        };
        self.opt.set_lr(lr);

        if phase == Phase::Main && self.method.uses_store() && self.store.is_none() {
            let preds = self.full_train_predictions()?;
            self.store = Some(PseudoLabelStore::from_predictions(&preds, self.step));
            if let Method::JointOpt { q } = self.method {
                self.history = Some(PredictionHistory::new(&preds, q));
            }
        }

        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let (mut meta_sum, mut meta_count) = (0.0, 0usize);
        let train = self.data.train;
        let batches = match phase {
            Phase::Finetune => self.finetune_sampler.epoch_batches((e - self.config.epochs) as u64),
            _ => self.sampler.epoch_batches(e as u64),
        };
        // slot 0 holds the warm-up predictions; main epoch k writes slot k + 1
        let slot = self.history.as_ref().map(|h| (e + 1).saturating_sub(self.config.warmup()) % h.q);
        for indices in &batches {
            let loss = match (phase, self.method) {
                (Phase::Plain, _) => self.ce_batch(train, indices, false)?,
                (Phase::Main, Method::Ce | Method::Finetune) => unreachable!("plain methods have no main phase"),
                (Phase::Finetune, _) => self.ce_batch(self.data.meta, indices, true)?,
                (Phase::Main, Method::Bootstrap { lambda }) => self.bootstrap_batch(indices, lambda)?,
                (Phase::Main, Method::JointOpt { .. }) => self.joint_opt_batch(indices, slot.expect("history exists"))?,
                (Phase::Main, Method::Mslc | Method::FixedBeta { .. }) => {
                    let eta = self.config.virtual_lr.unwrap_or(lr);
                    let (l, m) = self.mslc_batch(indices, eta)?;
                    meta_sum += m;
                    meta_count += 1;
                    l
                }
            };
            loss_sum += loss * indices.len() as f64;
            seen += indices.len();
            self.step += 1;
        }
        if phase == Phase::Main && self.method.uses_corrector() && self.config.refresh == RefreshMode::PerEpoch {
            self.refresh_all()?;
        }
        if let Some(h) = self.history.as_mut() {
            if phase == Phase::Main {
                h.filled = (h.filled + 1).min(h.q);
            }
        }
        self.epoch += 1;

        let test_accuracy = report::test_accuracy(&self.classifier, self.data.test)?;
        let labels = self.snapshot()?.map(|rows| report::snapshot_metrics(&rows, train.classes()));
        let record = EpochRecord {
            epoch: self.epoch,
            phase,
            lr,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 },
            meta_loss: (meta_count > 0).then(|| meta_sum / meta_count as f64),
            test_accuracy,
            best_accuracy: self.report.best_so_far().max(test_accuracy),
            last5_accuracy: self.report.trailing_mean(test_accuracy),
            labels,
        };
        self.report.epochs.push(record);
        Ok(self.report.epochs.last().expect("just pushed"))
    }

    /// Trains to the end and returns the finalized report.
    pub fn run(&mut self) -> Result<RunReport> {
        while !self.is_finished() {
            self.step_epoch()?;
        }
        self.report.finalize();
        Ok(self.report.clone())
    }

    /// Per-sample snapshot of the store, when the method keeps one.
    pub fn snapshot(&self) -> Result<Option<Vec<SnapshotRow>>> {
        match &self.store {
            Some(store) => Ok(Some(report::snapshot(self.data.train, store, self.corrector.as_ref())?)),
            None => Ok(None),
        }
    }

    fn dataset_hashes(data: &TrainData) -> [String; 3] {
        [data.train.content_hash(), data.meta.content_hash(), data.test.content_hash()]
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.config.seed);
        let state = TrainerState {
            config: self.config.clone(),
            method: self.method,
            epoch: self.epoch,
            step: self.step,
            meta_cursor: self.meta_sampler.cursor(),
            history_filled: self.history.as_ref().map_or(0, |h| h.filled),
            dataset_hashes: Self::dataset_hashes(&self.data),
            report: self.report.clone(),
        };
        ck.push_bytes("state", &serde_json::to_vec(&state)?)?;
        let n = self.classifier.params().len();
        ck.push_f64("classifier.params", &[n], self.classifier.params().values())?;
        push_optimizer(&mut ck, "classifier.opt", &self.opt)?;
        if let (Some(k), Some(o)) = (&self.corrector, &self.meta_opt) {
            ck.push_f64("alpha.params", &[k.alpha.params().len()], k.alpha.params().values())?;
            if let BetaSource::Learned(b) = &k.beta {
                ck.push_f64("beta.params", &[b.params().len()], b.params().values())?;
            }
            push_optimizer(&mut ck, "corrector.opt", o)?;
        }
        if let Some(s) = &self.store {
            let dims = [s.len(), s.classes()];
            ck.push_f64("store.y_hat", &dims, s.raw_y_hat())?;
            ck.push_f64("store.y_tilde_prev", &dims, s.raw_y_tilde_prev())?;
            ck.push_u64("store.last_updated", &[s.len()], s.raw_last_updated())?;
        }
        if let Some(h) = &self.history {
            let n = self.data.train.len();
            ck.push_f64("history", &[n, h.q, h.classes], &h.data)?;
        }
        Ok(ck)
    }

    /// Rebuilds a trainer from a checkpoint taken on the same data.
    pub fn resume(data: TrainData<'a>, ck: &Checkpoint) -> Result<Self> {
        let state: TrainerState = serde_json::from_slice(ck.bytes("state")?)?;
        if state.dataset_hashes != Self::dataset_hashes(&data) {
            return Err(Error::Checkpoint("datasets differ from the checkpointed run".into()));
        }
        if ck.seed != state.config.seed {
            return Err(Error::Checkpoint("header seed disagrees with the stored config".into()));
        }
        let mut t = Self::new(data, state.config, state.method)?;
        t.classifier.params_mut().set_values(ck.f64s("classifier.params")?)?;
        restore_optimizer(ck, "classifier.opt", &mut t.opt)?;
        if let (Some(k), Some(o)) = (t.corrector.as_mut(), t.meta_opt.as_mut()) {
            k.alpha.params_mut().set_values(ck.f64s("alpha.params")?)?;
            if let BetaSource::Learned(b) = &mut k.beta {
                b.params_mut().set_values(ck.f64s("beta.params")?)?;
            }
            restore_optimizer(ck, "corrector.opt", o)?;
        }
        if ck.has("store.y_hat") {
            let c = data.train.classes();
            t.store = Some(PseudoLabelStore::from_parts(
                c,
                ck.f64s("store.y_hat")?.to_vec(),
                ck.f64s("store.y_tilde_prev")?.to_vec(),
                ck.u64s("store.last_updated")?.to_vec(),
            )?);
        }
        if let (true, Method::JointOpt { q }) = (ck.has("history"), state.method) {
            let data = ck.f64s("history")?.to_vec();
            if data.len() != t.data.train.len() * q * t.data.train.classes() {
                return Err(Error::Checkpoint("history has the wrong size".into()));
            }
            t.history = Some(PredictionHistory {
                q,
                classes: t.data.train.classes(),
                data,
                filled: state.history_filled,
            });
        }
        t.meta_sampler.set_cursor(state.meta_cursor.0, state.meta_cursor.1);
        t.epoch = state.epoch;
        t.step = state.step;
        t.report = state.report;
        Ok(t)
    }
}

fn push_optimizer(ck: &mut Checkpoint, prefix: &str, o: &OptimizerState) -> Result<()> {
    ck.push_f64(&format!("{prefix}.first"), &[o.first_moment().len()], o.first_moment())?;
    ck.push_f64(&format!("{prefix}.second"), &[o.second_moment().len()], o.second_moment())?;
    ck.push_u64(&format!("{prefix}.step"), &[1], &[o.step_count()])?;
    ck.push_f64(&format!("{prefix}.lr"), &[1], &[o.lr()])
}

fn restore_optimizer(ck: &Checkpoint, prefix: &str, o: &mut OptimizerState) -> Result<()> {
    let step = ck.u64s(&format!("{prefix}.step"))?;
    let lr = ck.f64s(&format!("{prefix}.lr"))?;
    if step.len() != 1 || lr.len() != 1 {
        return Err(Error::Checkpoint(format!("{prefix} scalars are malformed")));
    }
    o.set_lr(lr[0]);
    o.restore(
        ck.f64s(&format!("{prefix}.first"))?.to_vec(),
        ck.f64s(&format!("{prefix}.second"))?.to_vec(),
        step[0],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synth_gaussian, SplitTag, SynthSpec};
    use crate::noise::{inject, NoiseSpec};

    struct Splits {
        train: LabeledDataset,
        meta: LabeledDataset,
        test: LabeledDataset,
    }

    impl Splits {
        fn data(&self) -> TrainData<'_> {
            TrainData {
                train: &self.train,
                meta: &self.meta,
                test: &self.test,
            }
        }
    }

    fn splits(noise: f64) -> Splits {
        let spec = SynthSpec {
            classes: 3,
            dim: 6,
            per_class: 80,
            spread: 5.0,
            stddev: 1.0,
            seed: 3,
        };
        let s = split(&synth_gaussian(&spec).unwrap(), 15, 45, 3).unwrap();
        let mut train = s.train;
        let inj = inject(train.true_labels(), &NoiseSpec::symmetric(noise, false, 3), 3).unwrap();
        train.apply_noise(&inj).unwrap();
        Splits {
            train,
            meta: s.meta,
            test: s.test,
        }
    }

    fn config() -> TrainConfig {
        TrainConfig {
            epochs: 6,
            batch_size: 16,
            meta_batch_size: 8,
            hidden: vec![12],
            coef_hidden: 10,
            ..TrainConfig::default()
        }
    }

    fn run(s: &Splits, cfg: TrainConfig, method: Method) -> (RunReport, ClassifierMlp) {
        let mut t = Trainer::new(s.data(), cfg, method).unwrap();
        let r = t.run().unwrap();
        (r, t.classifier().clone())
    }

    #[test]
    fn default_schedule_scales_with_epochs() {
        let c = TrainConfig::default();
        assert_eq!(c.warmup(), 40);
        assert_eq!(c.drops(), vec![40]);
        assert_eq!(c.lr_at(39), c.lr);
        assert!((c.lr_at(40) - c.lr * 0.1).abs() < 1e-15);
        let c = TrainConfig { epochs: 7, ..c };
        assert_eq!(c.warmup(), 5);
    }

    #[test]
    fn invalid_configs_rejected() {
        for c in [
            TrainConfig { epochs: 0, ..config() },
            TrainConfig { batch_size: 0, ..config() },
            TrainConfig { lr: 0.0, ..config() },
            TrainConfig { virtual_lr: Some(-1.0), ..config() },
            TrainConfig { momentum: 1.0, ..config() },
            TrainConfig { warmup_epochs: Some(7), ..config() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        assert!(Method::Bootstrap { lambda: 1.5 }.validate().is_err());
        assert!(Method::JointOpt { q: 0 }.validate().is_err());
        assert!(Method::FixedBeta { beta: -0.1 }.validate().is_err());
    }

    #[test]
    fn method_labels() {
        assert_eq!(Method::FixedBeta { beta: 0.4 }.label(), "fixed-beta-0.4");
        assert_eq!(Method::Bootstrap { lambda: 0.8 }.label(), "bootstrap-0.8");
        assert_eq!(Method::JointOpt { q: 10 }.label(), "joint-opt-10");
    }

    #[test]
    fn empty_meta_set_is_config_error() {
        let s = splits(0.4);
        let empty = s.meta.subset(&[], SplitTag::Meta);
        let data = TrainData {
            train: &s.train,
            meta: &empty,
            test: &s.test,
        };
        assert!(matches!(Trainer::new(data, config(), Method::Mslc), Err(Error::Config(_))));
    }

    #[test]
    fn warmup_only_run_equals_ce() {
        let s = splits(0.4);
        let cfg = TrainConfig {
            warmup_epochs: Some(6),
            ..config()
        };
        let (a, ca) = run(&s, cfg.clone(), Method::Mslc);
        let (b, cb) = run(&s, cfg, Method::Ce);
        assert_eq!(ca, cb);
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.summary, b.summary);
    }

    #[test]
    fn warmup_epochs_identical_across_methods() {
        let s = splits(0.4);
        let w = config().warmup();
        let mut params = Vec::new();
        for m in [Method::Ce, Method::Mslc, Method::JointOpt { q: 3 }, Method::Bootstrap { lambda: 0.8 }] {
            let mut t = Trainer::new(s.data(), config(), m).unwrap();
            for _ in 0..w {
                t.step_epoch().unwrap();
            }
            params.push(t.classifier().params().values().to_vec());
        }
        assert!(params.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn bootstrap_with_lambda_one_equals_ce() {
        let s = splits(0.4);
        let (_, a) = run(&s, config(), Method::Bootstrap { lambda: 1.0 });
        let (_, b) = run(&s, config(), Method::Ce);
        assert_eq!(a, b);
    }

    #[test]
    fn runs_are_deterministic() {
        let s = splits(0.4);
        for m in [Method::Mslc, Method::JointOpt { q: 2 }, Method::Finetune] {
            let (a, _) = run(&s, config(), m);
            let (b, _) = run(&s, config(), m);
            assert_eq!(a.to_json().unwrap(), b.to_json().unwrap(), "{}", m.label());
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let s = splits(0.4);
        for m in [Method::Mslc, Method::JointOpt { q: 2 }, Method::Finetune, Method::FixedBeta { beta: 0.2 }] {
            let (full, c_full) = run(&s, config(), m);
            let mut t = Trainer::new(s.data(), config(), m).unwrap();
            for _ in 0..5 {
                t.step_epoch().unwrap();
            }
            let bytes = t.checkpoint().unwrap().to_bytes();
            drop(t);
            let ck = Checkpoint::from_bytes(&bytes).unwrap();
            let mut t = Trainer::resume(s.data(), &ck).unwrap();
            let resumed = t.run().unwrap();
            assert_eq!(&c_full, t.classifier(), "{}", m.label());
            assert_eq!(full.to_json().unwrap(), resumed.to_json().unwrap(), "{}", m.label());
        }
    }

    #[test]
    fn resume_rejects_other_data() {
        let s = splits(0.4);
        let t = Trainer::new(s.data(), config(), Method::Mslc).unwrap();
        let ck = t.checkpoint().unwrap();
        let other = splits(0.2);
        assert!(matches!(Trainer::resume(other.data(), &ck), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn virtual_and_actual_steps_share_batches() {
        let s = splits(0.4);
        let mut t = Trainer::new(s.data(), config(), Method::Mslc).unwrap();
        t.enable_trace();
        t.run().unwrap();
        let per_epoch = s.train.len().div_ceil(16);
        let main = config().epochs - config().warmup();
        assert_eq!(t.trace().len(), per_epoch * main);
        assert!(t.trace().iter().all(|it| it.virtual_batch == it.actual_batch && it.meta_batch.len() == 8));
    }

    #[test]
    fn per_batch_refresh_touches_every_sample_each_epoch() {
        let s = splits(0.4);
        let mut t = Trainer::new(s.data(), config(), Method::Mslc).unwrap();
        let per_epoch = s.train.len().div_ceil(16) as u64;
        while !t.is_finished() {
            t.step_epoch().unwrap();
            if let Some(store) = t.store() {
                let epoch_start = t.step_count() - per_epoch;
                assert!((0..store.len()).all(|i| store.last_updated(i) > epoch_start));
            }
        }
        assert!(t.store().is_some());
    }

    #[test]
    fn per_epoch_refresh_rewrites_whole_store() {
        let s = splits(0.4);
        let cfg = TrainConfig {
            refresh: RefreshMode::PerEpoch,
            ..config()
        };
        let mut t = Trainer::new(s.data(), cfg, Method::Mslc).unwrap();
        t.run().unwrap();
        let store = t.store().unwrap();
        assert!((0..store.len()).all(|i| store.last_updated(i) == t.step_count()));
    }

    #[test]
    fn hard_predictions_are_one_hot() {
        let s = splits(0.4);
        let cfg = TrainConfig {
            prediction: PredictionForm::Hard,
            ..config()
        };
        let mut t = Trainer::new(s.data(), cfg, Method::Mslc).unwrap();
        t.run().unwrap();
        let store = t.store().unwrap();
        assert!((0..store.len()).all(|i| store.y_hat(i).iter().all(|&v| v == 0.0 || v == 1.0)));
    }

    #[test]
    fn joint_opt_history_mean_is_normalized() {
        let first = Tensor::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        let mut h = PredictionHistory::new(&first, 3);
        assert_eq!(h.mean(1), vec![1.0, 0.0]);
        h.record(1, 1, &[0.0, 1.0]);
        h.filled = 2;
        assert_eq!(h.mean(1), vec![0.5, 0.5]);
        assert_eq!(h.mean(0), vec![0.5, 0.5]);
    }

    #[test]
    fn finetune_appends_meta_epochs() {
        let s = splits(0.4);
        let mut t = Trainer::new(s.data(), config(), Method::Finetune).unwrap();
        assert_eq!(t.total_epochs(), 6 + 5);
        let r = t.run().unwrap();
        let phases: Vec<Phase> = r.epochs.iter().map(|e| e.phase).collect();
        assert_eq!(phases.iter().filter(|&&p| p == Phase::Finetune).count(), 5);
        assert!(r.epochs[6..].iter().all(|e| e.lr == config().lr * config().finetune_lr_factor));
        assert!(matches!(t.step_epoch(), Err(Error::Contract(_))));
    }

    #[test]
    fn corrector_methods_record_meta_loss_only_after_warmup() {
        let s = splits(0.4);
        let (r, _) = run(&s, config(), Method::FixedBeta { beta: 0.4 });
        let w = config().warmup();
        assert!(r.epochs[..w].iter().all(|e| e.meta_loss.is_none() && e.labels.is_none()));
        assert!(r.epochs[w..].iter().all(|e| e.meta_loss.is_some() && e.labels.is_some()));
    }
}
