//! Whole-experiment configuration, data preparation and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_csv, split, synth_gaussian, CsvSchema, LabeledDataset, SplitTag, SynthSpec};
use crate::error::{Error, Result};
use crate::noise::{inject, Injection, NoiseKind, NoiseSpec};
use crate::report::{RunReport, SnapshotRow};
use crate::train::{Method, TrainConfig, TrainData, Trainer};

pub const CODE_VERSION: &str = concat!("mslc-core ", env!("CARGO_PKG_VERSION"));

/// Pre-split CSV files used instead of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSources {
    pub train: PathBuf,
    pub meta: PathBuf,
    pub test: PathBuf,
    /// Defaults to `x0.., label, true_label`.
    #[serde(default)]
    pub schema: Option<CsvSchema>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    /// Generated samples per class, before splitting.
    pub per_class: usize,
    pub spread: f64,
    pub stddev: f64,
    pub meta_size: usize,
    pub test_size: usize,
    pub csv: Option<CsvSources>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 16,
            per_class: 1260,
            spread: 6.0,
            stddev: 1.0,
            meta_size: 40,
            test_size: 1000,
            csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub bootstrap_lambda: f64,
    pub joint_opt_q: usize,
    /// Fixed β values of the ablation sweep.
    pub beta_grid: Vec<f64>,
    /// Seeds of repeated runs (ablation, comparisons).
    pub seeds: Vec<u64>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            bootstrap_lambda: 0.8,
            joint_opt_q: 10,
            beta_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Write a label snapshot after every epoch, not only the last.
    pub snapshot_every_epoch: bool,
    /// Write a checkpoint after every epoch.
    pub checkpoint_every_epoch: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            snapshot_every_epoch: false,
            checkpoint_every_epoch: true,
        }
    }
}

/// One document describing a whole experiment. The top-level `seed` drives
/// every random stream; the per-section seeds are overwritten from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub noise: NoiseSpec,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig::default(),
            noise: NoiseSpec::default(),
            train: TrainConfig::default(),
            baseline: BaselineConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = cfg.with_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(csv), Some(dir)) = (cfg.data.csv.as_mut(), path.parent()) {
            for p in [&mut csv.train, &mut csv.meta, &mut csv.test] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copy with every stream keyed to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.train.seed = seed;
        c.noise.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.noise.validate(self.data.classes)?;
        let d = &self.data;
        if d.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if d.csv.is_none() {
            if d.dim < 2 || d.per_class == 0 || !(d.spread >= 0.0) || !(d.stddev > 0.0) {
                return Err(Error::Config("invalid synthetic data parameters".into()));
            }
            if d.meta_size == 0 {
                return Err(Error::Config("meta set is empty".into()));
            }
            if d.meta_size + d.test_size >= d.classes * d.per_class {
                return Err(Error::Config("meta and test splits leave no training data".into()));
            }
        }
        let b = &self.baseline;
        if !(0.0..=1.0).contains(&b.bootstrap_lambda) || b.joint_opt_q == 0 {
            return Err(Error::Config("bootstrap lambda must be in [0, 1] and q >= 1".into()));
        }
        if b.beta_grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("beta grid values must be in [0, 1]".into()));
        }
        if b.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.data.classes,
            dim: self.data.dim,
            per_class: self.data.per_class,
            spread: self.data.spread,
            stddev: self.data.stddev,
            seed: self.seed,
        }
    }
}

/// Train (noisy), meta and test splits ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: LabeledDataset,
    pub meta: LabeledDataset,
    pub test: LabeledDataset,
    pub injection: Option<Injection>,
}

impl PreparedData {
    pub fn as_train_data(&self) -> TrainData<'_> {
        TrainData {
            train: &self.train,
            meta: &self.meta,
            test: &self.test,
        }
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        [("train", &self.train), ("meta", &self.meta), ("test", &self.test)]
            .into_iter()
            .map(|(k, d)| (k.to_string(), d.content_hash()))
            .collect()
    }
}

/// Clean splits: synthesized and split, or loaded from CSV.
pub fn clean_splits(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    match &cfg.data.csv {
        None => {
            let full = synth_gaussian(&cfg.synth_spec())?;
            let s = split(&full, cfg.data.meta_size, cfg.data.test_size, cfg.seed)?;
            Ok((s.train, s.meta, s.test))
        }
        Some(src) => {
            let schema = src.schema.clone().unwrap_or_else(|| CsvSchema::standard(cfg.data.classes));
            let train = load_csv(&src.train, &schema, SplitTag::Train)?;
            let meta = load_csv(&src.meta, &schema, SplitTag::Meta)?;
            let test = load_csv(&src.test, &schema, SplitTag::Test)?;
            if meta.is_empty() {
                return Err(Error::Config("meta set is empty".into()));
            }
            Ok((train, meta, test))
        }
    }
}

/// Builds the splits and injects noise into the training labels. A noise
/// kind of `none` keeps the observed labels as given.
pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (mut train, meta, test) = clean_splits(cfg)?;
    let injection = if cfg.noise.kind == NoiseKind::None {
        None
    } else {
        let inj = inject(train.true_labels(), &cfg.noise, cfg.data.classes)?;
        train.apply_noise(&inj)?;
        Some(inj)
    };
    Ok(PreparedData {
        train,
        meta,
        test,
        injection,
    })
}

/// Everything that determines a run's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub method: Method,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    pub dataset_hashes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig, method: Method, data: &PreparedData) -> Self {
        let seeds = [("master", cfg.seed), ("train", cfg.train.seed), ("noise", cfg.noise.seed)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self {
            version: CODE_VERSION.to_string(),
            method,
            config: cfg.clone(),
            seeds,
            dataset_hashes: data.hashes(),
        }
    }

    fn digest(bytes: &[u8]) -> String {
        hex::encode(Sha256::digest(bytes))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(Self::digest(&serde_json::to_vec(self)?))
    }

    /// Hash of the data side alone; equal across methods compared on the
    /// same splits.
    pub fn data_hash(&self) -> Result<String> {
        Ok(Self::digest(&serde_json::to_vec(&(&self.seeds, &self.dataset_hashes))?))
    }
}

/// Output of one training run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub report: RunReport,
    pub snapshot: Option<Vec<SnapshotRow>>,
}

/// Trainer for `method` on prepared data, fresh or from a checkpoint of the
/// same manifest, with the run's identity hashes filled in.
pub fn start_run<'a>(
    cfg: &ExperimentConfig,
    method: Method,
    data: &'a PreparedData,
    resume: Option<&crate::checkpoint::Checkpoint>,
) -> Result<Trainer<'a>> {
    let manifest = RunManifest::new(cfg, method, data);
    let hash = manifest.hash()?;
    let mut trainer = match resume {
        Some(ck) => {
            let t = Trainer::resume(data.as_train_data(), ck)?;
            if t.report().manifest_hash != hash {
                return Err(Error::Checkpoint("checkpoint belongs to a different manifest".into()));
            }
            t
        }
        None => Trainer::new(data.as_train_data(), cfg.train.clone(), method)?,
    };
    trainer.report_mut().manifest_hash = hash;
    trainer.report_mut().data_hash = manifest.data_hash()?;
    Ok(trainer)
}

/// Trains `method` on prepared data; `after_epoch` sees the trainer after
/// every epoch (checkpoints, progress output).
pub fn run_prepared(
    cfg: &ExperimentConfig,
    method: Method,
    data: &PreparedData,
    resume: Option<&crate::checkpoint::Checkpoint>,
    mut after_epoch: impl FnMut(&Trainer) -> Result<()>,
) -> Result<RunOutcome> {
    let mut trainer = start_run(cfg, method, data, resume)?;
    while !trainer.is_finished() {
        trainer.step_epoch()?;
        after_epoch(&trainer)?;
    }
    let report = trainer.run()?;
    Ok(RunOutcome {
        manifest: RunManifest::new(cfg, method, data),
        report,
        snapshot: trainer.snapshot()?,
    })
}

/// Prepares the data and trains.
pub fn run(cfg: &ExperimentConfig, method: Method) -> Result<RunOutcome> {
    let data = prepare(cfg)?;
    run_prepared(cfg, method, &data, None, |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::save_csv;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.per_class = 60;
        cfg.data.meta_size = 12;
        cfg.data.test_size = 40;
        cfg.train.epochs = 3;
        cfg.train.hidden = vec![8];
        cfg.train.coef_hidden = 6;
        cfg
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = small().with_seed(9);
        cfg.noise = NoiseSpec::asymmetric(0.3, vec![1, 2, 3, 0], 9);
        cfg.train.lr_drops = Some(vec![1, 2]);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_uses_defaults_and_master_seed() {
        let cfg = ExperimentConfig::from_toml("seed = 4\n[train]\nepochs = 9\n").unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!((cfg.train.seed, cfg.noise.seed), (4, 4));
    }

    #[test]
    fn bad_documents_rejected() {
        for text in [
            "[train]\nepochz = 3\n",
            "[data]\nmeta_size = 0\n",
            "[data]\nclasses = 1\n",
            "[data]\ntest_size = 5000\n",
            "[noise]\nkind = \"symmetric\"\nratio = 1.5\n",
            "[baseline]\nbeta_grid = [1.2]\n",
            "[baseline]\nseeds = []\n",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn default_benchmark_split_sizes() {
        let cfg = ExperimentConfig::default();
        let total = cfg.data.classes * cfg.data.per_class;
        assert_eq!(total - cfg.data.meta_size - cfg.data.test_size, 4000);
        assert_eq!((cfg.data.meta_size, cfg.data.test_size, cfg.data.dim), (40, 1000, 16));
    }

    #[test]
    fn prepare_injects_only_training_labels() {
        let data = prepare(&small()).unwrap();
        let frac = data.injection.as_ref().unwrap().corrupted_fraction();
        assert!(frac > 0.25 && frac < 0.55, "{frac}");
        assert!(data.meta.corruption_mask().iter().all(|&m| !m));
        assert!(data.test.corruption_mask().iter().all(|&m| !m));
    }

    #[test]
    fn manifest_hash_tracks_method_but_data_hash_does_not() {
        let cfg = small();
        let data = prepare(&cfg).unwrap();
        let a = RunManifest::new(&cfg, Method::Mslc, &data);
        let b = RunManifest::new(&cfg, Method::Ce, &data);
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.data_hash().unwrap(), b.data_hash().unwrap());
        let other = RunManifest::new(&cfg.with_seed(2), Method::Ce, &prepare(&cfg.with_seed(2)).unwrap());
        assert_ne!(other.data_hash().unwrap(), b.data_hash().unwrap());
    }

    #[test]
    fn csv_sources_resolve_relative_to_config() {
        let dir = tempfile::tempdir().unwrap();
        let data = prepare(&small()).unwrap();
        for (name, ds) in [("train.csv", &data.train), ("meta.csv", &data.meta), ("test.csv", &data.test)] {
            save_csv(ds, &dir.path().join(name)).unwrap();
        }
        let text = "[data]\nclasses = 4\n[data.csv]\ntrain = \"train.csv\"\nmeta = \"meta.csv\"\ntest = \"test.csv\"\n[noise]\nkind = \"none\"\n";
        let path = dir.path().join("exp.toml");
        fs::write(&path, text).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        let loaded = prepare(&cfg).unwrap();
        assert_eq!(loaded.train.observed_labels(), data.train.observed_labels());
        assert_eq!(loaded.hashes(), data.hashes());
    }

    #[test]
    fn resume_with_other_manifest_rejected() {
        let cfg = small();
        let data = prepare(&cfg).unwrap();
        let mut ck = None;
        run_prepared(&cfg, Method::Ce, &data, None, |t| {
            if t.epoch() == 1 {
                ck = Some(t.checkpoint()?);
            }
            Ok(())
        })
        .unwrap();
        let mut other = cfg.clone();
        other.train.momentum = 0.5;
        let r = run_prepared(&other, Method::Ce, &data, ck.as_ref(), |_| Ok(()));
        assert!(matches!(r, Err(Error::Checkpoint(_))));
    }
}
