//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export wraps a plain function so the logic can be tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use mslc_core::checkpoint::Checkpoint;
use mslc_core::corrector::{blend, corrector_inputs, hard_label};
use mslc_core::experiment::{prepare, start_run, ExperimentConfig, PreparedData};
use mslc_core::noise::{build_transition, empirical_transition, inject, NoiseKind, NoiseSpec};
use mslc_core::report::EpochRecord;
use mslc_core::train::Method;
use mslc_core::{Error, Result};

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string(v)?)
}

#[derive(Debug, Serialize)]
pub struct NoiseView {
    pub expected: Vec<Vec<f64>>,
    pub empirical: Vec<Vec<f64>>,
    pub realized_rate: f64,
}

/// Expected transition matrix and the one realized on `samples` balanced labels.
pub fn noise_view(kind: &str, ratio: f64, classes: usize, include_self: bool, samples: usize, seed: u64) -> Result<NoiseView> {
    let spec = match kind {
        "symmetric" => NoiseSpec::symmetric(ratio, include_self, seed),
        "asymmetric" => NoiseSpec {
            kind: NoiseKind::Asymmetric,
            ratio,
            preset: Some("next".into()),
            seed,
            ..NoiseSpec::default()
        },
        other => return Err(Error::Config(format!("unknown noise kind {other:?}"))),
    };
    let expected = build_transition(&spec, classes)?;
    let truth: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    let inj = inject(&truth, &spec, classes)?;
    let (empirical, _) = empirical_transition(&truth, &inj.noisy, classes)?;
    Ok(NoiseView {
        expected: expected.rows(),
        empirical: empirical.rows(),
        realized_rate: inj.corrupted_fraction(),
    })
}

#[derive(Debug, Serialize)]
pub struct BlendView {
    pub corrected: Vec<f64>,
    pub hard: usize,
    pub l_alpha: f64,
    pub l_beta: f64,
}

/// Corrected label for observed class `y` and the given prediction history.
pub fn blend_view(y: usize, y_hat: &[f64], y_prev: &[f64], alpha: f64, beta: f64) -> Result<BlendView> {
    let c = y_hat.len();
    if y >= c || y_prev.len() != c {
        return Err(Error::Config(format!("need y < {c} and {c}-class prediction vectors")));
    }
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config("alpha and beta must be in [0, 1]".into()));
    }
    let mut one_hot = vec![0.0; c];
    one_hot[y] = 1.0;
    let (l_alpha, l_beta) = corrector_inputs(&one_hot, y_hat, y_prev);
    let corrected = blend(&one_hot, y_hat, y_prev, alpha, beta);
    Ok(BlendView {
        hard: hard_label(&corrected),
        corrected,
        l_alpha,
        l_beta,
    })
}

/// Small 2-D, 3-class problem that trains in a few milliseconds per epoch.
pub fn demo_config(noise_ratio: f64, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.classes = 3;
    cfg.data.dim = 2;
    cfg.data.per_class = 200;
    cfg.data.spread = 7.0;
    cfg.data.meta_size = 15;
    cfg.data.test_size = 150;
    cfg.noise = NoiseSpec::symmetric(noise_ratio, false, seed);
    cfg.train.epochs = 30;
    cfg.train.lr = 0.01;
    cfg.train.meta_lr = 0.01;
    cfg.train.batch_size = 8;
    cfg.train.meta_batch_size = 15;
    cfg.train.hidden = vec![16];
    cfg.train.coef_hidden = 20;
    cfg.with_seed(seed)
}

/// A run that advances one epoch per call. State between calls is the
/// checkpoint, so nothing borrows the data across calls.
pub struct Stepper {
    cfg: ExperimentConfig,
    method: Method,
    data: PreparedData,
    checkpoint: Option<Checkpoint>,
    finished: bool,
}

impl Stepper {
    pub fn new(method: Method, noise_ratio: f64, seed: u64) -> Result<Self> {
        let cfg = demo_config(noise_ratio, seed);
        cfg.validate()?;
        let data = prepare(&cfg)?;
        Ok(Self {
            cfg,
            method,
            data,
            checkpoint: None,
            finished: false,
        })
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn step(&mut self) -> Result<EpochRecord> {
        if self.finished {
            return Err(Error::Contract("run already finished".into()));
        }
        let mut t = start_run(&self.cfg, self.method, &self.data, self.checkpoint.as_ref())?;
        let record = t.step_epoch()?.clone();
        self.finished = t.is_finished();
        self.checkpoint = Some(t.checkpoint()?);
        Ok(record)
    }

    /// Training points as `[x0, x1, observed, corrected]` rows, corrected
    /// being the observed label until the store exists.
    pub fn points(&self) -> Result<Vec<[f64; 4]>> {
        let t = start_run(&self.cfg, self.method, &self.data, self.checkpoint.as_ref())?;
        let corrected = t.snapshot()?.map(|rows| rows.iter().map(|r| r.corrected_label).collect::<Vec<_>>());
        let train = &self.data.train;
        Ok((0..train.len())
            .map(|i| {
                let x = train.features().row(i);
                let obs = train.observed_labels()[i];
                let cor = corrected.as_ref().map_or(obs, |c| c[i]);
                [x[0], x[1], obs as f64, cor as f64]
            })
            .collect())
    }
}

/// Seed the page starts with.
#[wasm_bindgen(js_name = defaultSeed)]
pub fn default_seed() -> u32 {
    DEFAULT_SEED as u32
}

pub const DEFAULT_SEED: u64 = 2;

#[wasm_bindgen(js_name = noiseTransition)]
pub fn noise_transition(
    kind: &str,
    ratio: f64,
    classes: usize,
    include_self: bool,
    samples: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    noise_view(kind, ratio, classes, include_self, samples, seed.into())
        .and_then(|v| to_json(&v))
        .map_err(js)
}

#[wasm_bindgen(js_name = blendLabel)]
pub fn blend_label(y: usize, y_hat: Vec<f64>, y_prev: Vec<f64>, alpha: f64, beta: f64) -> std::result::Result<String, JsError> {
    blend_view(y, &y_hat, &y_prev, alpha, beta)
        .and_then(|v| to_json(&v))
        .map_err(js)
}

#[wasm_bindgen]
pub struct DemoRun(Stepper);

#[wasm_bindgen]
impl DemoRun {
    /// `method` is `"mslc"` or `"ce"`.
    #[wasm_bindgen(constructor)]
    pub fn new(method: &str, noise_ratio: f64, seed: u32) -> std::result::Result<DemoRun, JsError> {
        let m = match method {
            "mslc" => Method::Mslc,
            "ce" => Method::Ce,
            other => return Err(JsError::new(&format!("unknown method {other:?}"))),
        };
        Stepper::new(m, noise_ratio, seed.into()).map(DemoRun).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn finished(&self) -> bool {
        self.0.finished()
    }

    /// One epoch; returns the epoch record as JSON.
    pub fn step(&mut self) -> std::result::Result<String, JsError> {
        self.0.step().and_then(|r| to_json(&r)).map_err(js)
    }

    /// Flattened `[x0, x1, observed, corrected]` rows.
    pub fn points(&self) -> std::result::Result<Vec<f64>, JsError> {
        self.0.points().map(|p| p.concat()).map_err(js)
    }
}
