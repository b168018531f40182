//! Soft-label correction: the learned convex blend of the observed label,
//! the current prediction and the previous corrected label, plus the
//! per-sample store it reads from and writes to.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::CoefficientNet;
use crate::rng;
use crate::tensor::Tensor;

/// Floor applied to probabilities inside the corrector's cross-entropies.
pub const LOG_CLAMP: f64 = 1e-12;

/// Cross-entropy of a prediction against a target distribution, with the
/// prediction clamped at [`LOG_CLAMP`].
pub fn clamped_ce(prediction: &[f64], target: &[f64]) -> f64 {
    let ce: f64 = prediction
        .iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -t * p.max(LOG_CLAMP).ln())
        .sum();
    ce.max(0.0)
}

/// Inputs of the two coefficient nets: `l_alpha = CE(y_hat, y)` and
/// `l_beta = CE(y_hat, y_tilde_prev)`.
pub fn corrector_inputs(y: &[f64], y_hat: &[f64], y_tilde_prev: &[f64]) -> (f64, f64) {
    (clamped_ce(y_hat, y), clamped_ce(y_hat, y_tilde_prev))
}

/// `alpha * y + (1 - alpha) * (beta * y_tilde_prev + (1 - beta) * y_hat)`.
pub fn blend(y: &[f64], y_hat: &[f64], y_tilde_prev: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    y.iter()
        .zip(y_hat)
        .zip(y_tilde_prev)
        .map(|((&yo, &yh), &yp)| alpha * yo + (1.0 - alpha) * (beta * yp + (1.0 - beta) * yh))
        .collect()
}

/// Argmax with ties broken toward the lowest index.
pub fn hard_label(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in probs.iter().enumerate().skip(1) {
        if v > probs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutput {
    pub y_tilde: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub l_alpha: f64,
    pub l_beta: f64,
}

/// Source of the `beta` coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BetaSource {
    Learned(CoefficientNet),
    Fixed(f64),
}

/// The pair of coefficient networks (or α-net plus a constant β).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corrector {
    pub alpha: CoefficientNet,
    pub beta: BetaSource,
}

impl Corrector {
    pub fn new(hidden: usize, seed: u64, fixed_beta: Option<f64>) -> Result<Self> {
        let alpha = CoefficientNet::new(hidden, seed, rng::stream::ALPHA_INIT)?;
        let beta = match fixed_beta {
            Some(b) if (0.0..=1.0).contains(&b) => BetaSource::Fixed(b),
            Some(b) => return Err(Error::Config(format!("fixed beta {b} outside [0, 1]"))),
            None => BetaSource::Learned(CoefficientNet::new(hidden, seed, rng::stream::BETA_INIT)?),
        };
        Ok(Self { alpha, beta })
    }

    pub fn beta_value(&self, l_beta: f64) -> f64 {
        match &self.beta {
            BetaSource::Learned(net) => net.forward(l_beta),
            BetaSource::Fixed(b) => *b,
        }
    }

    pub fn correct(&self, y: &[f64], y_hat: &[f64], y_tilde_prev: &[f64]) -> CorrectionOutput {
        let (l_alpha, l_beta) = corrector_inputs(y, y_hat, y_tilde_prev);
        let alpha = self.alpha.forward(l_alpha);
        let beta = self.beta_value(l_beta);
        CorrectionOutput {
            y_tilde: blend(y, y_hat, y_tilde_prev, alpha, beta),
            alpha,
            beta,
            l_alpha,
            l_beta,
        }
    }

    /// Trainable parameters `[theta_alpha, theta_beta]` (β part empty when fixed).
    pub fn theta(&self) -> Vec<f64> {
        let mut t = self.alpha.params().values().to_vec();
        if let BetaSource::Learned(net) = &self.beta {
            t.extend_from_slice(net.params().values());
        }
        t
    }

    pub fn theta_len(&self) -> usize {
        self.alpha.params().len()
            + match &self.beta {
                BetaSource::Learned(net) => net.params().len(),
                BetaSource::Fixed(_) => 0,
            }
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta_len() {
            return Err(Error::dim("theta", self.theta_len(), theta.len()));
        }
        let na = self.alpha.params().len();
        self.alpha.params_mut().set_values(&theta[..na])?;
        if let BetaSource::Learned(net) = &mut self.beta {
            net.params_mut().set_values(&theta[na..])?;
        }
        Ok(())
    }
}

/// Free-function form of [`Corrector::correct`].
pub fn correct_label(
    y: &[f64],
    y_hat: &[f64],
    y_tilde_prev: &[f64],
    alpha_net: &CoefficientNet,
    beta: &BetaSource,
) -> CorrectionOutput {
    let (l_alpha, l_beta) = corrector_inputs(y, y_hat, y_tilde_prev);
    let alpha = alpha_net.forward(l_alpha);
    let beta = match beta {
        BetaSource::Learned(net) => net.forward(l_beta),
        BetaSource::Fixed(b) => *b,
    };
    CorrectionOutput {
        y_tilde: blend(y, y_hat, y_tilde_prev, alpha, beta),
        alpha,
        beta,
        l_alpha,
        l_beta,
    }
}

/// Per-sample latest prediction and latest corrected label, keyed by the
/// sample's index in the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStore {
    classes: usize,
    y_hat: Vec<f64>,
    y_tilde_prev: Vec<f64>,
    last_updated: Vec<u64>,
}

impl PseudoLabelStore {
    /// Store seeded with `y_hat = y_tilde_prev = predictions` at `step`.
    pub fn from_predictions(predictions: &Tensor, step: u64) -> Self {
        let n = predictions.rows();
        Self {
            classes: predictions.cols(),
            y_hat: predictions.data().to_vec(),
            y_tilde_prev: predictions.data().to_vec(),
            last_updated: vec![step; n],
        }
    }

    /// Store whose two vectors are given explicitly (e.g. tests, restore).
    pub fn from_parts(classes: usize, y_hat: Vec<f64>, y_tilde_prev: Vec<f64>, last_updated: Vec<u64>) -> Result<Self> {
        let n = last_updated.len();
        if y_hat.len() != n * classes || y_tilde_prev.len() != n * classes {
            return Err(Error::dim("store", n * classes, y_hat.len().max(y_tilde_prev.len())));
        }
        Ok(Self {
            classes,
            y_hat,
            y_tilde_prev,
            last_updated,
        })
    }

    pub fn len(&self) -> usize {
        self.last_updated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.last_updated.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn y_hat(&self, i: usize) -> &[f64] {
        &self.y_hat[i * self.classes..(i + 1) * self.classes]
    }

    pub fn y_tilde_prev(&self, i: usize) -> &[f64] {
        &self.y_tilde_prev[i * self.classes..(i + 1) * self.classes]
    }

    pub fn last_updated(&self, i: usize) -> u64 {
        self.last_updated[i]
    }

    pub fn raw_y_hat(&self) -> &[f64] {
        &self.y_hat
    }

    pub fn raw_y_tilde_prev(&self) -> &[f64] {
        &self.y_tilde_prev
    }

    pub fn raw_last_updated(&self) -> &[u64] {
        &self.last_updated
    }

    pub fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::Index { index: i, len: self.len() });
        }
        Ok(())
    }

    /// Writes new predictions and corrected labels for `indices` (row `r` of
    /// each tensor belongs to `indices[r]`). Validates every index first so a
    /// failed update leaves the store untouched.
    pub fn update(&mut self, indices: &[usize], y_hat_new: &Tensor, y_tilde_new: &Tensor, step: u64) -> Result<()> {
        for &i in indices {
            self.check_index(i)?;
        }
        for t in [y_hat_new, y_tilde_new] {
            if t.rows() != indices.len() || t.cols() != self.classes {
                return Err(Error::dim(
                    "store update",
                    format!("[{}, {}]", indices.len(), self.classes),
                    format!("{:?}", t.shape()),
                ));
            }
        }
        let c = self.classes;
        for (r, &i) in indices.iter().enumerate() {
            self.y_hat[i * c..(i + 1) * c].copy_from_slice(y_hat_new.row(r));
            self.y_tilde_prev[i * c..(i + 1) * c].copy_from_slice(y_tilde_new.row(r));
            self.last_updated[i] = step;
        }
        Ok(())
    }

    /// Hard corrected label of every sample.
    pub fn hard_labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| hard_label(self.y_tilde_prev(i))).collect()
    }
}
