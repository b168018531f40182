//! First-order optimizers over flat parameter slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Coupled weight decay: `v <- mu v + g + wd p; p <- p - lr v`.
    SgdMomentum { momentum: f64, weight_decay: f64 },
    /// Bias-corrected Adam.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    /// Momentum buffer (SGD) or first moment (Adam).
    first: Vec<f64>,
    /// Second moment (Adam only; empty for SGD).
    second: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn sgd(len: usize, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum { momentum, weight_decay },
            lr,
            first: vec![0.0; len],
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn adam(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam { beta1, beta2, eps },
            lr,
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }

    /// Restores buffers saved by a checkpoint.
    pub fn restore(&mut self, first: Vec<f64>, second: Vec<f64>, step: u64) -> Result<()> {
        if first.len() != self.first.len() || second.len() != self.second.len() {
            return Err(Error::Checkpoint("optimizer buffer length mismatch".into()));
        }
        self.first = first;
        self.second = second;
        self.step = step;
        Ok(())
    }

    /// Applies one update in place. A non-finite gradient aborts before any
    /// state changes, reporting the index of the step that would have run.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::dim("params", self.first.len(), params.len()));
        }
        if grad.len() != params.len() {
            return Err(Error::dim("grad", params.len(), grad.len()));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step: self.step,
                context: format!("gradient component {i} is {}", grad[i]),
            });
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { momentum, weight_decay } => {
                for ((p, v), &g) in params.iter_mut().zip(self.first.iter_mut()).zip(grad) {
                    *v = momentum * *v + g + weight_decay * *p;
                    *p -= self.lr * *v;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, m), v), &g) in params
                    .iter_mut()
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                    .zip(grad)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut s = OptimizerState::sgd(1, 0.1, 0.0, 0.0);
        let mut p = [1.0];
        s.step(&mut p, &[2.0]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recursion() {
        let mut s = OptimizerState::sgd(1, 1.0, 0.9, 0.0);
        let mut p = [0.0];
        s.step(&mut p, &[1.0]).unwrap();
        assert_eq!(p[0], -1.0);
        s.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 2.9).abs() < 1e-15);
        assert_eq!(s.step_count(), 2);
    }

    #[test]
    fn weight_decay_is_coupled_into_velocity() {
        let mut s = OptimizerState::sgd(1, 0.5, 0.0, 0.1);
        let mut p = [2.0];
        s.step(&mut p, &[0.0]).unwrap();
        // v = 0.1 * 2
        assert!((p[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_fresh_state_is_noop() {
        let mut s = OptimizerState::sgd(3, 0.1, 0.9, 0.0);
        let mut p = [1.0, -2.0, 3.0];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
        assert_eq!(s.first_moment(), &[0.0; 3]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn zero_gradient_decays_momentum_buffer() {
        let mut s = OptimizerState::sgd(1, 0.1, 0.9, 0.0);
        let mut p = [0.0];
        s.step(&mut p, &[1.0]).unwrap();
        s.step(&mut p, &[0.0]).unwrap();
        assert!((s.first_moment()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = OptimizerState::adam(4, 1e-3, 0.9, 0.999, 1e-8);
        let mut p = [0.0; 4];
        s.step(&mut p, &[1.0; 4]).unwrap();
        for v in p {
            assert!((v + 1e-3).abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn adam_zero_gradient_fresh_state_is_noop() {
        let mut s = OptimizerState::adam(2, 1e-3, 0.9, 0.999, 1e-8);
        let mut p = [0.5, 0.25];
        s.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, [0.5, 0.25]);
        s.step(&mut p, &[1.0, 1.0]).unwrap();
        let m = s.first_moment()[0];
        s.step(&mut p, &[0.0, 0.0]).unwrap();
        assert!((s.first_moment()[0] - 0.9 * m).abs() < 1e-18);
    }

    #[test]
    fn nan_gradient_aborts_with_step_index() {
        let mut s = OptimizerState::sgd(2, 0.1, 0.9, 0.0);
        let mut p = [0.0, 0.0];
        s.step(&mut p, &[1.0, 1.0]).unwrap();
        let err = s.step(&mut p, &[f64::NAN, 1.0]).unwrap_err();
        match err {
            Error::NonFinite { step, .. } => assert_eq!(step, 1),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut s = OptimizerState::adam(2, 1e-3, 0.9, 0.999, 1e-8);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3]).is_err());
        assert!(s.step(&mut [0.0; 2], &[0.0; 3]).is_err());
    }
}
