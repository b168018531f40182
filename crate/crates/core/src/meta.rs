//! One bi-level iteration: virtual classifier step, analytic meta-gradient
//! of the meta loss w.r.t. the corrector parameters, meta update, and the
//! actual classifier step on the re-corrected labels.
//!
//! The virtual step is plain SGD,
//!
//! ```text
//! w_hat(theta) = w - eta/n * sum_i grad_w CE(f(x_i; w), y_tilde_i(theta))
//! ```
//!
//! and because the soft-target cross-entropy gradient is linear in the
//! target, `grad_w CE_i = -sum_k y_tilde_ik * g_ik` with
//! `g_ik = grad_w log p_ik`. The chain rule then gives
//!
//! ```text
//! dL_meta/dtheta = eta/n * sum_i sum_k s_ik * d y_tilde_ik / dtheta,
//! s_ik = <g_ik, grad_w L_meta(w_hat)>
//! ```
//!
//! with `d y_tilde/d alpha = y - z`, `z = beta * y_prev + (1 - beta) * y_hat`,
//! and `d y_tilde/d beta = (1 - alpha) * (y_prev - y_hat)`. The corrector
//! inputs `l_alpha`, `l_beta` depend only on stored labels, so they are
//! constants here.

use serde::{Deserialize, Serialize};

use crate::corrector::{BetaSource, CorrectionOutput, Corrector};
use crate::error::{Error, Result};
use crate::layers;
use crate::models::ClassifierMlp;
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

/// A training mini-batch with everything the corrector needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    /// Indices into the training split.
    pub indices: Vec<usize>,
    pub x: Tensor,
    /// One-hot observed labels.
    pub y: Tensor,
    /// Stored latest predictions.
    pub y_hat: Tensor,
    /// Stored previous corrected labels.
    pub y_prev: Tensor,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Meta mini-batch (clean labels, one-hot).
#[derive(Debug, Clone, PartialEq)]
pub struct MetaBatch {
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub y: Tensor,
}

/// Corrects every sample of a batch; returns per-sample outputs and the
/// stacked targets.
pub fn correct_batch(corrector: &Corrector, batch: &TrainBatch) -> Result<(Vec<CorrectionOutput>, Tensor)> {
    let outputs: Vec<CorrectionOutput> = (0..batch.len())
        .map(|r| corrector.correct(batch.y.row(r), batch.y_hat.row(r), batch.y_prev.row(r)))
        .collect();
    let mut targets = Tensor::zeros(&[batch.len(), batch.y.cols()]);
    for (r, o) in outputs.iter().enumerate() {
        targets.row_mut(r).copy_from_slice(&o.y_tilde);
    }
    Ok((outputs, targets))
}

/// `w - eta * grad_w mean CE(f(x; w), targets)`; plain SGD, no momentum or
/// weight decay.
pub fn virtual_step(classifier: &ClassifierMlp, x: &Tensor, targets: &Tensor, eta: f64) -> Result<Vec<f64>> {
    let (_, grad) = classifier.loss_grad(x, targets)?;
    Ok(classifier
        .params()
        .values()
        .iter()
        .zip(&grad)
        .map(|(w, g)| w - eta * g)
        .collect())
}

/// Mean clean-label CE of the meta batch under `params`.
pub fn meta_loss(classifier: &ClassifierMlp, params: &[f64], meta: &MetaBatch) -> Result<f64> {
    let (logits, _) = classifier.predict_with(params, &meta.x)?;
    Ok(layers::cross_entropy_soft(&logits, &meta.y)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaGradient {
    pub alpha: Vec<f64>,
    /// Empty when β is fixed.
    pub beta: Vec<f64>,
}

impl MetaGradient {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.alpha.clone();
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().chain(&self.beta).all(|v| v.is_finite())
    }
}

/// Result of [`meta_gradient`].
#[derive(Debug, Clone)]
pub struct MetaOutcome {
    pub grad: MetaGradient,
    /// Meta loss at the virtual parameters.
    pub meta_loss: f64,
    /// Per-sample `grad_w log p_k` at the current `w`, reusable by the
    /// actual step.
    pub logprob_grads: Vec<Vec<Vec<f64>>>,
    /// Training indices consumed by the virtual step.
    pub consumed: Vec<usize>,
}

/// Exact gradient of `theta -> L_meta(w_hat(theta))`.
pub fn meta_gradient(
    classifier: &ClassifierMlp,
    corrector: &Corrector,
    batch: &TrainBatch,
    meta: &MetaBatch,
    eta: f64,
    step: u64,
) -> Result<MetaOutcome> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Contract("empty training batch".into()));
    }
    let c = batch.y.cols();
    let (outputs, targets) = correct_batch(corrector, batch)?;
    let w_hat = virtual_step(classifier, &batch.x, &targets, eta)?;

    // grad_w L_meta at w_hat
    let (meta_loss, v) = classifier.loss_grad_with(&w_hat, &meta.x, &meta.y)?;

    let mut grad_alpha = vec![0.0; corrector.alpha.params().len()];
    let mut grad_beta = match &corrector.beta {
        BetaSource::Learned(net) => vec![0.0; net.params().len()],
        BetaSource::Fixed(_) => Vec::new(),
    };
    let scale = eta / n as f64;
    let mut logprob_grads = Vec::with_capacity(n);
    for (r, out) in outputs.iter().enumerate() {
        let (g, _) = classifier.per_sample_logprob_grads(batch.x.row(r))?;
        let s: Vec<f64> = g.iter().map(|gk| gk.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        logprob_grads.push(g);

        let (y, yh, yp) = (batch.y.row(r), batch.y_hat.row(r), batch.y_prev.row(r));
        let (l_alpha, l_beta) = (out.l_alpha, out.l_beta);
        let (alpha, beta) = (out.alpha, out.beta);

        // sum_k s_k * d y_tilde_k / d alpha
        let d_alpha: f64 = (0..c)
            .map(|k| s[k] * (y[k] - (beta * yp[k] + (1.0 - beta) * yh[k])))
            .sum();
        let (_, ga) = corrector.alpha.param_grad(l_alpha);
        for (acc, gv) in grad_alpha.iter_mut().zip(&ga) {
            *acc += scale * d_alpha * gv;
        }
        if let BetaSource::Learned(net) = &corrector.beta {
            let d_beta: f64 = (0..c).map(|k| s[k] * (1.0 - alpha) * (yp[k] - yh[k])).sum();
            let (_, gb) = net.param_grad(l_beta);
            for (acc, gv) in grad_beta.iter_mut().zip(&gb) {
                *acc += scale * d_beta * gv;
            }
        }
    }
    let grad = MetaGradient {
        alpha: grad_alpha,
        beta: grad_beta,
    };
    if !grad.is_finite() || !meta_loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            context: format!(
                "meta-gradient on train batch {:?}, meta batch {:?}",
                batch.indices, meta.indices
            ),
        });
    }
    Ok(MetaOutcome {
        grad,
        meta_loss,
        logprob_grads,
        consumed: batch.indices.clone(),
    })
}

/// One optimizer (Adam) step on `theta`.
pub fn meta_update(corrector: &mut Corrector, grad: &MetaGradient, state: &mut OptimizerState) -> Result<()> {
    let mut theta = corrector.theta();
    state.step(&mut theta, &grad.concat())?;
    corrector.set_theta(&theta)
}

/// How the actual step obtains its gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ActualGradient {
    /// Fresh backward pass with the re-corrected labels.
    #[default]
    Recompute,
    /// Linear recombination of the per-sample log-prob gradients cached by
    /// the meta-gradient.
    Reuse,
}

#[derive(Debug, Clone)]
pub struct ActualOutcome {
    pub loss: f64,
    pub outputs: Vec<CorrectionOutput>,
    pub targets: Tensor,
    pub consumed: Vec<usize>,
}

/// Re-corrects the batch under the (already updated) corrector and applies
/// one classifier-optimizer step on those targets.
pub fn actual_step(
    classifier: &mut ClassifierMlp,
    corrector: &Corrector,
    batch: &TrainBatch,
    state: &mut OptimizerState,
    mode: ActualGradient,
    cached: Option<&[Vec<Vec<f64>>]>,
) -> Result<ActualOutcome> {
    let (outputs, targets) = correct_batch(corrector, batch)?;
    let (loss, grad) = match (mode, cached) {
        (ActualGradient::Reuse, Some(cache)) => {
            let (logits, _) = classifier.predict(&batch.x)?;
            let (loss, _) = layers::cross_entropy_soft(&logits, &targets)?;
            let n = batch.len() as f64;
            let mut grad = vec![0.0; classifier.params().len()];
            for (r, per_class) in cache.iter().enumerate() {
                for (k, gk) in per_class.iter().enumerate() {
                    let t = targets.row(r)[k];
                    if t != 0.0 {
                        for (acc, g) in grad.iter_mut().zip(gk) {
                            *acc -= t * g / n;
                        }
                    }
                }
            }
            (loss, grad)
        }
        (ActualGradient::Reuse, None) => {
            return Err(Error::Contract("reuse mode needs cached per-sample gradients".into()))
        }
        (ActualGradient::Recompute, _) => classifier.loss_grad(&batch.x, &targets)?,
    };
    state.step(classifier.params_mut().values_mut(), &grad)?;
    Ok(ActualOutcome {
        loss,
        outputs,
        targets,
        consumed: batch.indices.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::one_hot;
    use crate::testing::{central_diff, cosine, max_component_rel_err, rand_distributions, rand_tensor, rel_err};

    struct Instance {
        classifier: ClassifierMlp,
        corrector: Corrector,
        batch: TrainBatch,
        meta: MetaBatch,
    }

    fn instance(seed: u64, dim: usize, hidden: usize, classes: usize, coef_hidden: usize, n: usize, m: usize, fixed_beta: Option<f64>) -> Instance {
        let classifier = ClassifierMlp::new(&[dim, hidden, classes], seed).unwrap();
        let corrector = Corrector::new(coef_hidden, seed, fixed_beta).unwrap();
        let labels = (0..n).map(|i| (i * 7 + seed as usize) % classes);
        let batch = TrainBatch {
            indices: (0..n).map(|i| i * 3).collect(),
            x: rand_tensor(&[n, dim], 1.5, seed + 100),
            y: one_hot(labels, n, classes),
            y_hat: rand_distributions(n, classes, seed + 200),
            y_prev: rand_distributions(n, classes, seed + 300),
        };
        let meta = MetaBatch {
            indices: (0..m).collect(),
            x: rand_tensor(&[m, dim], 1.5, seed + 400),
            y: one_hot((0..m).map(|i| (i + seed as usize) % classes), m, classes),
        };
        Instance { classifier, corrector, batch, meta }
    }

    /// Black-box meta loss as a function of theta.
    fn composed_loss(inst: &Instance, eta: f64, theta: &[f64]) -> f64 {
        let mut k = inst.corrector.clone();
        k.set_theta(theta).unwrap();
        let (_, targets) = correct_batch(&k, &inst.batch).unwrap();
        let w_hat = virtual_step(&inst.classifier, &inst.batch.x, &targets, eta).unwrap();
        meta_loss(&inst.classifier, &w_hat, &inst.meta).unwrap()
    }

    fn check_against_fd(inst: &Instance, eta: f64) -> (f64, f64) {
        check_against_fd_eps(inst, eta, 1e-5)
    }

    fn check_against_fd_eps(inst: &Instance, eta: f64, eps: f64) -> (f64, f64) {
        let analytic = meta_gradient(&inst.classifier, &inst.corrector, &inst.batch, &inst.meta, eta, 0)
            .unwrap()
            .grad
            .concat();
        let theta = inst.corrector.theta();
        let numeric = central_diff(&theta, eps, |t| composed_loss(inst, eta, t));
        (cosine(&analytic, &numeric), max_component_rel_err(&analytic, &numeric, 1e-3))
    }

    #[test]
    fn toy_meta_gradient_matches_finite_differences() {
        // 2-8-2 classifier, 10 train and 4 meta samples
        let inst = instance(7, 2, 8, 2, 8, 10, 4, None);
        let (cos, err) = check_against_fd_eps(&inst, 0.5, 1e-4);
        assert!(cos > 0.999, "cosine {cos}");
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn random_meta_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let classes = 2 + (seed as usize % 3);
            let inst = instance(seed * 31 + 1, 3 + seed as usize % 3, 6, classes, 5, 3 + seed as usize % 4, 4, None);
            let (cos, err) = check_against_fd(&inst, 0.3);
            assert!(cos > 0.999, "seed {seed}: cosine {cos}");
            assert!(err < 1e-3, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn full_width_coefficient_nets_match_finite_differences() {
        let inst = instance(3, 4, 10, 3, crate::models::COEFFICIENT_HIDDEN, 6, 5, None);
        let (cos, err) = check_against_fd(&inst, 0.1);
        assert!(cos > 0.999, "cosine {cos}");
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn fixed_beta_gradient_covers_alpha_only() {
        let inst = instance(11, 3, 6, 3, 6, 5, 4, Some(0.3));
        let mg = meta_gradient(&inst.classifier, &inst.corrector, &inst.batch, &inst.meta, 0.4, 0).unwrap();
        assert!(mg.grad.beta.is_empty());
        assert_eq!(mg.grad.alpha.len(), inst.corrector.theta_len());
        let (cos, err) = check_against_fd(&inst, 0.4);
        assert!(cos > 0.999 && err < 1e-3, "cosine {cos}, err {err}");
    }

    #[test]
    fn small_step_against_meta_gradient_lowers_meta_loss() {
        let inst = instance(5, 3, 8, 3, 8, 8, 6, None);
        let eta = 0.5;
        let g = meta_gradient(&inst.classifier, &inst.corrector, &inst.batch, &inst.meta, eta, 0)
            .unwrap()
            .grad
            .concat();
        let theta = inst.corrector.theta();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let moved: Vec<f64> = theta.iter().zip(&g).map(|(t, d)| t - 1e-3 * d / norm).collect();
        assert!(composed_loss(&inst, eta, &moved) < composed_loss(&inst, eta, &theta));
    }

    #[test]
    fn virtual_step_matches_numeric_gradient() {
        let inst = instance(9, 3, 5, 3, 4, 6, 2, None);
        let (_, targets) = correct_batch(&inst.corrector, &inst.batch).unwrap();
        let eta = 0.2;
        let w = inst.classifier.params().values().to_vec();
        let num = central_diff(&w, 1e-6, |p| {
            let (logits, _) = inst.classifier.predict_with(p, &inst.batch.x).unwrap();
            layers::cross_entropy_soft(&logits, &targets).unwrap().0
        });
        let expected: Vec<f64> = w.iter().zip(&num).map(|(a, g)| a - eta * g).collect();
        let got = virtual_step(&inst.classifier, &inst.batch.x, &targets, eta).unwrap();
        let delta_got: Vec<f64> = got.iter().zip(&w).map(|(a, b)| a - b).collect();
        let delta_exp: Vec<f64> = expected.iter().zip(&w).map(|(a, b)| a - b).collect();
        assert!(rel_err(&delta_got, &delta_exp) < 1e-6);
    }

    #[test]
    fn virtual_step_leaves_classifier_untouched() {
        let inst = instance(2, 3, 5, 3, 4, 4, 2, None);
        let before = inst.classifier.clone();
        let _ = meta_gradient(&inst.classifier, &inst.corrector, &inst.batch, &inst.meta, 0.1, 0).unwrap();
        assert_eq!(before, inst.classifier);
    }

    #[test]
    fn reused_and_recomputed_actual_steps_agree() {
        let inst = instance(4, 3, 7, 4, 5, 6, 3, None);
        let mg = meta_gradient(&inst.classifier, &inst.corrector, &inst.batch, &inst.meta, 0.1, 0).unwrap();
        let run = |mode| {
            let mut c = inst.classifier.clone();
            let mut opt = OptimizerState::sgd(c.params().len(), 0.1, 0.9, 5e-4);
            let out = actual_step(&mut c, &inst.corrector, &inst.batch, &mut opt, mode, Some(&mg.logprob_grads)).unwrap();
            (c.params().values().to_vec(), out.loss)
        };
        let (a, la) = run(ActualGradient::Recompute);
        let (b, lb) = run(ActualGradient::Reuse);
        assert_eq!(la, lb);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn meta_update_changes_theta_and_consumes_same_batch() {
        let inst = instance(8, 3, 5, 3, 4, 4, 3, None);
        let mut k = inst.corrector.clone();
        let mut state = OptimizerState::adam(k.theta_len(), 1e-3, 0.9, 0.999, 1e-8);
        let mg = meta_gradient(&inst.classifier, &k, &inst.batch, &inst.meta, 0.1, 0).unwrap();
        meta_update(&mut k, &mg.grad, &mut state).unwrap();
        assert_ne!(k.theta(), inst.corrector.theta());
        let mut c = inst.classifier.clone();
        let mut opt = OptimizerState::sgd(c.params().len(), 0.1, 0.9, 0.0);
        let act = actual_step(&mut c, &k, &inst.batch, &mut opt, ActualGradient::Recompute, None).unwrap();
        assert_eq!(mg.consumed, act.consumed);
    }

    #[test]
    fn non_finite_meta_gradient_reports_step_and_batch() {
        let mut inst = instance(6, 3, 5, 3, 4, 4, 3, None);
        let last = inst.classifier.params().len() - 1;
        inst.classifier.params_mut().values_mut()[last] = f64::NAN;
        match meta_gradient(&inst.classifier, &inst.corrector, &inst.batch, &inst.meta, 0.1, 17) {
            Err(Error::NonFinite { step, context }) => {
                assert_eq!(step, 17);
                assert!(context.contains("[0, 3, 6, 9]"), "{context}");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn reuse_without_cache_is_a_contract_error() {
        let inst = instance(1, 3, 5, 3, 4, 4, 3, None);
        let mut c = inst.classifier.clone();
        let mut opt = OptimizerState::sgd(c.params().len(), 0.1, 0.9, 0.0);
        let r = actual_step(&mut c, &inst.corrector, &inst.batch, &mut opt, ActualGradient::Reuse, None);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn zero_virtual_step_keeps_weights_and_zeroes_meta_gradient() {
        let inst = instance(12, 3, 6, 3, 5, 5, 3, None);
        let (_, targets) = correct_batch(&inst.corrector, &inst.batch).unwrap();
        let w_hat = virtual_step(&inst.classifier, &inst.batch.x, &targets, 0.0).unwrap();
        assert_eq!(w_hat, inst.classifier.params().values());
        let mg = meta_gradient(&inst.classifier, &inst.corrector, &inst.batch, &inst.meta, 0.0, 0).unwrap();
        assert!(mg.grad.concat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matching_target_gives_no_virtual_move() {
        let inst = instance(13, 4, 6, 3, 5, 1, 2, None);
        let (_, probs) = inst.classifier.predict(&inst.batch.x).unwrap();
        let w_hat = virtual_step(&inst.classifier, &inst.batch.x, &probs, 0.7).unwrap();
        assert_eq!(w_hat, inst.classifier.params().values());
    }

    #[test]
    fn stationary_meta_loss_gives_zero_meta_gradient() {
        let mut inst = instance(14, 3, 6, 3, 5, 4, 3, None);
        let eta = 0.3;
        let (_, targets) = correct_batch(&inst.corrector, &inst.batch).unwrap();
        let w_hat = virtual_step(&inst.classifier, &inst.batch.x, &targets, eta).unwrap();
        let (_, probs) = inst.classifier.predict_with(&w_hat, &inst.meta.x).unwrap();
        inst.meta.y = probs;
        let mg = meta_gradient(&inst.classifier, &inst.corrector, &inst.batch, &inst.meta, eta, 0).unwrap();
        assert!(mg.grad.concat().iter().all(|g| g.abs() < 1e-15), "{:?}", mg.grad);
    }

    #[test]
    fn saturated_alpha_step_equals_plain_ce_step() {
        let mut inst = instance(15, 3, 6, 3, 5, 6, 3, Some(0.4));
        // observed labels everywhere, so the saturated blend is exact
        inst.batch.y_hat = inst.batch.y.clone();
        inst.batch.y_prev = inst.batch.y.clone();
        let last = inst.corrector.alpha.params().len() - 1;
        inst.corrector.alpha.params_mut().values_mut()[last] = 60.0;
        let (_, targets) = correct_batch(&inst.corrector, &inst.batch).unwrap();
        assert_eq!(targets, inst.batch.y);

        let mut a = inst.classifier.clone();
        let mut opt_a = OptimizerState::sgd(a.params().len(), 0.1, 0.9, 5e-4);
        actual_step(&mut a, &inst.corrector, &inst.batch, &mut opt_a, ActualGradient::Recompute, None).unwrap();
        let mut b = inst.classifier.clone();
        let mut opt_b = OptimizerState::sgd(b.params().len(), 0.1, 0.9, 5e-4);
        let (_, grad) = b.loss_grad(&inst.batch.x, &inst.batch.y).unwrap();
        opt_b.step(b.params_mut().values_mut(), &grad).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_actual_step_lowers_batch_loss() {
        let inst = instance(16, 4, 8, 3, 5, 8, 3, None);
        let mut c = inst.classifier.clone();
        let mut opt = OptimizerState::sgd(c.params().len(), 1e-4, 0.0, 0.0);
        let (_, targets) = correct_batch(&inst.corrector, &inst.batch).unwrap();
        let before = c.loss_grad(&inst.batch.x, &targets).unwrap().0;
        actual_step(&mut c, &inst.corrector, &inst.batch, &mut opt, ActualGradient::Recompute, None).unwrap();
        let after = c.loss_grad(&inst.batch.x, &targets).unwrap().0;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn halving_probe_finds_meta_descent() {
        for seed in 20..25u64 {
            let inst = instance(seed, 3, 8, 3, 8, 8, 4, None);
            let eta = 0.5;
            let g = meta_gradient(&inst.classifier, &inst.corrector, &inst.batch, &inst.meta, eta, 0)
                .unwrap()
                .grad
                .concat();
            let theta = inst.corrector.theta();
            let base = composed_loss(&inst, eta, &theta);
            let mut lr = 1e-2;
            let found = (0..30).any(|_| {
                let moved: Vec<f64> = theta.iter().zip(&g).map(|(t, d)| t - lr * d).collect();
                lr /= 2.0;
                composed_loss(&inst, eta, &moved) <= base
            });
            assert!(found, "seed {seed}: no descending step size");
        }
    }

    #[test]
    fn zero_meta_gradient_leaves_theta() {
        let inst = instance(17, 3, 5, 3, 4, 4, 3, None);
        let mut k = inst.corrector.clone();
        let mut state = OptimizerState::adam(k.theta_len(), 1e-3, 0.9, 0.999, 1e-8);
        let n = k.alpha.params().len();
        let zero = MetaGradient {
            alpha: vec![0.0; n],
            beta: vec![0.0; k.theta_len() - n],
        };
        meta_update(&mut k, &zero, &mut state).unwrap();
        assert_eq!(k.theta(), inst.corrector.theta());
    }

    #[test]
    fn meta_trajectories_are_deterministic() {
        let run = || {
            let inst = instance(18, 3, 6, 3, 5, 6, 3, None);
            let mut k = inst.corrector.clone();
            let mut state = OptimizerState::adam(k.theta_len(), 1e-3, 0.9, 0.999, 1e-8);
            let mut c = inst.classifier.clone();
            let mut opt = OptimizerState::sgd(c.params().len(), 0.1, 0.9, 5e-4);
            let mut thetas = Vec::new();
            for _ in 0..3 {
                let mg = meta_gradient(&c, &k, &inst.batch, &inst.meta, 0.1, 0).unwrap();
                meta_update(&mut k, &mg.grad, &mut state).unwrap();
                actual_step(&mut c, &k, &inst.batch, &mut opt, ActualGradient::Recompute, None).unwrap();
                thetas.push(k.theta());
            }
            thetas
        };
        let (a, b) = (run(), run());
        assert!(a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
