//! Layer primitives with hand-derived backward passes.
//!
//! Every function here is pure and allocation-local, so identical inputs
//! give bitwise identical outputs regardless of caller or thread.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on target row sums accepted by [`cross_entropy_soft`].
pub const TARGET_SUM_TOL: f64 = 1e-9;

/// `out[b, j] = sum_k input[b, k] * weights[k, j] + bias[j]`.
pub fn affine_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.shape().len() != 2 {
        return Err(Error::dim("input", "2-D", format!("{:?}", input.shape())));
    }
    if weights.shape().len() != 2 {
        return Err(Error::dim("weights", "2-D", format!("{:?}", weights.shape())));
    }
    let (batch, d_in) = (input.shape()[0], input.shape()[1]);
    let (w_in, d_out) = (weights.shape()[0], weights.shape()[1]);
    if w_in != d_in {
        return Err(Error::dim("weights", format!("[{d_in}, _]"), format!("{:?}", weights.shape())));
    }
    if bias.len() != d_out {
        return Err(Error::dim("bias", d_out, bias.len()));
    }
    let mut out = vec![0.0; batch * d_out];
    affine_rows(input.data(), weights.data(), bias.data(), d_in, d_out, &mut out);
    Tensor::matrix(batch, d_out, out)
}

pub(crate) fn affine_rows(x: &[f64], w: &[f64], b: &[f64], d_in: usize, d_out: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks_exact(d_in).zip(out.chunks_exact_mut(d_out)) {
        or.copy_from_slice(b);
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[k * d_out..(k + 1) * d_out];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
}

/// Gradients of an affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn affine_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<AffineGrads> {
    let (batch, d_in) = (input.rows(), input.cols());
    let d_out = weights.cols();
    if weights.rows() != d_in {
        return Err(Error::dim("weights", d_in, weights.rows()));
    }
    if grad_out.rows() != batch || grad_out.cols() != d_out {
        return Err(Error::dim(
            "grad_out",
            format!("[{batch}, {d_out}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut gx = vec![0.0; batch * d_in];
    let mut gw = vec![0.0; d_in * d_out];
    let mut gb = vec![0.0; d_out];
    affine_backward_rows(
        input.data(),
        weights.data(),
        grad_out.data(),
        d_in,
        d_out,
        Some(&mut gx),
        &mut gw,
        &mut gb,
    );
    Ok(AffineGrads {
        input: Tensor::matrix(batch, d_in, gx)?,
        weights: Tensor::matrix(d_in, d_out, gw)?,
        bias: Tensor::vector(gb),
    })
}

/// Accumulates into `gw`/`gb`; writes `gx` when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn affine_backward_rows(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    d_in: usize,
    d_out: usize,
    mut gx: Option<&mut [f64]>,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    for (r, (xr, gr)) in x.chunks_exact(d_in).zip(gout.chunks_exact(d_out)).enumerate() {
        for (b, &g) in gb.iter_mut().zip(gr) {
            *b += g;
        }
        for (k, &xv) in xr.iter().enumerate() {
            let wr = &w[k * d_out..(k + 1) * d_out];
            if xv != 0.0 {
                let gwr = &mut gw[k * d_out..(k + 1) * d_out];
                for (o, &g) in gwr.iter_mut().zip(gr) {
                    *o += xv * g;
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                gx[r * d_in + k] = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
            }
        }
    }
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

/// Gradient through relu given the pre-activation.
pub fn relu_backward(pre: &Tensor, grad_out: &Tensor) -> Tensor {
    zip_map(pre, grad_out, |p, g| if p > 0.0 { g } else { 0.0 })
}

/// Logistic function with separate branches so neither tail overflows.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    map(x, sigmoid)
}

/// Gradient through sigmoid given its output.
pub fn sigmoid_backward(out: &Tensor, grad_out: &Tensor) -> Tensor {
    zip_map(out, grad_out, |s, g| g * s * (1.0 - s))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_forward(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = logits.clone();
    if c > 0 {
        for row in out.data_mut().chunks_exact_mut(c) {
            softmax_in_place(row);
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise log-softmax via log-sum-exp.
pub fn log_softmax(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = logits.clone();
    if c > 0 {
        for row in out.data_mut().chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
    }
    out
}

/// Checks that a row is a probability vector within [`TARGET_SUM_TOL`].
pub fn validate_distribution(row: &[f64]) -> Result<()> {
    if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Contract(format!("target has negative or non-finite entries: {row:?}")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > TARGET_SUM_TOL {
        return Err(Error::Contract(format!("target row sums to {s}, not 1")));
    }
    Ok(())
}

/// Mean soft-target cross-entropy over the batch and its gradient with
/// respect to the logits, `(softmax(logits) - target) / batch`.
pub fn cross_entropy_soft(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape() != target.shape() {
        return Err(Error::dim(
            "target",
            format!("{:?}", logits.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    let c = logits.cols();
    let batch = logits.rows();
    if batch == 0 {
        return Ok((0.0, logits.clone()));
    }
    for row in target.data().chunks_exact(c) {
        validate_distribution(row)?;
    }
    let logp = log_softmax(logits);
    let mut grad = softmax_forward(logits);
    let n = batch as f64;
    let mut loss = 0.0;
    for ((lp, t), g) in logp
        .data()
        .chunks_exact(c)
        .zip(target.data().chunks_exact(c))
        .zip(grad.data_mut().chunks_exact_mut(c))
    {
        for k in 0..c {
            if t[k] != 0.0 {
                loss -= t[k] * lp[k];
            }
            g[k] = (g[k] - t[k]) / n;
        }
    }
    Ok((loss / n, grad))
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = f(*v));
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    out.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(x, &y)| *x = f(*x, y));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{central_diff, rand_tensor, rel_err};

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_identity_weights() {
        let out = affine_forward(
            &t(&[&[1.0, 2.0]]),
            &t(&[&[1.0, 0.0], &[0.0, 1.0]]),
            &Tensor::vector(vec![0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_hand_multiply() {
        let out = affine_forward(
            &t(&[&[1.0, 1.0]]),
            &t(&[&[2.0, 3.0], &[4.0, 5.0]]),
            &Tensor::vector(vec![1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[7.0, 9.0]);
    }

    #[test]
    fn affine_empty_batch() {
        let out = affine_forward(&Tensor::zeros(&[0, 3]), &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out.shape(), &[0, 2]);
    }

    #[test]
    fn affine_shape_errors_name_operand() {
        let err = affine_forward(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2])).unwrap_err();
        assert!(err.to_string().contains("weights"), "{err}");
        let err = affine_forward(&Tensor::zeros(&[1, 2]), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[3])).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let r = relu_forward(&Tensor::vector(vec![-1.0, 3.0]));
        assert_eq!(r.data(), &[0.0, 3.0]);
        assert_eq!(sigmoid(0.0), 0.5);
        let s = sigmoid(-50.0);
        assert!(s > 0.0 && s <= 1e-20, "{s}");
        assert!(sigmoid(-800.0).is_finite());
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn softmax_values() {
        let s = softmax_forward(&t(&[&[0.0, 0.0]]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_forward(&t(&[&[1000.0, 0.0]]));
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
        let s = softmax_forward(&t(&[&[2f64.ln(), 0.0]]));
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_at_large_logits() {
        let logits = rand_tensor(&[50, 7], 1e4, 3);
        let s = softmax_forward(&logits);
        for r in 0..50 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "row {r} sums to {sum}");
            assert!(s.row(r).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn cross_entropy_hand_values() {
        let (loss, _) = cross_entropy_soft(&t(&[&[0.0, 0.0]]), &t(&[&[0.5, 0.5]])).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        let (loss, grad) = cross_entropy_soft(&t(&[&[0.0, 0.0]]), &t(&[&[1.0, 0.0]])).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(grad.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_rejects_non_distribution() {
        let err = cross_entropy_soft(&t(&[&[0.0, 0.0]]), &t(&[&[0.7, 0.7]])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let err = cross_entropy_soft(&t(&[&[0.0, 0.0]]), &t(&[&[1.5, -0.5]])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_target() {
        let logits = rand_tensor(&[6, 3], 2.0, 11);
        let target = softmax_forward(&rand_tensor(&[6, 3], 1.0, 12));
        let (_, grad) = cross_entropy_soft(&logits, &target).unwrap();
        let p = softmax_forward(&logits);
        for i in 0..grad.len() {
            let expected = (p.data()[i] - target.data()[i]) / 6.0;
            assert_eq!(grad.data()[i], expected);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let logits = rand_tensor(&[4, 3], 2.0, 100 + seed);
            let target = softmax_forward(&rand_tensor(&[4, 3], 1.5, 200 + seed));
            let (_, grad) = cross_entropy_soft(&logits, &target).unwrap();
            let numeric = central_diff(logits.data(), 1e-5, |v| {
                let l = Tensor::new(logits.shape().to_vec(), v.to_vec()).unwrap();
                cross_entropy_soft(&l, &target).unwrap().0
            });
            assert!(rel_err(grad.data(), &numeric) < 1e-6);
        }
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        for seed in 0..5 {
            let (b, din, dout) = (3 + seed as usize % 3, 2 + seed as usize % 4, 1 + seed as usize % 3);
            let x = rand_tensor(&[b, din], 1.0, seed);
            let w = rand_tensor(&[din, dout], 1.0, seed + 10);
            let bias = rand_tensor(&[dout], 1.0, seed + 20);
            // scalar objective: <out, probe>
            let probe = rand_tensor(&[b, dout], 1.0, seed + 30);
            let obj = |x: &Tensor, w: &Tensor, bias: &Tensor| {
                let out = affine_forward(x, w, bias).unwrap();
                out.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum::<f64>()
            };
            let g = affine_backward(&x, &w, &probe).unwrap();
            let nx = central_diff(x.data(), 1e-5, |v| obj(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), &w, &bias));
            let nw = central_diff(w.data(), 1e-5, |v| obj(&x, &Tensor::new(w.shape().to_vec(), v.to_vec()).unwrap(), &bias));
            let nb = central_diff(bias.data(), 1e-5, |v| obj(&x, &w, &Tensor::vector(v.to_vec())));
            assert!(rel_err(g.input.data(), &nx) < 1e-5);
            assert!(rel_err(g.weights.data(), &nw) < 1e-5);
            assert!(rel_err(g.bias.data(), &nb) < 1e-5);
        }
    }

    #[test]
    fn relu_and_sigmoid_backward_match_finite_differences() {
        for seed in 0..5 {
            let x = rand_tensor(&[4, 5], 2.0, 40 + seed);
            let probe = rand_tensor(&[4, 5], 1.0, 50 + seed);
            let dot = |t: &Tensor| t.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
            let g_relu = relu_backward(&x, &probe);
            let n_relu = central_diff(x.data(), 1e-5, |v| dot(&relu_forward(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap())));
            assert!(rel_err(g_relu.data(), &n_relu) < 1e-5);

            let g_sig = sigmoid_backward(&sigmoid_forward(&x), &probe);
            let n_sig = central_diff(x.data(), 1e-5, |v| dot(&sigmoid_forward(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap())));
            assert!(rel_err(g_sig.data(), &n_sig) < 1e-5);
        }
    }

    #[test]
    fn forward_backward_bitwise_deterministic() {
        let x = rand_tensor(&[5, 4], 1.0, 7);
        let w = rand_tensor(&[4, 3], 1.0, 8);
        let b = rand_tensor(&[3], 1.0, 9);
        let a1 = affine_forward(&x, &w, &b).unwrap();
        let a2 = affine_forward(&x, &w, &b).unwrap();
        assert_eq!(a1, a2);
        let g1 = affine_backward(&x, &w, &a1).unwrap();
        let g2 = affine_backward(&x, &w, &a2).unwrap();
        assert_eq!(g1, g2);
    }
}
