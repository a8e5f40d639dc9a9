//! Probability and information-theoretic primitives over row-wise
//! distributions, plus their gradients with respect to the logits that
//! produced them.
//!
//! All logarithms are natural. Probabilities are clamped at [`PROB_FLOOR`]
//! before any logarithm.

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-12;

fn check_matrix(t: &Tensor, what: &str) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(invalid(format!("{what} must be a matrix, got shape {:?}", t.shape())));
    }
    Ok(())
}

fn check_same_shape(p: &Tensor, q: &Tensor) -> Result<()> {
    if p.shape() != q.shape() {
        return Err(invalid(format!(
            "distribution shapes differ: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    Ok(())
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    check_matrix(logits, "logits")?;
    let mut out = logits.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_exact_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

/// Row-wise log-softmax (`z - logsumexp(z)`).
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    check_matrix(logits, "logits")?;
    let mut out = logits.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_exact_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Ok(out)
}

fn row_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

/// Mean over rows of `KL(p_row ‖ q_row)`.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    check_matrix(p, "p")?;
    check_same_shape(p, q)?;
    let total: f64 = p.row_iter().zip(q.row_iter()).map(|(a, b)| row_kl(a, b)).sum();
    Ok(total / p.rows() as f64)
}

/// Per-row KL divergences.
pub fn kl_divergence_rows(p: &Tensor, q: &Tensor) -> Result<Vec<f64>> {
    check_matrix(p, "p")?;
    check_same_shape(p, q)?;
    Ok(p.row_iter().zip(q.row_iter()).map(|(a, b)| row_kl(a, b)).collect())
}

/// Per-row Shannon entropy `-Σ p log p` in nats.
pub fn entropy(p: &Tensor) -> Result<Vec<f64>> {
    check_matrix(p, "p")?;
    Ok(p.row_iter()
        .map(|row| {
            -row.iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| v * v.max(PROB_FLOOR).ln())
                .sum::<f64>()
        })
        .collect())
}

/// Mean over rows of `-log probs[row, label]`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_matrix(probs, "probs")?;
    if labels.len() != probs.rows() {
        return Err(invalid(format!(
            "{} labels for {} rows",
            labels.len(),
            probs.rows()
        )));
    }
    let c = probs.cols();
    let mut total = 0.0;
    for (row, &y) in probs.row_iter().zip(labels) {
        if y >= c {
            return Err(invalid(format!("label {y} out of range for {c} classes")));
        }
        total -= row[y].max(PROB_FLOOR).ln();
    }
    Ok(total / probs.rows() as f64)
}

/// I.i.d. normal draws of the given shape.
pub fn gaussian_sample(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    if !(std > 0.0) || !std.is_finite() {
        return Err(invalid(format!("std must be positive, got {std}")));
    }
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| mean + std * rng.standard_normal()).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Gradient of mean cross-entropy w.r.t. the logits: `(p - onehot) / n`.
pub fn cross_entropy_grad(probs: &Tensor, labels: &[usize]) -> Tensor {
    let n = probs.rows() as f64;
    let mut g = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        g.row_mut(i)[y] -= 1.0;
    }
    g.scale(1.0 / n);
    g
}

/// Gradient of mean `KL(p ‖ q)` w.r.t. the logits of `p`, where `p` and `q`
/// are both softmax outputs: `p ⊙ (log p − log q − KL_row) / n`.
pub fn kl_grad_wrt_first(p: &Tensor, log_p: &Tensor, log_q: &Tensor) -> Tensor {
    let n = p.rows() as f64;
    let c = p.cols();
    let mut g = Tensor::zeros(p.shape());
    for i in 0..p.rows() {
        let (pr, lp, lq) = (p.row(i), log_p.row(i), log_q.row(i));
        let kl: f64 = (0..c).map(|j| pr[j] * (lp[j] - lq[j])).sum();
        let out = g.row_mut(i);
        for j in 0..c {
            out[j] = pr[j] * (lp[j] - lq[j] - kl) / n;
        }
    }
    g
}

/// Gradient of mean `KL(p ‖ q)` w.r.t. the logits of `q`: `(q − p) / n`.
pub fn kl_grad_wrt_second(p: &Tensor, q: &Tensor) -> Tensor {
    let n = p.rows() as f64;
    let mut g = q.clone();
    g.add_scaled(p, -1.0).expect("shapes checked by caller");
    g.scale(1.0 / n);
    g
}

/// Gradient of the *summed* row entropies w.r.t. the logits:
/// `−p ⊙ (log p + H_row)`.
pub fn entropy_grad(p: &Tensor, log_p: &Tensor) -> Tensor {
    let c = p.cols();
    let mut g = Tensor::zeros(p.shape());
    for i in 0..p.rows() {
        let (pr, lp) = (p.row(i), log_p.row(i));
        let h: f64 = -(0..c).map(|j| pr[j] * lp[j]).sum::<f64>();
        let out = g.row_mut(i);
        for j in 0..c {
            out[j] = -pr[j] * (lp[j] + h);
        }
    }
    g
}
