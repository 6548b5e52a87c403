//! Differentiable composites built from the primitive set: normalization,
//! classification losses, and distance computations.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// One-hot matrix `[n, classes]` as a constant tensor.
pub fn one_hot<R: Real>(labels: &[usize], classes: usize) -> Result<Tensor<R>> {
    let n = labels.len();
    let mut data = vec![R::zero(); n * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::contract(format!(
                "one_hot: label {y} out of range for {classes} classes"
            )));
        }
        data[i * classes + y] = R::one();
    }
    Tensor::from_vec(&[n, classes], data)
}

/// Per-row maximum as a detached `[n, 1]` constant. Subtracting it shifts
/// logits into a numerically safe range without touching gradients.
fn row_max_detached<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x.data()[i * c..(i + 1) * c];
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m {
                m = v;
            }
        }
        out.push(m);
    }
    Tensor::from_vec(&[n, 1], out)
}

/// Row-wise log-softmax of a `[n, classes]` logit matrix.
pub fn log_softmax<R: Real>(logits: &Tensor<R>) -> Result<Tensor<R>> {
    if logits.shape().len() != 2 {
        return Err(Error::contract(format!(
            "log_softmax: expected [n, classes] logits, got shape {:?}",
            logits.shape()
        )));
    }
    let shifted = logits.sub(&row_max_detached(logits)?)?;
    let lse = shifted.exp().sum_axis(1, true)?.ln();
    shifted.sub(&lse)
}

/// Row-wise softmax probabilities.
pub fn softmax<R: Real>(logits: &Tensor<R>) -> Result<Tensor<R>> {
    Ok(log_softmax(logits)?.exp())
}

/// Mean cross-entropy of `[n, classes]` logits against integer labels.
pub fn softmax_cross_entropy<R: Real>(logits: &Tensor<R>, labels: &[usize]) -> Result<Tensor<R>> {
    let logp = log_softmax(logits)?;
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::contract(format!(
            "softmax_cross_entropy: {} labels for {n} rows",
            labels.len()
        )));
    }
    let oh = one_hot::<R>(labels, c)?;
    let n_r = R::from_f64_lossy(n as f64);
    Ok(logp.mul(&oh)?.sum().scale(-R::one() / n_r))
}

/// Fraction of rows whose argmax logit equals the label (ties take the lowest
/// index).
pub fn accuracy<R: Real>(logits: &Tensor<R>, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || labels.len() != s[0] {
        return Err(Error::contract(format!(
            "accuracy: logits {:?} incompatible with {} labels",
            s,
            labels.len()
        )));
    }
    let (n, c) = (s[0], s[1]);
    if n == 0 {
        return Err(Error::contract("accuracy: empty batch".to_string()));
    }
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Squared Euclidean distance between two same-shape tensors, as a scalar.
pub fn squared_euclidean<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "squared_euclidean: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let diff = a.sub(b)?;
    Ok(diff.mul(&diff)?.sum())
}

/// All pairwise squared distances between rows of `q` `[m, d]` and rows of
/// `p` `[c, d]`, returned as `[m, c]`. Uses the expansion
/// `|q - p|^2 = |q|^2 + |p|^2 - 2 q.p` so it stays inside matrix primitives;
/// a floor at zero absorbs negative round-off.
pub fn pairwise_sq_dists<R: Real>(q: &Tensor<R>, p: &Tensor<R>) -> Result<Tensor<R>> {
    let (qs, ps) = (q.shape(), p.shape());
    if qs.len() != 2 || ps.len() != 2 || qs[1] != ps[1] {
        return Err(Error::contract(format!(
            "pairwise_sq_dists: incompatible shapes {qs:?} and {ps:?}"
        )));
    }
    let c = ps[0];
    let q_sq = q.mul(q)?.sum_axis(1, true)?; // [m, 1]
    let p_sq = p.mul(p)?.sum_axis(1, false)?.reshape(&[1, c])?; // [1, c]
    let cross = q.matmul(&p.t()?)?.scale(R::from_f64_lossy(2.0)); // [m, c]
    let d2 = q_sq.add(&p_sq)?.sub(&cross)?;
    Ok(d2.clamp_min(R::zero()))
}

/// L2-normalize each row of a `[n, d]` tensor. The norm is floored at `eps`
/// (applied under the square root so the zero-vector case stays
/// differentiable), which leaves vectors with norm above `eps` exactly
/// unit-length.
pub fn l2_normalize_rows<R: Real>(x: &Tensor<R>, eps: R) -> Result<Tensor<R>> {
    if x.shape().len() != 2 {
        return Err(Error::contract(format!(
            "l2_normalize_rows: expected 2-D tensor, got shape {:?}",
            x.shape()
        )));
    }
    let sumsq = x.mul(x)?.sum_axis(1, true)?;
    let norm = sumsq.clamp_min(eps * eps).sqrt();
    x.div(&norm)
}

/// L2-normalize a 1-D vector (see [`l2_normalize_rows`]).
pub fn l2_normalize<R: Real>(v: &Tensor<R>, eps: R) -> Result<Tensor<R>> {
    if v.shape().len() != 1 {
        return Err(Error::contract(format!(
            "l2_normalize: expected 1-D tensor, got shape {:?}",
            v.shape()
        )));
    }
    let d = v.shape()[0];
    l2_normalize_rows(&v.reshape(&[1, d])?, eps)?.reshape(&[d])
}

/// Layer normalization over the last axis of `[n, d]` input with learnable
/// per-feature gain and shift. Uses the biased variance and stabilizes with
/// `eps` inside the square root.
pub fn layer_norm<R: Real>(
    x: &Tensor<R>,
    gamma: &Tensor<R>,
    beta: &Tensor<R>,
    eps: R,
) -> Result<Tensor<R>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::contract(format!(
            "layer_norm: expected [n, d] input, got shape {s:?}"
        )));
    }
    let d = s[1];
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::contract(format!(
            "layer_norm: gain/shift must have shape [{d}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let mu = x.mean_axis(1, true)?;
    let centered = x.sub(&mu)?;
    let var = centered.mul(&centered)?.mean_axis(1, true)?;
    let normed = centered.div(&var.add_scalar(eps).sqrt())?;
    normed.mul(gamma)?.add(beta)
}
