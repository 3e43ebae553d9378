//! Softmax, entropy, KL divergence, cosine similarity.

use super::PROB_FLOOR;
use crate::error::{Error, Result};

/// Numerically stable softmax of a logit vector.
///
/// Shifts by the maximum before exponentiating; the output sums to 1 within
/// 1e-12 and is invariant to adding a constant to all logits.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

/// In-place softmax; avoids the allocation on hot paths.
pub fn softmax_in_place(values: &mut [f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Domain("softmax of empty vector".into()));
    }
    let mut max = f64::NEG_INFINITY;
    for &v in values.iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite("softmax input"));
        }
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Shannon entropy in nats, with the convention 0·ln 0 = 0.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    for &pi in p {
        if pi < 0.0 || !pi.is_finite() {
            return Err(Error::Domain(format!("entropy of invalid probability {pi}")));
        }
        sum += pi;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("probabilities sum to {sum}, not 1")));
    }
    let mut h = 0.0;
    for &pi in p {
        if pi > 0.0 {
            h -= pi * pi.max(PROB_FLOOR).ln();
        }
    }
    Ok(h)
}

/// KL(p‖q) in nats. `q` is clamped at [`PROB_FLOOR`] wherever `p` has mass.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} entries", p.len()),
            got: format!("{} entries", q.len()),
        });
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            kl += pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln());
        }
    }
    Ok(kl)
}

/// Cosine similarity; rejects zero-norm inputs.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} entries", a.len()),
            got: format!("{} entries", b.len()),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine of zero vector".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}
