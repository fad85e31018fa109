//! Fused loss kernels: NT-Xent over a pool of paired embeddings and binary
//! cross-entropy on probabilities.

use super::dense::dot;
use crate::error::{Error, Result};

pub const NORM_FLOOR: f64 = 1e-12;
pub const PROB_CLAMP: f64 = 1e-12;

pub(crate) struct NtXentCache {
    pub rows: usize,
    pub width: usize,
    pub unit: Vec<f64>,
    pub norms: Vec<f64>,
    /// Row-wise softmax over the non-self similarities (diagonal is zero).
    pub probs: Vec<f64>,
    pub tau: f64,
}

/// Pool layout: rows `0..n` are the originals, rows `n..2n` their views, so
/// the positive of row `a` is `(a + n) % 2n`.
pub(crate) fn nt_xent_forward(pool: &[f64], n: usize, width: usize, tau: f64) -> Result<(f64, NtXentCache)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    let rows = 2 * n;
    let mut unit = vec![0.0; rows * width];
    let mut norms = vec![0.0; rows];
    for a in 0..rows {
        let r = &pool[a * width..(a + 1) * width];
        let nrm = dot(r, r).sqrt();
        if !(nrm > NORM_FLOOR) {
            let which = if a < n { "original" } else { "augmented" };
            return Err(Error::ZeroNorm(format!("{which} embedding {}", a % n)));
        }
        norms[a] = nrm;
        for (u, v) in unit[a * width..(a + 1) * width].iter_mut().zip(r) {
            *u = v / nrm;
        }
    }
    let mut probs = vec![0.0; rows * rows];
    let mut total = 0.0;
    for a in 0..rows {
        let ua = &unit[a * width..(a + 1) * width];
        let pos = (a + n) % rows;
        let logits: Vec<f64> = (0..rows)
            .map(|b| {
                if b == a {
                    f64::NEG_INFINITY
                } else {
                    dot(ua, &unit[b * width..(b + 1) * width]) / tau
                }
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + denom.ln();
        total += lse - logits[pos];
        for b in 0..rows {
            if b != a {
                probs[a * rows + b] = (logits[b] - lse).exp();
            }
        }
    }
    Ok((
        total / rows as f64,
        NtXentCache {
            rows,
            width,
            unit,
            norms,
            probs,
            tau,
        },
    ))
}

/// Gradient of the mean loss w.r.t. the raw pool rows, scaled by `upstream`.
pub(crate) fn nt_xent_backward(c: &NtXentCache, upstream: f64) -> Vec<f64> {
    let (rows, width) = (c.rows, c.width);
    let n = rows / 2;
    let scale = upstream / (c.tau * rows as f64);
    // coefficient of sim(a, b) in the loss, counting both anchors a and b
    let coef = |a: usize, b: usize| -> f64 {
        let mut g = c.probs[a * rows + b] + c.probs[b * rows + a];
        if b == (a + n) % rows {
            g -= 1.0;
        }
        if a == (b + n) % rows {
            g -= 1.0;
        }
        g * scale
    };
    let mut out = vec![0.0; rows * width];
    let mut du = vec![0.0; width];
    for a in 0..rows {
        du.fill(0.0);
        for b in 0..rows {
            if b == a {
                continue;
            }
            let g = coef(a, b);
            for (d, u) in du.iter_mut().zip(&c.unit[b * width..(b + 1) * width]) {
                *d += g * u;
            }
        }
        let ua = &c.unit[a * width..(a + 1) * width];
        let proj = dot(ua, &du);
        for ((o, d), u) in out[a * width..(a + 1) * width].iter_mut().zip(&du).zip(ua) {
            *o = (d - u * proj) / c.norms[a];
        }
    }
    out
}

/// Mean over rows of the per-row summed binary cross-entropy.
pub(crate) fn bce_forward(pred: &[f64], labels: &[f64], rows: usize) -> f64 {
    let mut total = 0.0;
    for (&p, &l) in pred.iter().zip(labels) {
        let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= l * c.ln() + (1.0 - l) * (1.0 - c).ln();
    }
    total / rows as f64
}

pub(crate) fn bce_backward(pred: &[f64], labels: &[f64], rows: usize, upstream: f64) -> Vec<f64> {
    let s = upstream / rows as f64;
    pred.iter()
        .zip(labels)
        .map(|(&p, &l)| {
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                0.0
            } else {
                -s * (l / p - (1.0 - l) / (1.0 - p))
            }
        })
        .collect()
}
