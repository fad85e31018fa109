//! Per-channel batch normalization over `N x C x L`.

use super::Tensor;

pub(crate) struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub xhat: Tensor,
}

pub(crate) fn train_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> (Tensor, BatchStats) {
    let (n, c, l) = x.dims3("batchnorm1d").expect("checked by caller");
    let xs = x.data();
    let m = (n * l) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += xs[(i * c + ch) * l..(i * c + ch + 1) * l].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for i in 0..n {
            v += xs[(i * c + ch) * l..(i * c + ch + 1) * l]
                .iter()
                .map(|x| (x - mu) * (x - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (out, xhat) = affine(x, gamma, beta, &mean, &inv_std);
    (
        out,
        BatchStats {
            mean,
            var,
            inv_std,
            xhat,
        },
    )
}

/// `gamma * (x - mean) * inv_std + beta`, returning the output and the normalized input.
pub(crate) fn affine(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f64], inv_std: &[f64]) -> (Tensor, Tensor) {
    let (n, c, l) = x.dims3("batchnorm1d").expect("checked by caller");
    let xs = x.data();
    let mut xhat = vec![0.0; xs.len()];
    let mut out = vec![0.0; xs.len()];
    for i in 0..n {
        for ch in 0..c {
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            let r = (i * c + ch) * l..(i * c + ch + 1) * l;
            for j in r {
                let h = (xs[j] - mean[ch]) * inv_std[ch];
                xhat[j] = h;
                out[j] = gm * h + bt;
            }
        }
    }
    let shape = x.shape().to_vec();
    (
        Tensor::new(shape.clone(), out).expect("bn shape"),
        Tensor::new(shape, xhat).expect("bn shape"),
    )
}

/// Returns (d gamma, d beta) accumulated over batch and time.
pub(crate) fn param_grads(grad: &Tensor, xhat: &Tensor) -> (Tensor, Tensor) {
    let (n, c, l) = grad.dims3("batchnorm1d").expect("checked by caller");
    let (gs, hs) = (grad.data(), xhat.data());
    let mut dg = vec![0.0; c];
    let mut db = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            for j in (i * c + ch) * l..(i * c + ch + 1) * l {
                dg[ch] += gs[j] * hs[j];
                db[ch] += gs[j];
            }
        }
    }
    (Tensor::from_vec(dg), Tensor::from_vec(db))
}

/// Input gradient through the batch statistics.
pub(crate) fn train_input_grad(grad: &Tensor, gamma: &Tensor, xhat: &Tensor, inv_std: &[f64]) -> Tensor {
    let (n, c, l) = grad.dims3("batchnorm1d").expect("checked by caller");
    let (gs, hs) = (grad.data(), xhat.data());
    let m = (n * l) as f64;
    let mut dx = vec![0.0; gs.len()];
    for (ch, (&gm, &is)) in gamma.data().iter().zip(inv_std).enumerate() {
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in 0..n {
            for j in (i * c + ch) * l..(i * c + ch + 1) * l {
                let d = gs[j] * gm;
                s1 += d;
                s2 += d * hs[j];
            }
        }
        for i in 0..n {
            for j in (i * c + ch) * l..(i * c + ch + 1) * l {
                let d = gs[j] * gm;
                dx[j] = is / m * (m * d - s1 - hs[j] * s2);
            }
        }
    }
    Tensor::new(grad.shape().to_vec(), dx).expect("bn shape")
}

pub(crate) fn eval_input_grad(grad: &Tensor, gamma: &Tensor, inv_std: &[f64]) -> Tensor {
    let (n, c, l) = grad.dims3("batchnorm1d").expect("checked by caller");
    let gs = grad.data();
    let mut dx = vec![0.0; gs.len()];
    for i in 0..n {
        for (ch, (&gm, &is)) in gamma.data().iter().zip(inv_std).enumerate() {
            let f = gm * is;
            for j in (i * c + ch) * l..(i * c + ch + 1) * l {
                dx[j] = gs[j] * f;
            }
        }
    }
    Tensor::new(grad.shape().to_vec(), dx).expect("bn shape")
}
