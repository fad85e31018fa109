//! Fully connected layer: `y = x W^T + b` with `x: N x in`, `W: out x in`.

use super::Tensor;
use crate::par;

pub(crate) fn forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, fin) = x.dims2("linear").expect("checked by caller");
    let (fout, _) = w.dims2("linear").expect("checked by caller");
    let (xs, ws, bs) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; n * fout];
    par::for_each_chunk_mut(&mut out, fout, |i, row| {
        let xr = &xs[i * fin..(i + 1) * fin];
        for (o, y) in row.iter_mut().enumerate() {
            let wr = &ws[o * fin..(o + 1) * fin];
            *y = bs[o] + dot(xr, wr);
        }
    });
    Tensor::new(vec![n, fout], out).expect("linear shape")
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn input_grad(grad: &Tensor, w: &Tensor) -> Tensor {
    let (n, fout) = grad.dims2("linear").expect("checked by caller");
    let (_, fin) = w.dims2("linear").expect("checked by caller");
    let (gs, ws) = (grad.data(), w.data());
    let mut dx = vec![0.0; n * fin];
    par::for_each_chunk_mut(&mut dx, fin, |i, row| {
        for o in 0..fout {
            let g = gs[i * fout + o];
            if g != 0.0 {
                for (d, wv) in row.iter_mut().zip(&ws[o * fin..(o + 1) * fin]) {
                    *d += g * wv;
                }
            }
        }
    });
    Tensor::new(vec![n, fin], dx).expect("linear shape")
}

pub(crate) fn weight_grad(grad: &Tensor, x: &Tensor) -> Tensor {
    let (n, fout) = grad.dims2("linear").expect("checked by caller");
    let (_, fin) = x.dims2("linear").expect("checked by caller");
    let (gs, xs) = (grad.data(), x.data());
    let mut dw = vec![0.0; fout * fin];
    par::for_each_chunk_mut(&mut dw, fin, |o, row| {
        for i in 0..n {
            let g = gs[i * fout + o];
            if g != 0.0 {
                for (d, xv) in row.iter_mut().zip(&xs[i * fin..(i + 1) * fin]) {
                    *d += g * xv;
                }
            }
        }
    });
    Tensor::new(vec![fout, fin], dw).expect("linear shape")
}

pub(crate) fn bias_grad(grad: &Tensor) -> Tensor {
    let (n, fout) = grad.dims2("linear").expect("checked by caller");
    let gs = grad.data();
    let mut db = vec![0.0; fout];
    for i in 0..n {
        for (d, g) in db.iter_mut().zip(&gs[i * fout..(i + 1) * fout]) {
            *d += g;
        }
    }
    Tensor::from_vec(db)
}
