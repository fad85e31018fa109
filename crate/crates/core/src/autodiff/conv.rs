//! 1-D cross-correlation over `N x C x L` batches.

use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub len: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub lout: usize,
}

pub fn conv1d_output_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || len + 2 * pad < k {
        return None;
    }
    Some((len + 2 * pad - k) / stride + 1)
}

impl ConvGeom {
    pub fn new(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (n, cin, len) = x.dims3("conv1d")?;
        let (cout, wcin, k) = w.dims3("conv1d")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv1d",
                format!("input has {cin} channels, kernel expects {wcin}"),
            ));
        }
        let lout = conv1d_output_len(len, k, stride, pad).ok_or_else(|| {
            Error::shape(
                "conv1d",
                format!("length {len} with padding {pad} is shorter than kernel {k} (stride {stride})"),
            )
        })?;
        Ok(ConvGeom {
            n,
            cin,
            len,
            cout,
            k,
            stride,
            pad,
            lout,
        })
    }

    /// Output positions `t` whose tap `kk` lands inside the input.
    #[inline]
    fn valid(&self, kk: usize) -> std::ops::Range<usize> {
        let lo = if self.pad > kk {
            (self.pad - kk).div_ceil(self.stride)
        } else {
            0
        };
        let top = self.len + self.pad;
        if top < kk + 1 {
            return 0..0;
        }
        let hi = ((top - 1 - kk) / self.stride + 1).min(self.lout);
        lo..hi.max(lo)
    }
}

pub(crate) fn forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let mut out = vec![0.0; g.n * g.cout * g.lout];
    let xs = x.data();
    let ws = w.data();
    par::for_each_chunk_mut(&mut out, g.cout * g.lout, |n, sample| {
        let xn = &xs[n * g.cin * g.len..(n + 1) * g.cin * g.len];
        for co in 0..g.cout {
            let row = &mut sample[co * g.lout..(co + 1) * g.lout];
            if let Some(b) = b {
                row.fill(b.data()[co]);
            }
            for ci in 0..g.cin {
                let xr = &xn[ci * g.len..(ci + 1) * g.len];
                for kk in 0..g.k {
                    let wv = ws[(co * g.cin + ci) * g.k + kk];
                    let r = g.valid(kk);
                    if g.stride == 1 {
                        let off = r.start + kk - g.pad;
                        for (o, xv) in row[r.clone()].iter_mut().zip(&xr[off..off + r.len()]) {
                            *o += wv * xv;
                        }
                    } else {
                        for t in r {
                            row[t] += wv * xr[t * g.stride + kk - g.pad];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![g.n, g.cout, g.lout], out).expect("conv output shape")
}

pub(crate) struct ConvGrads {
    pub x: Option<Tensor>,
    pub w: Option<Tensor>,
    pub b: Option<Tensor>,
}

pub(crate) fn backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    g: ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let xs = x.data();
    let ws = w.data();
    let gs = grad.data();

    let dx = need.0.then(|| {
        let mut dx = vec![0.0; g.n * g.cin * g.len];
        par::for_each_chunk_mut(&mut dx, g.cin * g.len, |n, dxn| {
            let gn = &gs[n * g.cout * g.lout..(n + 1) * g.cout * g.lout];
            for co in 0..g.cout {
                let grow = &gn[co * g.lout..(co + 1) * g.lout];
                for ci in 0..g.cin {
                    let dxr = &mut dxn[ci * g.len..(ci + 1) * g.len];
                    for kk in 0..g.k {
                        let wv = ws[(co * g.cin + ci) * g.k + kk];
                        for t in g.valid(kk) {
                            dxr[t * g.stride + kk - g.pad] += wv * grow[t];
                        }
                    }
                }
            }
        });
        Tensor::new(vec![g.n, g.cin, g.len], dx).expect("conv dx shape")
    });

    let dw = need.1.then(|| {
        // per-sample partials, summed in sample order
        let partials = par::map_range(g.n, |n| {
            let mut dw = vec![0.0; g.cout * g.cin * g.k];
            let xn = &xs[n * g.cin * g.len..(n + 1) * g.cin * g.len];
            let gn = &gs[n * g.cout * g.lout..(n + 1) * g.cout * g.lout];
            for co in 0..g.cout {
                let grow = &gn[co * g.lout..(co + 1) * g.lout];
                for ci in 0..g.cin {
                    let xr = &xn[ci * g.len..(ci + 1) * g.len];
                    for kk in 0..g.k {
                        let mut acc = 0.0;
                        for t in g.valid(kk) {
                            acc += grow[t] * xr[t * g.stride + kk - g.pad];
                        }
                        dw[(co * g.cin + ci) * g.k + kk] = acc;
                    }
                }
            }
            dw
        });
        let mut dw = vec![0.0; g.cout * g.cin * g.k];
        for p in &partials {
            for (a, b) in dw.iter_mut().zip(p) {
                *a += b;
            }
        }
        Tensor::new(vec![g.cout, g.cin, g.k], dw).expect("conv dw shape")
    });

    let db = need.2.then(|| {
        let mut db = vec![0.0; g.cout];
        for n in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                let off = (n * g.cout + co) * g.lout;
                *d += gs[off..off + g.lout].iter().sum::<f64>();
            }
        }
        Tensor::from_vec(db)
    });

    ConvGrads { x: dx, w: dw, b: db }
}
