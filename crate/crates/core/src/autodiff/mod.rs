//! Reverse-mode differentiation on a flat tape.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and [`Tape::backward`] simply walks it in reverse.
//! Operations are coarse (a whole convolution or batch-norm is one node) to
//! keep bookkeeping negligible next to the arithmetic.

mod conv;
mod dense;
mod loss;
mod norm;
mod params;
mod pool;
mod tensor;

pub mod checkpoint;

pub use conv::conv1d_output_len;
pub(crate) use dense::dot as dense_dot;
pub use loss::{NORM_FLOOR, PROB_CLAMP};
pub use params::{Bound, Param, ParamId, ParamKind, ParamStore};
pub use pool::pool_output_len;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Mean NT-Xent loss of a `[z; zt]` pool without building a graph.
pub fn nt_xent_value(pool: &[f64], n: usize, width: usize, tau: f64) -> Result<f64> {
    if pool.len() != 2 * n * width {
        return Err(Error::shape("nt_xent", "pool length"));
    }
    loss::nt_xent_forward(pool, n, width, tau).map(|(l, _)| l)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: conv::ConvGeom,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Elu(Var),
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    NtXent {
        z: Var,
        zt: Var,
        cache: loss::NtXentCache,
    },
    Bce {
        pred: Var,
        labels: Vec<f64>,
        rows: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for the caller
/// to fold into its running estimates.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; only nodes on a path to a tracked leaf have one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A tracked input (parameter or input whose gradient is wanted).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn input(&mut self, value: Tensor, track: bool) -> Var {
        self.push(value, Op::Leaf, track)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = conv::ConvGeom::new(self.value(x), self.value(w), stride, padding)?;
        if let Some(b) = b {
            if self.value(b).len() != geom.cout {
                return Err(Error::shape("conv1d", "bias length differs from output channels"));
            }
        }
        let out = conv::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Conv1d { x, w, b, geom }, rg))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let (_, c, _) = self.value(x).dims3("batchnorm1d")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batchnorm1d", format!("{c} channels vs affine params")));
        }
        Ok(c)
    }

    /// Training-mode batch norm: normalizes with the batch's own statistics
    /// and differentiates through them.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchMoments)> {
        self.check_bn(x, gamma, beta)?;
        let (n, _, l) = self.value(x).dims3("batchnorm1d")?;
        if n * l < 2 {
            return Err(Error::shape("batchnorm1d", "training mode needs at least 2 values per channel"));
        }
        let (out, stats) = norm::train_forward(self.value(x), self.value(gamma), self.value(beta), BN_EPS);
        let m = (n * l) as f64;
        let moments = BatchMoments {
            mean: stats.mean,
            var: stats.var.iter().map(|v| v * m / (m - 1.0)).collect(),
        };
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat: stats.xhat,
            inv_std: stats.inv_std,
        };
        Ok((self.push(out, op, rg), moments))
    }

    /// Eval-mode batch norm with fixed statistics; an affine map of `x`.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let c = self.check_bn(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batchnorm1d", "running statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v.max(0.0) + BN_EPS).sqrt()).collect();
        let (out, xhat) = norm::affine(self.value(x), self.value(gamma), self.value(beta), mean, &inv_std);
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(out, op, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(out, op, rg)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.map(x, |a| if a > 0.0 { a } else { a.exp_m1() }, Op::Elu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |a| if a > 0.0 { a } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn maxpool1d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (_, _, l) = self.value(x).dims3("maxpool1d")?;
        let lout = pool_output_len(l, k, stride)
            .ok_or_else(|| Error::shape("maxpool1d", format!("length {l} shorter than window {k}")))?;
        let (out, argmax) = pool::max_forward(self.value(x), k, stride, lout);
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (_, fin) = self.value(x).dims2("linear")?;
        let (fout, win) = self.value(w).dims2("linear")?;
        if win != fin || self.value(b).len() != fout {
            return Err(Error::shape(
                "linear",
                format!("input width {fin}, weight {fout}x{win}, bias {}", self.value(b).len()),
            ));
        }
        let out = dense::forward(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `N x C x L -> N x (C*L)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let (n, c, l) = self.value(x).dims3("flatten")?;
        self.reshape(x, &[n, c * l])
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |a| a * s, Op::Scale(x, s))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean NT-Xent loss over all `2N` anchors of the pool `[z; zt]`.
    pub fn nt_xent(&mut self, z: Var, zt: Var, tau: f64) -> Result<Var> {
        let (n, d) = self.value(z).dims2("nt_xent")?;
        if self.value(zt).shape() != [n, d] {
            return Err(Error::shape("nt_xent", "original and augmented embeddings differ in shape"));
        }
        if n == 0 {
            return Err(Error::Empty("contrastive batch"));
        }
        let mut pool = Vec::with_capacity(2 * n * d);
        pool.extend_from_slice(self.value(z).data());
        pool.extend_from_slice(self.value(zt).data());
        let (l, cache) = loss::nt_xent_forward(&pool, n, d, tau)?;
        let rg = self.rg(&[z, zt]);
        Ok(self.push(Tensor::scalar(l), Op::NtXent { z, zt, cache }, rg))
    }

    /// Binary cross-entropy of probabilities `pred` (N x C) against 0/1 labels.
    pub fn bce(&mut self, pred: Var, labels: &Tensor) -> Result<Var> {
        let (rows, _) = self.value(pred).dims2("bce")?;
        if labels.shape() != self.value(pred).shape() {
            return Err(Error::shape("bce", "labels and predictions differ in shape"));
        }
        if let Some(bad) = labels.data().iter().find(|&&l| l != 0.0 && l != 1.0) {
            return Err(Error::InvalidArgument(format!("label {bad} is not 0 or 1")));
        }
        let l = loss::bce_forward(self.value(pred).data(), labels.data(), rows);
        let rg = self.requires_grad(pred);
        let op = Op::Bce {
            pred,
            labels: labels.data().to_vec(),
            rows,
        };
        Ok(self.push(Tensor::scalar(l), op, rg))
    }

    /// Back-propagates from the scalar `loss`. Gradients of every tracked
    /// leaf are complete on return.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data).expect("grad shape");
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, geom } => {
                let need = (
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    b.is_some_and(|b| self.requires_grad(b)),
                );
                let r = conv::backward(self.value(*x), self.value(*w), g, *geom, need);
                if let Some(t) = r.x {
                    acc(*x, t);
                }
                if let Some(t) = r.w {
                    acc(*w, t);
                }
                if let (Some(b), Some(t)) = (b, r.b) {
                    acc(*b, t);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.rg(&[*gamma, *beta]) {
                    let (dg, db) = norm::param_grads(g, xhat);
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                if self.requires_grad(*x) {
                    acc(*x, norm::train_input_grad(g, self.value(*gamma), xhat, inv_std));
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.rg(&[*gamma, *beta]) {
                    let (dg, db) = norm::param_grads(g, xhat);
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                if self.requires_grad(*x) {
                    acc(*x, norm::eval_input_grad(g, self.value(*gamma), inv_std));
                }
            }
            Op::Elu(x) => {
                let d = self.value(*x).data().iter().zip(g.data());
                acc(*x, like(*x, d.map(|(&a, &gv)| if a > 0.0 { gv } else { gv * a.exp() }).collect()));
            }
            Op::Relu(x) => {
                let d = self.value(*x).data().iter().zip(g.data());
                acc(*x, like(*x, d.map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 }).collect()));
            }
            Op::Sigmoid(x) => {
                let d = node.value.data().iter().zip(g.data());
                acc(*x, like(*x, d.map(|(&s, &gv)| gv * s * (1.0 - s)).collect()));
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, pool::max_backward(g, argmax, self.value(*x).shape()));
            }
            Op::Linear { x, w, b } => {
                if self.requires_grad(*x) {
                    acc(*x, dense::input_grad(g, self.value(*w)));
                }
                if self.requires_grad(*w) {
                    acc(*w, dense::weight_grad(g, self.value(*x)));
                }
                if self.requires_grad(*b) {
                    acc(*b, dense::bias_grad(g));
                }
            }
            Op::Reshape(x) => acc(*x, like(*x, g.data().to_vec())),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, like(*a, g.data().iter().zip(vb).map(|(x, y)| x * y).collect()));
                acc(*b, like(*b, g.data().iter().zip(va).map(|(x, y)| x * y).collect()));
            }
            Op::Scale(x, s) => acc(*x, like(*x, g.data().iter().map(|v| v * s).collect())),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(*x, like(*x, vec![g.item(); n]));
            }
            Op::NtXent { z, zt, cache } => {
                let d = loss::nt_xent_backward(cache, g.item());
                let half = d.len() / 2;
                acc(*z, like(*z, d[..half].to_vec()));
                acc(*zt, like(*zt, d[half..].to_vec()));
            }
            Op::Bce { pred, labels, rows } => {
                let d = loss::bce_backward(self.value(*pred).data(), labels, *rows, g.item());
                acc(*pred, like(*pred, d));
            }
        }
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}
