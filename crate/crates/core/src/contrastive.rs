//! Positive/negative pair construction and the NT-Xent objective.

use crate::augment::{self, AugmentationSpec};
use crate::autodiff::{dense_dot, nt_xent_value, Bound, Tape, Tensor, Var, NORM_FLOOR};
use crate::data::Signal;
use crate::error::{Error, Result};
use crate::models::{BnUpdates, Mode, ModelState};
use crate::{par, rng};

pub const DEFAULT_TAU: f64 = 0.1;

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", format!("lengths {} and {}", u.len(), v.len())));
    }
    let nu = dense_dot(u, u).sqrt();
    if !(nu > NORM_FLOOR) {
        return Err(Error::ZeroNorm("first operand".into()));
    }
    let nv = dense_dot(v, v).sqrt();
    if !(nv > NORM_FLOOR) {
        return Err(Error::ZeroNorm("second operand".into()));
    }
    Ok((dense_dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Embeddings of `N` originals and their augmented views, both `N x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub originals: Tensor,
    pub augmented: Tensor,
    pub tau: f64,
}

impl ContrastiveBatch {
    pub fn new(originals: Tensor, augmented: Tensor, tau: f64) -> Result<Self> {
        let (n, _) = originals.dims2("contrastive batch")?;
        if augmented.shape() != originals.shape() {
            return Err(Error::shape(
                "contrastive batch",
                format!("{:?} vs {:?}", originals.shape(), augmented.shape()),
            ));
        }
        if n == 0 {
            return Err(Error::Empty("contrastive batch"));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
        }
        Ok(ContrastiveBatch { originals, augmented, tau })
    }

    pub fn size(&self) -> usize {
        self.originals.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.originals.shape()[1]
    }

    /// Similarity of each original with its own view.
    pub fn positive_similarities(&self) -> Result<Vec<f64>> {
        let w = self.width();
        (0..self.size())
            .map(|i| {
                cosine_similarity(
                    &self.originals.data()[i * w..(i + 1) * w],
                    &self.augmented.data()[i * w..(i + 1) * w],
                )
            })
            .collect()
    }
}

/// Mean per-anchor loss over all `2N` anchors.
pub fn nt_xent(batch: &ContrastiveBatch) -> Result<f64> {
    let mut pool = Vec::with_capacity(2 * batch.originals.len());
    pool.extend_from_slice(batch.originals.data());
    pool.extend_from_slice(batch.augmented.data());
    nt_xent_value(&pool, batch.size(), batch.width(), batch.tau)
}

/// Stacks equally shaped signals into an `N x D x L` tensor.
pub fn stack(signals: &[&Signal]) -> Result<Tensor> {
    let first = signals.first().ok_or(Error::Empty("signal batch"))?;
    let (d, l) = (first.leads(), first.len());
    let mut data = Vec::with_capacity(signals.len() * d * l);
    for s in signals {
        if (s.leads(), s.len()) != (d, l) {
            return Err(Error::shape("stack", format!("{}x{} vs {d}x{l}", s.leads(), s.len())));
        }
        data.extend_from_slice(s.data());
    }
    Tensor::new(vec![signals.len(), d, l], data)
}

/// Augments every signal with its own stream derived from `(seed, path, index)`.
pub fn augment_batch(signals: &[&Signal], spec: &AugmentationSpec, seed: u64, path: &[u64]) -> Result<Vec<Signal>> {
    spec.validate()?;
    par::map_range(signals.len(), |i| {
        let mut p = path.to_vec();
        p.push(i as u64);
        augment::apply(spec, signals[i], &mut rng::stream(seed, &p))
    })
    .into_iter()
    .collect()
}

/// Graph for one contrastive step: both branches go through `E` then `G`
/// in separate passes. Batch-norm statistics of the two passes are returned
/// in branch order.
pub struct PairGraph {
    pub loss: Var,
    pub z: Var,
    pub z_aug: Var,
    pub updates: [BnUpdates; 2],
}

#[allow(clippy::too_many_arguments)]
pub fn pair_graph(
    tape: &mut Tape,
    model: &ModelState,
    enc: &Bound,
    proj: &Bound,
    originals: Tensor,
    augmented: Tensor,
    mode: Mode,
    tau: f64,
) -> Result<PairGraph> {
    let x = tape.constant(originals);
    let xt = tape.constant(augmented);
    let (h, u0) = model.encoder.forward(tape, enc, x, mode)?;
    let (ht, u1) = model.encoder.forward(tape, enc, xt, mode)?;
    let z = model.projection.forward(tape, proj, h)?;
    let z_aug = model.projection.forward(tape, proj, ht)?;
    let loss = tape.nt_xent(z, z_aug, tau)?;
    Ok(PairGraph {
        loss,
        z,
        z_aug,
        updates: [u0, u1],
    })
}

/// Embeds a batch and a freshly augmented copy with the current weights
/// (eval-mode batch norm, no gradients).
pub fn assemble_pairs(
    batch: &[&Signal],
    spec: &AugmentationSpec,
    seed: u64,
    model: &ModelState,
    tau: f64,
) -> Result<ContrastiveBatch> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(format!("contrastive batch needs >= 2 samples, got {}", batch.len())));
    }
    let aug = augment_batch(batch, spec, seed, &[])?;
    let aug_refs: Vec<&Signal> = aug.iter().collect();
    let mut tape = Tape::new();
    let enc = model.encoder.store().bind(&mut tape, false);
    let proj = model.projection.store().bind(&mut tape, false);
    let g = pair_graph(&mut tape, model, &enc, &proj, stack(batch)?, stack(&aug_refs)?, Mode::Eval, tau)?;
    ContrastiveBatch::new(tape.value(g.z).clone(), tape.value(g.z_aug).clone(), tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{EncoderConfig, HeadConfig, Variant};
    use proptest::prelude::*;
    use rand::Rng;

    /// Direct loop over anchors, written from the per-anchor formula.
    fn brute_force(z: &[Vec<f64>], zt: &[Vec<f64>], tau: f64) -> f64 {
        let n = z.len();
        let pool: Vec<&Vec<f64>> = z.iter().chain(zt).collect();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let mut total = 0.0;
        for i in 0..2 * n {
            let pos = if i < n { i + n } else { i - n };
            let num = (cos(pool[i], pool[pos]) / tau).exp();
            let den: f64 = (0..2 * n).filter(|&k| k != i).map(|k| (cos(pool[i], pool[k]) / tau).exp()).sum();
            total += -(num / den).ln();
        }
        total / (2 * n) as f64
    }

    fn batch(z: &[Vec<f64>], zt: &[Vec<f64>], tau: f64) -> ContrastiveBatch {
        let w = z[0].len();
        let t = |v: &[Vec<f64>]| Tensor::new(vec![v.len(), w], v.concat()).unwrap();
        ContrastiveBatch::new(t(z), t(zt), tau).unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&[3.0, 4.0], &[-3.0, -4.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm(m)) if m.contains("first")));
        assert!(matches!(cosine_similarity(&[1.0, 0.0], &[0.0, 0.0]), Err(Error::ZeroNorm(m)) if m.contains("second")));
    }

    #[test]
    fn closed_forms() {
        let b = batch(&[vec![1.0, 2.0]], &[vec![-3.0, 0.5]], 0.1);
        assert_eq!(nt_xent(&b).unwrap(), 0.0);
        for n in [2usize, 4, 8] {
            for tau in [0.05, 0.1, 0.5] {
                let z = vec![vec![0.3, -1.2, 2.0]; n];
                let l = nt_xent(&batch(&z, &z, tau)).unwrap();
                assert!((l - ((2 * n - 1) as f64).ln()).abs() < 1e-9, "n={n} tau={tau} l={l}");
            }
        }
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let l = nt_xent(&batch(&[e1.clone(), e2.clone()], &[e1, e2], 1.0)).unwrap();
        let e = std::f64::consts::E;
        assert!((l - -(e / (e + 2.0)).ln()).abs() < 1e-12);
        assert!((l - 0.551445).abs() < 1e-6);
        assert!(ContrastiveBatch::new(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]), 0.0).is_err());
    }

    fn embeddings() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        (1usize..6, 2usize..6).prop_flat_map(|(n, w)| {
            let row = proptest::collection::vec(0.1f64..2.0, w).prop_map(|mut r| {
                r[0] += 0.5;
                r
            });
            let rows = proptest::collection::vec(row, n);
            (rows.clone(), rows)
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((z, zt) in embeddings(), tau in 0.05f64..2.0) {
            let l = nt_xent(&batch(&z, &zt, tau)).unwrap();
            prop_assert!((l - brute_force(&z, &zt, tau)).abs() < 1e-9);
        }

        #[test]
        fn permutation_and_scale_invariant((z, zt) in embeddings(), k in 0.01f64..100.0, tau in 0.05f64..1.0) {
            let base = nt_xent(&batch(&z, &zt, tau)).unwrap();
            let (mut zr, mut ztr) = (z.clone(), zt.clone());
            zr.reverse();
            ztr.reverse();
            prop_assert!((nt_xent(&batch(&zr, &ztr, tau)).unwrap() - base).abs() < 1e-12);
            let s = |v: &[Vec<f64>]| v.iter().map(|r| r.iter().map(|x| x * k).collect()).collect::<Vec<Vec<f64>>>();
            prop_assert!((nt_xent(&batch(&s(&z), &s(&zt), tau)).unwrap() - base).abs() < 1e-9);
        }

        #[test]
        fn non_negative_when_positive_dominates((z, _) in embeddings(), tau in 0.05f64..1.0) {
            prop_assert!(nt_xent(&batch(&z, &z, tau)).unwrap() >= 0.0);
        }
    }

    fn signals(n: usize, seed: u64) -> Vec<Signal> {
        let mut r = rng::stream(seed, &[]);
        (0..n)
            .map(|_| Signal::new(12, 250, (0..3000).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn identity_view_gives_unit_positives() {
        let m = ModelState::new(&EncoderConfig::toy(Variant::A), &HeadConfig::toy(), 0).unwrap();
        let s = signals(2, 1);
        let refs: Vec<&Signal> = s.iter().collect();
        let b = assemble_pairs(&refs, &AugmentationSpec::identity(), 5, &m, DEFAULT_TAU).unwrap();
        assert_eq!(b.size(), 2);
        for p in b.positive_similarities().unwrap() {
            assert!((p - 1.0).abs() < 1e-12);
        }
        let spec = AugmentationSpec::GaussianNoise { sigma: 0.1 };
        let a1 = assemble_pairs(&refs, &spec, 5, &m, DEFAULT_TAU).unwrap();
        let a2 = assemble_pairs(&refs, &spec, 5, &m, DEFAULT_TAU).unwrap();
        assert_eq!(a1, a2);
        assert!(assemble_pairs(&refs[..1], &spec, 5, &m, DEFAULT_TAU).is_err());
    }
}
