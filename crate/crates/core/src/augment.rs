//! The seven augmentation kernels and their intensity grids.
//!
//! Every kernel maps a `D x L` signal to a `D x L` signal. Randomness that
//! decides *where* something happens (segment order, mask window, which
//! segments are stretched) is drawn once per call and shared by all leads;
//! additive noise is drawn independently per lead and sample.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Signal;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    GaussianNoise,
    Scale,
    Permutation,
    VerticalFlip,
    HorizontalFlip,
    ZeroMask,
    TimeWarp,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 7] = [
        AugmentationKind::GaussianNoise,
        AugmentationKind::Scale,
        AugmentationKind::Permutation,
        AugmentationKind::VerticalFlip,
        AugmentationKind::HorizontalFlip,
        AugmentationKind::ZeroMask,
        AugmentationKind::TimeWarp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentationKind::GaussianNoise => "gaussian_noise",
            AugmentationKind::Scale => "scale",
            AugmentationKind::Permutation => "permutation",
            AugmentationKind::VerticalFlip => "vertical_flip",
            AugmentationKind::HorizontalFlip => "horizontal_flip",
            AugmentationKind::ZeroMask => "zero_mask",
            AugmentationKind::TimeWarp => "time_warp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AugmentationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Augmentation(format!("unknown augmentation {s:?}")))
    }

    pub fn label(self) -> &'static str {
        match self {
            AugmentationKind::GaussianNoise => "Gaussian Noise",
            AugmentationKind::Scale => "Scale",
            AugmentationKind::Permutation => "Permutation",
            AugmentationKind::VerticalFlip => "Vertical Flip",
            AugmentationKind::HorizontalFlip => "Horizontal Flip",
            AugmentationKind::ZeroMask => "Zero Masking",
            AugmentationKind::TimeWarp => "Time Warping",
        }
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One augmentation with its intensity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentationSpec {
    GaussianNoise { sigma: f64 },
    Scale { factor: f64 },
    Permutation { segments: usize },
    VerticalFlip,
    HorizontalFlip,
    ZeroMask { ratio: f64 },
    TimeWarp { segments: usize, warp: f64 },
}

impl AugmentationSpec {
    pub fn kind(&self) -> AugmentationKind {
        match self {
            AugmentationSpec::GaussianNoise { .. } => AugmentationKind::GaussianNoise,
            AugmentationSpec::Scale { .. } => AugmentationKind::Scale,
            AugmentationSpec::Permutation { .. } => AugmentationKind::Permutation,
            AugmentationSpec::VerticalFlip => AugmentationKind::VerticalFlip,
            AugmentationSpec::HorizontalFlip => AugmentationKind::HorizontalFlip,
            AugmentationSpec::ZeroMask { .. } => AugmentationKind::ZeroMask,
            AugmentationSpec::TimeWarp { .. } => AugmentationKind::TimeWarp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Augmentation(m));
        match *self {
            AugmentationSpec::GaussianNoise { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                fail(format!("noise sigma must be finite and > 0, got {sigma}"))
            }
            AugmentationSpec::Scale { factor } if !(factor > 0.0 && factor.is_finite()) => {
                fail(format!("scale factor must be > 0, got {factor}"))
            }
            AugmentationSpec::Permutation { segments } if segments < 2 => {
                fail(format!("permutation needs at least 2 segments, got {segments}"))
            }
            AugmentationSpec::ZeroMask { ratio } if !(ratio > 0.0 && ratio < 1.0) => {
                fail(format!("mask ratio must be in (0, 1), got {ratio}"))
            }
            AugmentationSpec::TimeWarp { segments, warp } => {
                if segments < 2 || segments % 2 != 0 {
                    fail(format!("time warp needs an even segment count >= 2, got {segments}"))
                } else if !(warp > 0.0 && warp < 1.0) {
                    fail(format!("warp factor must be in (0, 1), got {warp}"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Intensity as written in result tables; flips have none.
    pub fn param_label(&self) -> String {
        match *self {
            AugmentationSpec::GaussianNoise { sigma } => format!("{sigma}"),
            AugmentationSpec::Scale { factor } => format!("{factor}"),
            AugmentationSpec::Permutation { segments } => format!("{segments}"),
            AugmentationSpec::VerticalFlip | AugmentationSpec::HorizontalFlip => "none".into(),
            AugmentationSpec::ZeroMask { ratio } => format!("{ratio}"),
            AugmentationSpec::TimeWarp { segments, warp } => format!("{segments}-{warp}"),
        }
    }

    pub fn identity() -> Self {
        AugmentationSpec::Scale { factor: 1.0 }
    }
}

impl fmt::Display for AugmentationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.kind(), self.param_label())
    }
}

pub fn gaussian_noise<R: Rng + ?Sized>(x: &Signal, sigma: f64, rng: &mut R) -> Result<Signal> {
    AugmentationSpec::GaussianNoise { sigma }.validate()?;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Augmentation(e.to_string()))?;
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += normal.sample(rng);
    }
    Ok(out)
}

pub fn scale(x: &Signal, factor: f64) -> Result<Signal> {
    AugmentationSpec::Scale { factor }.validate()?;
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v *= factor);
    Ok(out)
}

/// Contiguous `[start, end)` ranges: `m` pieces of `len / m`, the last one
/// absorbing the remainder.
pub fn segment_bounds(len: usize, m: usize) -> Vec<(usize, usize)> {
    let base = len / m;
    (0..m)
        .map(|i| (i * base, if i + 1 == m { len } else { (i + 1) * base }))
        .collect()
}

/// Concatenates segments in the given order (`order[i]` is the source
/// segment placed i-th), identically on every lead.
pub fn permute_segments(x: &Signal, m: usize, order: &[usize]) -> Result<Signal> {
    AugmentationSpec::Permutation { segments: m }.validate()?;
    if m > x.len() {
        return Err(Error::Augmentation(format!("{m} segments exceed signal length {}", x.len())));
    }
    let mut seen = vec![false; m];
    if order.len() != m || order.iter().any(|&i| i >= m || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::Augmentation(format!("{order:?} is not a permutation of 0..{m}")));
    }
    let bounds = segment_bounds(x.len(), m);
    let mut out = Signal::zeros(x.leads(), x.len());
    for d in 0..x.leads() {
        let src = x.lead(d);
        let dst = out.lead_mut(d);
        let mut pos = 0;
        for &s in order {
            let (a, b) = bounds[s];
            dst[pos..pos + (b - a)].copy_from_slice(&src[a..b]);
            pos += b - a;
        }
    }
    Ok(out)
}

pub fn permutation<R: Rng + ?Sized>(x: &Signal, m: usize, rng: &mut R) -> Result<Signal> {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    permute_segments(x, m, &order)
}

pub fn vertical_flip(x: &Signal) -> Signal {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = -*v);
    out
}

pub fn horizontal_flip(x: &Signal) -> Signal {
    let mut out = x.clone();
    for d in 0..out.leads() {
        out.lead_mut(d).reverse();
    }
    out
}

pub fn mask_len(len: usize, ratio: f64) -> usize {
    (ratio * len as f64).floor() as usize
}

/// Zeros `floor(ratio * L)` samples starting at `offset` on every lead.
pub fn zero_mask_at(x: &Signal, ratio: f64, offset: usize) -> Result<Signal> {
    AugmentationSpec::ZeroMask { ratio }.validate()?;
    let k = mask_len(x.len(), ratio);
    if offset + k > x.len() {
        return Err(Error::Augmentation(format!(
            "mask of {k} samples at offset {offset} overruns length {}",
            x.len()
        )));
    }
    let mut out = x.clone();
    for d in 0..out.leads() {
        out.lead_mut(d)[offset..offset + k].fill(0.0);
    }
    Ok(out)
}

pub fn zero_mask<R: Rng + ?Sized>(x: &Signal, ratio: f64, rng: &mut R) -> Result<Signal> {
    AugmentationSpec::ZeroMask { ratio }.validate()?;
    let k = mask_len(x.len(), ratio);
    let offset = rng.random_range(0..=x.len() - k);
    zero_mask_at(x, ratio, offset)
}

/// Endpoint-anchored linear resampling of `src` onto `n` points.
fn resample(src: &[f64], n: usize, dst: &mut Vec<f64>) {
    if src.len() == 1 || n == 1 {
        dst.extend(std::iter::repeat_n(src[0], n));
        return;
    }
    let step = (src.len() - 1) as f64 / (n - 1) as f64;
    for j in 0..n {
        let pos = j as f64 * step;
        let i = (pos.floor() as usize).min(src.len() - 2);
        let frac = pos - i as f64;
        dst.push(src[i] + (src[i + 1] - src[i]) * frac);
    }
}

/// Target lengths `(L/m)(1 +- w)`, floored and then topped up by one sample
/// at a time in order of largest fractional remainder so they sum to `len`.
pub fn warp_lengths(len: usize, m: usize, warp: f64, stretched: &[bool]) -> Vec<usize> {
    let base = len as f64 / m as f64;
    let ideal: Vec<f64> = stretched
        .iter()
        .map(|&s| base * if s { 1.0 + warp } else { 1.0 - warp })
        .collect();
    let mut lens: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let short = len.saturating_sub(lens.iter().sum());
    let mut by_rem: Vec<usize> = (0..m).collect();
    by_rem.sort_by(|&a, &b| {
        let (ra, rb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in by_rem.iter().cycle().take(short) {
        lens[i] += 1;
    }
    lens
}

/// Time warp with an explicit choice of stretched segments.
pub fn time_warp_with(x: &Signal, m: usize, warp: f64, stretched: &[bool]) -> Result<Signal> {
    AugmentationSpec::TimeWarp { segments: m, warp }.validate()?;
    if stretched.len() != m || stretched.iter().filter(|&&s| s).count() != m / 2 {
        return Err(Error::Augmentation(format!("exactly {} of {m} segments must be stretched", m / 2)));
    }
    let bounds = segment_bounds(x.len(), m);
    if bounds.iter().any(|(a, b)| b - a < 2) {
        return Err(Error::Augmentation(format!("{m} segments leave fewer than 2 samples per segment")));
    }
    let lens = warp_lengths(x.len(), m, warp, stretched);
    if let Some(&short) = lens.iter().min().filter(|&&l| l < 2) {
        return Err(Error::Augmentation(format!(
            "squeezed segment length {short} < 2 (L={}, m={m}, w={warp})",
            x.len()
        )));
    }
    let mut data = Vec::with_capacity(x.leads() * x.len());
    for lead in x.lead_iter() {
        for (&(a, b), &n) in bounds.iter().zip(&lens) {
            resample(&lead[a..b], n, &mut data);
        }
    }
    Signal::new(x.leads(), x.len(), data)
}

pub fn time_warp<R: Rng + ?Sized>(x: &Signal, m: usize, warp: f64, rng: &mut R) -> Result<Signal> {
    AugmentationSpec::TimeWarp { segments: m, warp }.validate()?;
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(rng);
    let mut stretched = vec![false; m];
    for &i in &idx[..m / 2] {
        stretched[i] = true;
    }
    time_warp_with(x, m, warp, &stretched)
}

pub fn apply<R: Rng + ?Sized>(spec: &AugmentationSpec, x: &Signal, rng: &mut R) -> Result<Signal> {
    spec.validate()?;
    match *spec {
        AugmentationSpec::GaussianNoise { sigma } => gaussian_noise(x, sigma, rng),
        AugmentationSpec::Scale { factor } => scale(x, factor),
        AugmentationSpec::Permutation { segments } => permutation(x, segments, rng),
        AugmentationSpec::VerticalFlip => Ok(vertical_flip(x)),
        AugmentationSpec::HorizontalFlip => Ok(horizontal_flip(x)),
        AugmentationSpec::ZeroMask { ratio } => zero_mask(x, ratio, rng),
        AugmentationSpec::TimeWarp { segments, warp } => time_warp(x, segments, warp, rng),
    }
}

pub const NOISE_GRID: [f64; 11] = [0.01, 0.03, 0.05, 0.07, 0.1, 0.15, 0.2, 0.25, 0.4, 0.6, 0.9];
pub const SCALE_GRID: [f64; 9] = [0.1, 0.3, 0.5, 0.8, 1.2, 1.7, 2.0, 2.5, 3.0];
pub const PERMUTATION_GRID: [usize; 6] = [2, 4, 5, 8, 10, 20];
pub const MASK_GRID: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
pub const WARP_SEGMENTS: [usize; 2] = [2, 4];
pub const WARP_FACTORS: [f64; 3] = [0.25, 0.5, 0.75];

/// The intensity sweep for one augmentation, in ascending order. Flips have
/// a single parameterless entry.
pub fn grid(kind: AugmentationKind) -> Vec<AugmentationSpec> {
    match kind {
        AugmentationKind::GaussianNoise => NOISE_GRID.iter().map(|&sigma| AugmentationSpec::GaussianNoise { sigma }).collect(),
        AugmentationKind::Scale => SCALE_GRID.iter().map(|&factor| AugmentationSpec::Scale { factor }).collect(),
        AugmentationKind::Permutation => PERMUTATION_GRID
            .iter()
            .map(|&segments| AugmentationSpec::Permutation { segments })
            .collect(),
        AugmentationKind::VerticalFlip => vec![AugmentationSpec::VerticalFlip],
        AugmentationKind::HorizontalFlip => vec![AugmentationSpec::HorizontalFlip],
        AugmentationKind::ZeroMask => MASK_GRID.iter().map(|&ratio| AugmentationSpec::ZeroMask { ratio }).collect(),
        AugmentationKind::TimeWarp => WARP_SEGMENTS
            .iter()
            .flat_map(|&segments| WARP_FACTORS.iter().map(move |&warp| AugmentationSpec::TimeWarp { segments, warp }))
            .collect(),
    }
}
