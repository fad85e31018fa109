//! Quasi-periodic multi-lead signals built from Gaussian bumps (P, Q, R, S and
//! T surrogates) with class-dependent beat rate, T-wave polarity and QRS width.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, EcgRecord, LabelVector, Signal};
use crate::error::{Error, Result};
use crate::{par, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub classes: usize,
    pub leads: usize,
    pub len: usize,
    pub fs: f64,
    pub seed: u64,
    pub base_rate_bpm: f64,
    /// Beat-rate offset between consecutive classes.
    pub rate_margin_bpm: f64,
    /// Half-width of the uniform per-record rate perturbation.
    pub rate_jitter_bpm: f64,
    pub noise_std: f64,
    pub wander_amplitude: f64,
    /// T-wave factor on odd classes is `1 - 2 * t_inversion` (1 flips it).
    pub t_inversion: f64,
    /// QRS width factor is `1 + qrs_widening * class`.
    pub qrs_widening: f64,
    /// Records are emitted without labels when false (pretraining pools).
    pub labelled: bool,
    pub id_prefix: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 64,
            classes: 2,
            leads: super::DEFAULT_LEADS,
            len: super::DEFAULT_LEN,
            fs: super::DEFAULT_FS,
            seed: 0,
            base_rate_bpm: 60.0,
            rate_margin_bpm: 25.0,
            rate_jitter_bpm: 4.0,
            noise_std: 0.05,
            wander_amplitude: 0.15,
            t_inversion: 1.0,
            qrs_widening: 0.25,
            labelled: true,
            id_prefix: "syn".into(),
        }
    }
}

struct LeadGains {
    p: f64,
    qrs: f64,
    t: f64,
}

/// Fixed lead projections shared by every record.
fn lead_gains(leads: usize) -> Vec<LeadGains> {
    let mut r = rng::stream(0xec6, &[leads as u64]);
    let mut g = |lo: f64| {
        let v: f64 = r.random_range(lo..1.0);
        if r.random_bool(0.25) { -v } else { v }
    };
    (0..leads)
        .map(|_| LeadGains {
            p: g(0.2),
            qrs: g(0.4),
            t: g(0.3).abs(),
        })
        .collect()
}

#[inline]
fn bump(t: f64, centre: f64, width: f64) -> f64 {
    let z = (t - centre) / width;
    (-0.5 * z * z).exp()
}

/// Class `c` beats at `base + c * margin` bpm, has its QRS widened by
/// `c * qrs_widening` and, on odd classes, a scaled or inverted T wave.
pub fn class_rate_bpm(cfg: &SyntheticConfig, class: usize) -> f64 {
    cfg.base_rate_bpm + class as f64 * cfg.rate_margin_bpm
}

fn generate_one(cfg: &SyntheticConfig, gains: &[LeadGains], index: usize, class: usize) -> Result<EcgRecord> {
    let mut r = rng::stream(cfg.seed, &[index as u64]);
    let rate = class_rate_bpm(cfg, class) + r.random_range(-1.0..=1.0) * cfg.rate_jitter_bpm;
    let rr = 60.0 / rate;
    let t_sign = if class % 2 == 1 { 1.0 - 2.0 * cfg.t_inversion } else { 1.0 };
    let qrs_width = 1.0 + cfg.qrs_widening * class as f64;
    let gain: f64 = r.random_range(0.8..1.25);
    let phase: f64 = r.random_range(0.0..rr);
    let wander_f: f64 = r.random_range(0.1..0.5);
    let wander_phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let duration = cfg.len as f64 / cfg.fs;

    // beat centres with mild RR variability
    let mut centres = Vec::new();
    let mut c = phase - rr;
    while c < duration + rr {
        centres.push(c);
        c += rr * (1.0 + r.random_range(-0.02..0.02));
    }
    let per_lead: Vec<f64> = (0..cfg.leads).map(|_| r.random_range(0.9..1.1)).collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("noise_std: {e}")))?;

    let mut data = vec![0.0; cfg.leads * cfg.len];
    for (d, lg) in gains.iter().enumerate() {
        let lead = &mut data[d * cfg.len..(d + 1) * cfg.len];
        for (i, v) in lead.iter_mut().enumerate() {
            let t = i as f64 / cfg.fs;
            let mut s = 0.0;
            for &b in &centres {
                if (t - b).abs() > 0.6 {
                    continue;
                }
                s += lg.p * 0.15 * bump(t, b - 0.2, 0.025);
                s += lg.qrs
                    * (-0.1 * bump(t, b - 0.03 * qrs_width, 0.01 * qrs_width)
                        + 1.0 * bump(t, b, 0.012 * qrs_width)
                        - 0.2 * bump(t, b + 0.03 * qrs_width, 0.01 * qrs_width));
                s += lg.t * t_sign * 0.3 * bump(t, b + 0.3, 0.05);
            }
            let wander = cfg.wander_amplitude * (std::f64::consts::TAU * wander_f * t + wander_phase).sin();
            *v = gain * per_lead[d] * s + wander + noise.sample(&mut r);
        }
    }
    let labels = cfg.labelled.then(|| LabelVector::one_hot(class));
    EcgRecord::new(
        format!("{}{:05}", cfg.id_prefix, index),
        Signal::new(cfg.leads, cfg.len, data)?,
        cfg.fs,
        labels,
    )
}

/// Balanced classes (record `i` has class `i % classes`), deterministic in
/// the config.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<EcgRecord>> {
    if cfg.n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs n >= 1".into()));
    }
    if !(2..=super::NUM_CLASSES).contains(&cfg.classes) {
        return Err(Error::InvalidArgument(format!("classes must be in 2..=5, got {}", cfg.classes)));
    }
    if cfg.leads == 0 || cfg.len < 2 || !(cfg.fs > 0.0) {
        return Err(Error::InvalidArgument("synthetic shape needs leads >= 1, len >= 2, fs > 0".into()));
    }
    let gains = lead_gains(cfg.leads);
    par::map_range(cfg.n, |i| generate_one(cfg, &gains, i, i % cfg.classes))
        .into_iter()
        .collect()
}

/// Seeded shuffle dealt round-robin over folds 1..=10.
pub fn assign_folds(records: &[EcgRecord], seed: u64) -> BTreeMap<String, u8> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut rng::stream(seed, &[0xf01d]));
    idx.iter()
        .enumerate()
        .map(|(k, &i)| (records[i].id.clone(), (k % 10) as u8 + 1))
        .collect()
}

impl Dataset {
    pub fn synthetic(cfg: &SyntheticConfig) -> Result<Self> {
        let records = generate_synthetic(cfg)?;
        let folds = assign_folds(&records, cfg.seed);
        Ok(Dataset { records, folds })
    }
}
