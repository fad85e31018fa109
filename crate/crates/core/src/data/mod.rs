//! ECG records, the five-superclass label taxonomy, fold splits and the
//! synthetic generator used for desk-scale runs.

mod split;
mod store;
mod synthetic;

pub use split::{select_label_fraction, split_folds, DatasetSplit, LabelFraction};
pub use store::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LEADS: usize = 12;
pub const DEFAULT_LEN: usize = 1000;
pub const DEFAULT_FS: f64 = 100.0;
/// Lower bound on the standard deviation used by [`normalize`].
pub const NORM_EPS: f64 = 1e-8;

/// `leads x len` samples, row-major (one row per lead).
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    leads: usize,
    len: usize,
    data: Vec<f64>,
}

impl Signal {
    pub fn new(leads: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if leads == 0 || len == 0 || data.len() != leads * len {
            return Err(Error::shape(
                "signal",
                format!("{leads} x {len} needs {} samples, got {}", leads * len, data.len()),
            ));
        }
        Ok(Signal { leads, len, data })
    }

    pub fn zeros(leads: usize, len: usize) -> Self {
        Signal {
            leads,
            len,
            data: vec![0.0; leads * len],
        }
    }

    /// Single-lead signal.
    pub fn from_lead(lead: Vec<f64>) -> Self {
        Signal {
            leads: 1,
            len: lead.len(),
            data: lead,
        }
    }

    pub fn from_leads(leads: &[Vec<f64>]) -> Result<Self> {
        let len = leads.first().map_or(0, |l| l.len());
        if leads.iter().any(|l| l.len() != len) {
            return Err(Error::shape("signal", "leads differ in length"));
        }
        Signal::new(leads.len(), len, leads.concat())
    }

    pub fn leads(&self) -> usize {
        self.leads
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn lead(&self, d: usize) -> &[f64] {
        &self.data[d * self.len..(d + 1) * self.len]
    }

    pub fn lead_mut(&mut self, d: usize) -> &mut [f64] {
        &mut self.data[d * self.len..(d + 1) * self.len]
    }

    pub fn lead_iter(&self) -> std::slice::Chunks<'_, f64> {
        self.data.chunks(self.len)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// The five PTB-XL diagnostic superclasses, in label-vector order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Superclass {
    #[serde(rename = "NORM")]
    Norm,
    #[serde(rename = "MI")]
    Mi,
    #[serde(rename = "STTC")]
    Sttc,
    #[serde(rename = "CD")]
    Cd,
    #[serde(rename = "HYP")]
    Hyp,
}

impl Superclass {
    pub const ALL: [Superclass; 5] = [
        Superclass::Norm,
        Superclass::Mi,
        Superclass::Sttc,
        Superclass::Cd,
        Superclass::Hyp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            Superclass::Norm => "NORM",
            Superclass::Mi => "MI",
            Superclass::Sttc => "STTC",
            Superclass::Cd => "CD",
            Superclass::Hyp => "HYP",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Superclass::ALL.into_iter().find(|c| c.code() == code)
    }
}

impl fmt::Display for Superclass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

pub const NUM_CLASSES: usize = 5;

/// Multi-label indicator vector over [`Superclass::ALL`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelVector([bool; NUM_CLASSES]);

impl LabelVector {
    pub fn new(bits: [bool; NUM_CLASSES]) -> Self {
        LabelVector(bits)
    }

    pub fn one_hot(class: usize) -> Self {
        let mut b = [false; NUM_CLASSES];
        b[class] = true;
        LabelVector(b)
    }

    pub fn set(&mut self, class: Superclass) {
        self.0[class.index()] = true;
    }

    pub fn get(&self, class: Superclass) -> bool {
        self.0[class.index()]
    }

    pub fn bits(&self) -> [bool; NUM_CLASSES] {
        self.0
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn as_f64(&self) -> [f64; NUM_CLASSES] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    pub id: String,
    pub signal: Signal,
    pub sampling_rate: f64,
    pub labels: Option<LabelVector>,
}

impl EcgRecord {
    pub fn new(id: impl Into<String>, signal: Signal, sampling_rate: f64, labels: Option<LabelVector>) -> Result<Self> {
        let id = id.into();
        let err = |detail: String| Error::Record {
            record: id.clone(),
            detail,
        };
        if signal.len() < 2 {
            return Err(err(format!("needs at least 2 samples per lead, got {}", signal.len())));
        }
        if !(sampling_rate > 0.0) {
            return Err(err(format!("sampling rate {sampling_rate} is not positive")));
        }
        if let Some(i) = signal.data().iter().position(|v| !v.is_finite()) {
            return Err(err(format!(
                "non-finite sample at lead {}, index {}",
                i / signal.len(),
                i % signal.len()
            )));
        }
        Ok(EcgRecord {
            id,
            signal,
            sampling_rate,
            labels,
        })
    }

    /// Labelled with at least one superclass; only these take part in
    /// finetuning and evaluation.
    pub fn is_labelled(&self) -> bool {
        self.labels.is_some_and(|l| !l.is_empty())
    }
}

/// Records plus their fold assignment.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub records: Vec<EcgRecord>,
    pub folds: BTreeMap<String, u8>,
}

impl Dataset {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    pub fn select<'a>(&'a self, ids: &std::collections::BTreeSet<String>) -> Vec<&'a EcgRecord> {
        self.records.iter().filter(|r| ids.contains(&r.id)).collect()
    }
}

/// Per-lead standardization result.
#[derive(Clone, Debug)]
pub struct Normalized {
    pub record: EcgRecord,
    /// Leads whose variance fell below the floor and were set to zero.
    pub constant_leads: Vec<usize>,
}

/// Standardizes every lead to zero mean and unit variance. Constant leads
/// become all-zero and are reported.
pub fn normalize_with_report(record: &EcgRecord) -> Normalized {
    let mut out = record.clone();
    let mut constant_leads = Vec::new();
    for d in 0..out.signal.leads() {
        let lead = out.signal.lead_mut(d);
        let n = lead.len() as f64;
        let mean = lead.iter().sum::<f64>() / n;
        let var = lead.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd < NORM_EPS {
            constant_leads.push(d);
            lead.fill(0.0);
        } else {
            for v in lead.iter_mut() {
                *v = (*v - mean) / sd;
            }
        }
    }
    Normalized {
        record: out,
        constant_leads,
    }
}

pub fn normalize(record: &EcgRecord) -> EcgRecord {
    let n = normalize_with_report(record);
    if !n.constant_leads.is_empty() {
        log::warn!(
            "record {}: constant lead(s) {:?} normalized to zero",
            record.id,
            n.constant_leads
        );
    }
    n.record
}
