//! The experiment pipeline (pretrain, finetune, evaluate) and the parameter
//! sweep that writes one CSV row per run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{grid, AugmentationKind, AugmentationSpec};
use crate::config::{DatasetSource, ExperimentConfig};
use crate::data::{
    load_dataset, normalize, select_label_fraction, split_folds, Dataset, DatasetSplit, LabelFraction, LabelVector,
    Signal,
};
use crate::error::{Error, Result};
use crate::models::{ModelState, Variant};
use crate::train::{self, EpochRecord, Evaluation, MetricsLog};
use crate::{par, wfdb};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CSV_HEADER: [&str; 9] = [
    "kind",
    "param",
    "encoder",
    "label_fraction",
    "seed",
    "weighted_accuracy",
    "macro_accuracy",
    "wall_time_s",
    "status",
];
/// Caps sweep worker slots.
pub const WORKERS_ENV: &str = "ECGCLR_WORKERS";

/// Full-scale reference accuracies (weighted, %), Gaussian noise at 100% labels.
pub const REFERENCE_GAUSSIAN_FULL_A: f64 = 80.17;
pub const REFERENCE_GAUSSIAN_FULL_B: f64 = 80.31;

pub fn load_source(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::Synthetic(cfg) => Dataset::synthetic(cfg),
        DatasetSource::Ptbxl { root, limit } => wfdb::load_ptbxl(root, *limit),
        DatasetSource::File(path) => load_dataset(path),
    }
}

/// Normalized records arranged for the two-stage protocol.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: DatasetSplit,
    index: BTreeMap<String, usize>,
}

impl Prepared {
    pub fn new(dataset: Dataset) -> Result<Self> {
        let split = split_folds(dataset.ids(), &dataset.folds)?;
        let records = dataset.records.iter().map(normalize).collect();
        let dataset = Dataset {
            records,
            folds: dataset.folds,
        };
        let index = dataset.records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        Ok(Prepared { dataset, split, index })
    }

    fn signals(&self, ids: &BTreeSet<String>) -> Vec<&Signal> {
        ids.iter().map(|id| &self.dataset.records[self.index[id]].signal).collect()
    }

    fn labelled(&self, ids: &BTreeSet<String>) -> (Vec<&Signal>, Vec<LabelVector>) {
        ids.iter()
            .map(|id| &self.dataset.records[self.index[id]])
            .filter_map(|r| r.labels.map(|l| (&r.signal, l)))
            .unzip()
    }

    /// Every training-fold record, labelled or not.
    pub fn pretrain_pool(&self) -> Vec<&Signal> {
        self.signals(&self.split.train_ids)
    }

    pub fn finetune_set(&self, fraction: LabelFraction, seed: u64) -> (Vec<&Signal>, Vec<LabelVector>) {
        self.labelled(&select_label_fraction(&self.split, fraction, seed))
    }

    pub fn test_set(&self) -> (Vec<&Signal>, Vec<LabelVector>) {
        self.labelled(&self.split.test_ids)
    }

    pub fn check_shape(&self, leads: usize, len: usize) -> Result<()> {
        match self.dataset.records.iter().find(|r| r.signal.leads() != leads || r.signal.len() != len) {
            Some(r) => Err(Error::Config(format!(
                "record {} is {}x{}, the encoder expects {leads}x{len}",
                r.id,
                r.signal.leads(),
                r.signal.len()
            ))),
            None => Ok(()),
        }
    }
}

/// Label fractions appear as `10%`, `40%`, `100%` in CSV files.
mod percent {
    use super::LabelFraction;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(f: &LabelFraction, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(f)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<LabelFraction, D::Error> {
        let s = String::deserialize(d)?;
        LabelFraction::parse_percent(&s).map_err(D::Error::custom)
    }
}

/// One CSV row. Accuracies are empty on error rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: AugmentationKind,
    pub param: String,
    pub encoder: Variant,
    #[serde(with = "percent")]
    pub label_fraction: LabelFraction,
    pub seed: u64,
    pub weighted_accuracy: Option<f64>,
    pub macro_accuracy: Option<f64>,
    pub wall_time_s: f64,
    pub status: String,
}

pub type RowKey = (AugmentationKind, String, Variant, LabelFraction, u64);

impl SweepResult {
    pub fn key(&self) -> RowKey {
        (self.kind, self.param.clone(), self.encoder, self.label_fraction, self.seed)
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<SweepResult>> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(CSV_HEADER) {
        return Err(Error::Config(format!("{} has unexpected columns {headers:?}", path.display())));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Appends rows in one write; the header goes first when the file is new or empty.
pub fn append_results(path: impl AsRef<Path>, rows: &[SweepResult]) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
}

/// One pretraining run and the finetune/evaluate passes that share it.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkUnit {
    pub spec: AugmentationSpec,
    pub encoder: Variant,
    pub seed: u64,
    pub fractions: Vec<LabelFraction>,
}

pub fn plan(cfg: &ExperimentConfig) -> Vec<WorkUnit> {
    let mut units = Vec::new();
    for &kind in &cfg.augmentation.grids {
        for spec in grid(kind) {
            for &encoder in &cfg.encoders {
                for &seed in &cfg.seeds {
                    units.push(WorkUnit {
                        spec,
                        encoder,
                        seed,
                        fractions: cfg.label_fractions.clone(),
                    });
                }
            }
        }
    }
    units
}

fn log_name(spec: &AugmentationSpec, encoder: Variant, seed: u64) -> String {
    format!("{}_{}_{}_s{}.log", spec.kind(), spec.param_label(), encoder, seed)
}

/// Pretrain once, then finetune and evaluate at each fraction. Failures
/// become error rows.
pub fn run_unit(prep: &Prepared, cfg: &ExperimentConfig, unit: &WorkUnit, log_dir: Option<&Path>) -> Vec<SweepResult> {
    let row = |fraction, ev: Result<Evaluation>, secs: f64| {
        let (w, m, status) = match ev {
            Ok(e) => (Some(e.weighted_accuracy), Some(e.macro_accuracy), "ok".to_string()),
            Err(e) => (None, None, format!("error: {}", e.to_string().replace(['\n', '\r'], " "))),
        };
        SweepResult {
            kind: unit.spec.kind(),
            param: unit.spec.param_label(),
            encoder: unit.encoder,
            label_fraction: fraction,
            seed: unit.seed,
            weighted_accuracy: w,
            macro_accuracy: m,
            wall_time_s: secs,
            status,
        }
    };
    let start = Instant::now();
    let mut log = match log_dir.map(|d| MetricsLog::open(d.join(log_name(&unit.spec, unit.encoder, unit.seed)))) {
        Some(Ok(l)) => Some(l),
        Some(Err(e)) => {
            log::warn!("{e}");
            None
        }
        None => None,
    };
    let mut observe = |r: &EpochRecord| match log.as_mut() {
        Some(l) => l.record(r),
        None => Ok(()),
    };
    let pretrained = (|| {
        let mut model = ModelState::new(&cfg.model.encoder(unit.encoder), &cfg.model.heads(), unit.seed)?;
        train::pretrain(&mut model, &prep.pretrain_pool(), &unit.spec, &cfg.train, unit.seed, &mut observe)?;
        Ok::<_, Error>(model)
    })();
    let pre_secs = start.elapsed().as_secs_f64();
    let model = match pretrained {
        Ok(m) => m,
        Err(e) => {
            let msg = e.to_string();
            return unit
                .fractions
                .iter()
                .map(|&f| row(f, Err(Error::InvalidArgument(format!("pretrain: {msg}"))), pre_secs))
                .collect();
        }
    };
    unit.fractions
        .iter()
        .map(|&fraction| {
            let t0 = Instant::now();
            let ev = (|| {
                let mut m = model.clone();
                let (sig, lab) = prep.finetune_set(fraction, unit.seed);
                train::finetune(&mut m, &sig, &lab, &cfg.train, unit.seed, &mut observe)?;
                let (ts, tl) = prep.test_set();
                train::evaluate(&m, &ts, &tl, cfg.train.threshold)
            })();
            row(fraction, ev, pre_secs + t0.elapsed().as_secs_f64())
        })
        .collect()
}

pub fn worker_slots(cfg: &ExperimentConfig) -> usize {
    if cfg.deterministic {
        return 1;
    }
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut n = cfg.workers.unwrap_or(avail);
    if let Some(cap) = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        n = n.min(cap.max(1));
    }
    n.max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub csv: PathBuf,
    pub added: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Runs every grid point not already present in `<output_dir>/results.csv`.
pub fn run_sweep(cfg: &ExperimentConfig, prep: &Prepared) -> Result<SweepOutcome> {
    cfg.validate()?;
    for &v in &cfg.encoders {
        let e = cfg.model.encoder(v);
        prep.check_shape(e.in_channels, e.input_len)?;
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let log_dir = cfg.output_dir.join("logs");
    std::fs::create_dir_all(&log_dir).map_err(|e| Error::io(&log_dir, e))?;
    let csv = cfg.output_dir.join(RESULTS_FILE);
    let done: BTreeSet<RowKey> = read_results(&csv)?.iter().map(SweepResult::key).collect();

    let mut skipped = 0;
    let pending: Vec<WorkUnit> = plan(cfg)
        .into_iter()
        .filter_map(|mut u| {
            let before = u.fractions.len();
            u.fractions
                .retain(|&f| !done.contains(&(u.spec.kind(), u.spec.param_label(), u.encoder, f, u.seed)));
            skipped += before - u.fractions.len();
            (!u.fractions.is_empty()).then_some(u)
        })
        .collect();

    let writer = Mutex::new((0usize, 0usize));
    let run = |u: &WorkUnit| -> Result<()> {
        let rows = run_unit(prep, cfg, u, Some(&log_dir));
        let mut counts = writer.lock().expect("writer lock");
        append_results(&csv, &rows)?;
        counts.0 += rows.len();
        counts.1 += rows.iter().filter(|r| !r.is_ok()).count();
        for r in &rows {
            log::info!(
                "{} {} {} {} seed {}: {}",
                r.kind,
                r.param,
                r.encoder,
                r.label_fraction,
                r.seed,
                r.weighted_accuracy.map_or(r.status.clone(), |a| format!("{a:.4}"))
            );
        }
        Ok(())
    };
    let slots = worker_slots(cfg);
    if slots <= 1 || par::exec() == par::Exec::Sequential {
        pending.iter().try_for_each(run)?;
    } else {
        run_parallel(&pending, slots, &run)?;
    }
    let (added, failed) = writer.into_inner().expect("writer lock");
    Ok(SweepOutcome {
        csv,
        added,
        skipped,
        failed,
    })
}

#[cfg(feature = "parallel")]
fn run_parallel(units: &[WorkUnit], slots: usize, run: &(dyn Fn(&WorkUnit) -> Result<()> + Sync)) -> Result<()> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(slots)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    pool.install(|| units.par_iter().try_for_each(run))
}

#[cfg(not(feature = "parallel"))]
fn run_parallel(units: &[WorkUnit], _slots: usize, run: &(dyn Fn(&WorkUnit) -> Result<()> + Sync)) -> Result<()> {
    units.iter().try_for_each(run)
}

/// Best weighted accuracy for one (kind, encoder, fraction) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestResult {
    pub kind: AugmentationKind,
    pub encoder: Variant,
    #[serde(with = "percent")]
    pub label_fraction: LabelFraction,
    pub weighted_accuracy: f64,
    pub param: String,
    pub seed: u64,
}

/// Maximum over parameters and seeds of the successful rows, per cell.
/// Ties keep the first row in file order.
pub fn best_per_augmentation(rows: &[SweepResult]) -> Result<Vec<BestResult>> {
    let mut best: BTreeMap<(AugmentationKind, Variant, LabelFraction), BestResult> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        let Some(acc) = r.weighted_accuracy else { continue };
        let key = (r.kind, r.encoder, r.label_fraction);
        let better = best.get(&key).is_none_or(|b| acc > b.weighted_accuracy);
        if better {
            best.insert(
                key,
                BestResult {
                    kind: r.kind,
                    encoder: r.encoder,
                    label_fraction: r.label_fraction,
                    weighted_accuracy: acc,
                    param: r.param.clone(),
                    seed: r.seed,
                },
            );
        }
    }
    if best.is_empty() {
        return Err(Error::Empty("sweep results (no successful rows)"));
    }
    Ok(best.into_values().collect())
}

/// Table-2 layout: one line per augmentation, one column per encoder and
/// label fraction, values in percent.
pub fn format_summary(best: &[BestResult]) -> String {
    let cols: BTreeSet<(Variant, LabelFraction)> = best.iter().map(|b| (b.encoder, b.label_fraction)).collect();
    let kinds: BTreeSet<AugmentationKind> = best.iter().map(|b| b.kind).collect();
    let mut out = format!("{:<16}", "Augmentation");
    for (v, f) in &cols {
        out += &format!(" {:>10}", format!("{v} {f}"));
    }
    out.push('\n');
    for k in kinds {
        out += &format!("{:<16}", k.label());
        for &(v, f) in &cols {
            let cell = best
                .iter()
                .find(|b| b.kind == k && b.encoder == v && b.label_fraction == f)
                .map_or("-".to_string(), |b| format!("{:.2}", 100.0 * b.weighted_accuracy));
            out += &format!(" {cell:>10}");
        }
        out.push('\n');
    }
    out
}

pub fn write_summary(path: impl AsRef<Path>, best: &[BestResult]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for b in best {
        w.serialize(b)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `<dir>/results.csv`, writes `<dir>/summary.csv` and returns the table.
pub fn summarize_dir(dir: impl AsRef<Path>) -> Result<(Vec<BestResult>, String)> {
    let dir = dir.as_ref();
    let rows = read_results(dir.join(RESULTS_FILE))?;
    let best = best_per_augmentation(&rows)?;
    write_summary(dir.join(SUMMARY_FILE), &best)?;
    Ok((best.clone(), format_summary(&best)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::data::SyntheticConfig;

    fn row(kind: AugmentationKind, param: &str, enc: Variant, f: LabelFraction, seed: u64, acc: Option<f64>) -> SweepResult {
        SweepResult {
            kind,
            param: param.into(),
            encoder: enc,
            label_fraction: f,
            seed,
            weighted_accuracy: acc,
            macro_accuracy: acc,
            wall_time_s: 1.5,
            status: if acc.is_some() { "ok".into() } else { "error: boom".into() },
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![
            row(AugmentationKind::VerticalFlip, "none", Variant::A, LabelFraction::TENTH, 0, Some(0.5)),
            row(AugmentationKind::TimeWarp, "2-0.25", Variant::B, LabelFraction::FULL, 3, None),
        ];
        append_results(&p, &rows[..1]).unwrap();
        append_results(&p, &rows[1..]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "vertical_flip,none,A,10%,0,0.5,0.5,1.5,ok");
        assert_eq!(lines.next().unwrap(), "time_warp,2-0.25,B,100%,3,,,1.5,error: boom");
        assert_eq!(read_results(&p).unwrap(), rows);
    }

    #[test]
    fn best_matches_brute_force() {
        let mut rows = vec![];
        let mut k = 0u64;
        for kind in [AugmentationKind::GaussianNoise, AugmentationKind::Scale] {
            for enc in Variant::ALL {
                for f in LabelFraction::ALL {
                    for p in 0..4 {
                        k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        let acc = (k >> 11) as f64 / (1u64 << 53) as f64;
                        rows.push(row(kind, &p.to_string(), enc, f, p, Some(acc)));
                    }
                }
            }
        }
        rows.push(row(AugmentationKind::Scale, "9", Variant::A, LabelFraction::FULL, 0, None));
        let best = best_per_augmentation(&rows).unwrap();
        assert_eq!(best.len(), 12);
        for b in &best {
            let mut m = f64::NEG_INFINITY;
            for r in &rows {
                if r.kind == b.kind && r.encoder == b.encoder && r.label_fraction == b.label_fraction && r.is_ok() {
                    m = m.max(r.weighted_accuracy.unwrap());
                }
            }
            assert_eq!(b.weighted_accuracy, m);
        }
        let single = &rows[..1];
        assert_eq!(best_per_augmentation(single).unwrap()[0].weighted_accuracy, single[0].weighted_accuracy.unwrap());
        assert!(best_per_augmentation(&[]).is_err());
        assert!(format_summary(&best).contains("Gaussian Noise"));
    }

    #[test]
    fn plan_sizes() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(plan(&cfg).len() * 3, 66);
        cfg.augmentation.grids = vec![AugmentationKind::VerticalFlip, AugmentationKind::HorizontalFlip];
        assert_eq!(plan(&cfg).len(), 4);
    }

    #[test]
    fn tiny_sweep_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig {
            output_dir: dir.path().to_path_buf(),
            deterministic: true,
            ..Default::default()
        };
        cfg.model.preset = Preset::Toy;
        cfg.augmentation.grids = vec![AugmentationKind::VerticalFlip];
        cfg.dataset.synthetic = Some(SyntheticConfig {
            n: 40,
            len: 250,
            ..Default::default()
        });
        cfg.train.pretrain_epochs = 1;
        cfg.train.finetune_epochs = 2;
        cfg.train.batch_size = 16;
        let prep = Prepared::new(load_source(&cfg.dataset.source().unwrap()).unwrap()).unwrap();
        let first = run_sweep(&cfg, &prep).unwrap();
        assert_eq!((first.added, first.skipped, first.failed), (6, 0, 0));
        let again = run_sweep(&cfg, &prep).unwrap();
        assert_eq!((again.added, again.skipped), (0, 6));
        let rows = read_results(&first.csv).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.weighted_accuracy.unwrap())));
        let (best, table) = summarize_dir(dir.path()).unwrap();
        assert_eq!(best.len(), 6);
        assert!(table.starts_with("Augmentation"));
    }

    #[test]
    fn failures_become_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig {
            output_dir: dir.path().to_path_buf(),
            deterministic: true,
            ..Default::default()
        };
        cfg.model.preset = Preset::Toy;
        cfg.encoders = vec![Variant::A];
        cfg.label_fractions = vec![LabelFraction::TENTH];
        // no labels, so finetuning fails
        cfg.augmentation.grids = vec![AugmentationKind::VerticalFlip];
        cfg.dataset.synthetic = Some(SyntheticConfig {
            n: 30,
            len: 250,
            labelled: false,
            ..Default::default()
        });
        cfg.train.pretrain_epochs = 1;
        cfg.train.finetune_epochs = 1;
        cfg.train.batch_size = 16;
        let prep = Prepared::new(load_source(&cfg.dataset.source().unwrap()).unwrap()).unwrap();
        let out = run_sweep(&cfg, &prep).unwrap();
        assert_eq!((out.added, out.failed), (1, 1));
        let rows = read_results(&out.csv).unwrap();
        assert!(rows[0].status.starts_with("error:"));
        assert!(best_per_augmentation(&rows).is_err());
    }
}
