//! Optimizers, contrastive pretraining, frozen-encoder finetuning and evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationSpec;
use crate::autodiff::{Gradients, Bound, ParamStore, Tape, Tensor};
use crate::contrastive::{self, DEFAULT_TAU};
use crate::data::{LabelVector, Signal, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::models::{Component, Mode, ModelState};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimConfig {
    pub fn adam(learning_rate: f64, weight_decay: f64) -> Self {
        OptimConfig {
            kind: OptimKind::Adam,
            learning_rate,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimConfig {
            kind: OptimKind::Sgd,
            weight_decay: 0.0,
            ..OptimConfig::adam(learning_rate, 0.0)
        }
    }

    /// Pretraining default: Adam, lr 5e-4, weight decay 1e-3.
    pub fn pretrain_default() -> Self {
        OptimConfig::adam(5e-4, 1e-3)
    }

    /// Finetuning default: SGD, lr 0.01.
    pub fn finetune_default() -> Self {
        OptimConfig::sgd(0.01)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("Adam needs betas in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

fn check_finite(name: &str, grad: &[f64]) -> Result<()> {
    if grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient(name.to_string()))
    }
}

/// One Adam update at step `t` (1-based) with decoupled weight decay.
pub fn adam_step(
    name: &str,
    theta: &mut [f64],
    grad: &[f64],
    state: &mut AdamMoments,
    t: u64,
    cfg: &OptimConfig,
) -> Result<()> {
    if theta.len() != grad.len() {
        return Err(Error::shape("adam_step", format!("{name}: {} params, {} grads", theta.len(), grad.len())));
    }
    check_finite(name, grad)?;
    if state.m.len() != theta.len() {
        state.m = vec![0.0; theta.len()];
        state.v = vec![0.0; theta.len()];
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        theta[i] -= cfg.learning_rate * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
    }
    Ok(())
}

pub fn sgd_step(name: &str, theta: &mut [f64], grad: &[f64], cfg: &OptimConfig) -> Result<()> {
    if theta.len() != grad.len() {
        return Err(Error::shape("sgd_step", format!("{name}: {} params, {} grads", theta.len(), grad.len())));
    }
    check_finite(name, grad)?;
    for (p, g) in theta.iter_mut().zip(grad) {
        *p -= cfg.learning_rate * (g + cfg.weight_decay * *p);
    }
    Ok(())
}

/// Optimizer state for any number of parameter stores, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimConfig,
    t: u64,
    moments: BTreeMap<String, AdamMoments>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every trainable parameter of each store, using
    /// the gradients of its bound tape variables (zero when unreached).
    /// Nothing is written unless every gradient is finite.
    pub fn step(&mut self, targets: &mut [(&mut ParamStore, &Bound)], grads: &Gradients) -> Result<()> {
        let mut collected = Vec::new();
        for (ti, (store, bound)) in targets.iter().enumerate() {
            for (id, var) in bound.iter() {
                let p = store.param(id);
                let g = match grads.get(var) {
                    Some(g) => g.data().to_vec(),
                    None => vec![0.0; p.value.len()],
                };
                check_finite(&p.name, &g)?;
                collected.push((ti, id, g));
            }
        }
        self.t += 1;
        for (ti, id, g) in collected {
            let store = &mut *targets[ti].0;
            let name = store.param(id).name.clone();
            let theta = store.get_mut(id).data_mut();
            match self.cfg.kind {
                OptimKind::Adam => {
                    let st = self.moments.entry(name.clone()).or_default();
                    adam_step(&name, theta, &g, st, self.t, &self.cfg)?;
                }
                OptimKind::Sgd => sgd_step(&name, theta, &g, &self.cfg)?,
            }
        }
        Ok(())
    }
}

/// Mean over rows of the summed per-class binary cross-entropy.
pub fn bce_loss(pred: &Tensor, labels: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = tape.bce(p, labels)?;
    Ok(tape.value(l).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub finetune_epochs: usize,
    pub finetune_batch_size: usize,
    pub tau: f64,
    pub pretrain_optimizer: OptimConfig,
    pub finetune_optimizer: OptimConfig,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 50,
            batch_size: 128,
            finetune_epochs: 200,
            finetune_batch_size: 32,
            tau: DEFAULT_TAU,
            pretrain_optimizer: OptimConfig::pretrain_default(),
            finetune_optimizer: OptimConfig::finetune_default(),
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_epochs == 0 || self.finetune_epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "contrastive batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.finetune_batch_size == 0 {
            return Err(Error::InvalidArgument("finetune batch size must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {}", self.tau)));
        }
        self.pretrain_optimizer.validate()?;
        self.finetune_optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
    Supervised,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Supervised => "supervised",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} stage={} loss={:.6}", self.epoch, self.stage, self.loss)?;
        match self.accuracy {
            Some(a) => write!(f, " accuracy={a:.4}"),
            None => write!(f, " accuracy=-"),
        }
    }
}

/// Appends one line per epoch to a text file.
pub struct MetricsLog {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl MetricsLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(MetricsLog { file, path })
    }

    pub fn record(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.file, "{r}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Per-epoch callback; return an error to abort training.
pub type Observer<'a> = &'a mut dyn FnMut(&EpochRecord) -> Result<()>;

fn epoch_order(n: usize, seed: u64, stage: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[stage, epoch as u64]));
    idx
}

/// Contrastive pretraining of E and G jointly. Returns the mean loss of
/// every epoch. A trailing batch of one sample is dropped.
pub fn pretrain(
    model: &mut ModelState,
    signals: &[&Signal],
    spec: &AugmentationSpec,
    cfg: &TrainConfig,
    seed: u64,
    observe: Observer<'_>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    spec.validate()?;
    if signals.len() < 2 {
        return Err(Error::Empty("pretraining pool (need at least 2 records)"));
    }
    let mut opt = Optimizer::new(cfg.pretrain_optimizer)?;
    let train_enc = !model.is_frozen(Component::Encoder);
    let train_proj = !model.is_frozen(Component::Projection);
    let mut curve = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let order = epoch_order(signals.len(), seed, 1, epoch);
        let (mut total, mut batches) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Signal> = chunk.iter().map(|&i| signals[i]).collect();
            let aug = contrastive::augment_batch(&batch, spec, seed, &[2, epoch as u64, bi as u64])?;
            let aug_refs: Vec<&Signal> = aug.iter().collect();
            let mut tape = Tape::new();
            let enc = model.encoder.store().bind(&mut tape, train_enc);
            let proj = model.projection.store().bind(&mut tape, train_proj);
            let g = contrastive::pair_graph(
                &mut tape,
                model,
                &enc,
                &proj,
                contrastive::stack(&batch)?,
                contrastive::stack(&aug_refs)?,
                Mode::Train,
                cfg.tau,
            )?;
            let loss = tape.value(g.loss).item();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = tape.backward(g.loss)?;
            {
                let (e, p) = (&mut model.encoder, &mut model.projection);
                let mut targets: Vec<(&mut ParamStore, &Bound)> = Vec::new();
                if train_enc {
                    targets.push((e.store_mut(), &enc));
                }
                if train_proj {
                    targets.push((p.store_mut(), &proj));
                }
                opt.step(&mut targets, &grads)?;
            }
            if train_enc {
                for u in &g.updates {
                    model.encoder.apply_bn_updates(u);
                }
            }
            total += loss;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::debug!("pretrain epoch {epoch} loss {mean:.6}");
        observe(&EpochRecord {
            stage: Stage::Pretrain,
            epoch,
            loss: mean,
            accuracy: None,
        })?;
        curve.push(mean);
    }
    Ok(curve)
}

pub fn label_tensor(labels: &[LabelVector]) -> Tensor {
    let data = labels.iter().flat_map(|l| l.as_f64()).collect();
    Tensor::new(vec![labels.len(), NUM_CLASSES], data).expect("rows of NUM_CLASSES")
}

/// Eval-mode encoder features, computed in chunks.
pub fn encode_all(model: &ModelState, signals: &[&Signal]) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let width = model.encoder.flatten_size();
    let mut data = Vec::with_capacity(signals.len() * width);
    for chunk in signals.chunks(CHUNK) {
        data.extend(model.encoder.encode(&contrastive::stack(chunk)?)?.into_data());
    }
    Tensor::new(vec![signals.len(), width], data)
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
    }
    Tensor::new(vec![idx.len(), w], data).expect("row gather")
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
    pub encoder_checksum: u64,
}

/// Freezes E and trains C on `(signal, labels)` pairs with the finetune
/// optimizer. Features are computed once with eval-mode batch norm.
pub fn finetune(
    model: &mut ModelState,
    signals: &[&Signal],
    labels: &[LabelVector],
    cfg: &TrainConfig,
    seed: u64,
    observe: Observer<'_>,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if signals.is_empty() {
        return Err(Error::Empty("labelled finetuning set"));
    }
    if signals.len() != labels.len() {
        return Err(Error::shape("finetune", "signals and labels differ in count"));
    }
    model.freeze(Component::Encoder);
    let before = model.checksum(Component::Encoder);
    let feats = encode_all(model, signals)?;
    let y = label_tensor(labels);
    let mut opt = Optimizer::new(cfg.finetune_optimizer)?;
    let mut losses = Vec::with_capacity(cfg.finetune_epochs);
    let mut train_accuracy = 0.0;
    for epoch in 0..cfg.finetune_epochs {
        let order = epoch_order(signals.len(), seed, 3, epoch);
        let (mut total, mut batches) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.finetune_batch_size).enumerate() {
            let mut tape = Tape::new();
            let p = model.classifier.store().bind(&mut tape, true);
            let x = tape.constant(rows(&feats, chunk));
            let c = model.classifier.forward(&mut tape, &p, x)?;
            let loss = tape.bce(c, &rows(&y, chunk))?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = tape.backward(loss)?;
            opt.step(&mut [(model.classifier.store_mut(), &p)], &grads)?;
            total += lv;
            batches += 1;
        }
        let mean = total / batches as f64;
        train_accuracy = evaluate_predictions(&model.classifier.apply(&feats)?, labels, cfg.threshold)?.weighted_accuracy;
        observe(&EpochRecord {
            stage: Stage::Finetune,
            epoch,
            loss: mean,
            accuracy: Some(train_accuracy),
        })?;
        losses.push(mean);
    }
    let after = model.checksum(Component::Encoder);
    if after != before {
        return Err(Error::FrozenModified(format!("encoder checksum {before:016x} became {after:016x}")));
    }
    Ok(FinetuneReport {
        losses,
        train_accuracy,
        encoder_checksum: after,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub support: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub weighted_accuracy: f64,
    pub macro_accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub records: usize,
}

/// Per-class binary accuracy at `threshold`, weighted by positive support.
/// With no positive labels at all the weighted value falls back to the macro mean.
pub fn evaluate_predictions(pred: &Tensor, labels: &[LabelVector], threshold: f64) -> Result<Evaluation> {
    let (n, c) = pred.dims2("evaluate")?;
    if n == 0 {
        return Err(Error::Empty("test set"));
    }
    if n != labels.len() || c != NUM_CLASSES {
        return Err(Error::shape("evaluate", format!("{n}x{c} predictions for {} records", labels.len())));
    }
    let mut per_class = Vec::with_capacity(c);
    for j in 0..c {
        let mut correct = 0usize;
        let mut support = 0usize;
        for (i, l) in labels.iter().enumerate() {
            let truth = l.bits()[j];
            support += truth as usize;
            correct += ((pred.data()[i * c + j] >= threshold) == truth) as usize;
        }
        per_class.push(ClassMetrics {
            support,
            accuracy: correct as f64 / n as f64,
        });
    }
    let macro_accuracy = per_class.iter().map(|m| m.accuracy).sum::<f64>() / c as f64;
    let total: usize = per_class.iter().map(|m| m.support).sum();
    let weighted_accuracy = if total == 0 {
        macro_accuracy
    } else {
        per_class.iter().map(|m| m.support as f64 * m.accuracy).sum::<f64>() / total as f64
    };
    Ok(Evaluation {
        weighted_accuracy,
        macro_accuracy,
        per_class,
        records: n,
    })
}

pub fn evaluate(model: &ModelState, signals: &[&Signal], labels: &[LabelVector], threshold: f64) -> Result<Evaluation> {
    if signals.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let feats = encode_all(model, signals)?;
    evaluate_predictions(&model.classifier.apply(&feats)?, labels, threshold)
}

/// Trains E and C jointly from scratch on labels (no contrastive stage) with
/// the finetune optimizer settings; batch norm runs in training mode.
pub fn supervised_train(
    model: &mut ModelState,
    signals: &[&Signal],
    labels: &[LabelVector],
    cfg: &TrainConfig,
    seed: u64,
    observe: Observer<'_>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if signals.len() < 2 {
        return Err(Error::Empty("supervised training set (need at least 2 records)"));
    }
    if signals.len() != labels.len() {
        return Err(Error::shape("supervised", "signals and labels differ in count"));
    }
    model.unfreeze(Component::Encoder);
    let mut opt = Optimizer::new(cfg.finetune_optimizer)?;
    let mut losses = Vec::with_capacity(cfg.finetune_epochs);
    for epoch in 0..cfg.finetune_epochs {
        let order = epoch_order(signals.len(), seed, 4, epoch);
        let (mut total, mut batches) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.finetune_batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Signal> = chunk.iter().map(|&i| signals[i]).collect();
            let lab: Vec<LabelVector> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let enc = model.encoder.store().bind(&mut tape, true);
            let cls = model.classifier.store().bind(&mut tape, true);
            let x = tape.constant(contrastive::stack(&batch)?);
            let (h, up) = model.encoder.forward(&mut tape, &enc, x, Mode::Train)?;
            let c = model.classifier.forward(&mut tape, &cls, h)?;
            let loss = tape.bce(c, &label_tensor(&lab))?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = tape.backward(loss)?;
            {
                let (e, k) = (&mut model.encoder, &mut model.classifier);
                opt.step(&mut [(e.store_mut(), &enc), (k.store_mut(), &cls)], &grads)?;
            }
            model.encoder.apply_bn_updates(&up);
            total += lv;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        observe(&EpochRecord {
            stage: Stage::Supervised,
            epoch,
            loss: mean,
            accuracy: None,
        })?;
        losses.push(mean);
    }
    Ok(losses)
}

/// Fully supervised reference: train E and C on all training labels, then
/// score the test set.
#[allow(clippy::too_many_arguments)]
pub fn supervised_baseline(
    model: &mut ModelState,
    train: (&[&Signal], &[LabelVector]),
    test: (&[&Signal], &[LabelVector]),
    cfg: &TrainConfig,
    seed: u64,
    observe: Observer<'_>,
) -> Result<Evaluation> {
    supervised_train(model, train.0, train.1, cfg, seed, observe)?;
    evaluate(model, test.0, test.1, cfg.threshold)
}

/// Full-scale supervised reference accuracies (weighted, %).
pub const REFERENCE_SUPERVISED_A: f64 = 82.428;
pub const REFERENCE_SUPERVISED_B: f64 = 84.876;

pub fn no_observer() -> impl FnMut(&EpochRecord) -> Result<()> {
    |_| Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::models::{EncoderConfig, HeadConfig, Variant};
    use proptest::prelude::*;
    use rand::Rng;

    /// Adam written out directly, scalar only.
    fn adam_reference(theta0: f64, grad: impl Fn(f64) -> f64, steps: usize, lr: f64, wd: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        let mut out = vec![];
        for t in 1..=steps {
            let g = grad(th);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            th = th - lr * mh / (vh.sqrt() + eps) - lr * wd * th;
            out.push(th);
        }
        out
    }

    fn run_adam(theta0: f64, grad: impl Fn(f64) -> f64, steps: usize, cfg: &OptimConfig) -> Vec<f64> {
        let mut th = [theta0];
        let mut st = AdamMoments::default();
        (1..=steps)
            .map(|t| {
                let g = [grad(th[0])];
                adam_step("theta", &mut th, &g, &mut st, t as u64, cfg).unwrap();
                th[0]
            })
            .collect()
    }

    #[test]
    fn adam_closed_forms() {
        let cfg = OptimConfig::adam(0.1, 0.0);
        let mut th = [1.0, -2.0];
        let mut st = AdamMoments::default();
        adam_step("p", &mut th, &[0.0, 0.0], &mut st, 1, &cfg).unwrap();
        assert_eq!(th, [1.0, -2.0]);
        let mut th = [1.0, 1.0];
        let mut st = AdamMoments::default();
        adam_step("p", &mut th, &[0.3, -5.0], &mut st, 1, &cfg).unwrap();
        assert!((th[0] - 0.9).abs() < 1e-6 && (th[1] - 1.1).abs() < 1e-6);
        assert!(matches!(
            adam_step("w", &mut th, &[f64::NAN, 0.0], &mut st, 2, &cfg),
            Err(Error::NonFiniteGradient(n)) if n == "w"
        ));
    }

    #[test]
    fn adam_matches_reference() {
        for (wd, steps) in [(0.0, 5), (0.0, 50), (1e-3, 50)] {
            let cfg = OptimConfig::adam(0.1, wd);
            let a = run_adam(1.0, |t| 2.0 * t, steps, &cfg);
            let b = adam_reference(1.0, |t| 2.0 * t, steps, 0.1, wd);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn sgd_cases() {
        let cfg = OptimConfig::sgd(0.01);
        let mut th = [1.0];
        sgd_step("p", &mut th, &[0.5], &cfg).unwrap();
        assert!((th[0] - 0.995).abs() < 1e-15);
        sgd_step("p", &mut th, &[0.0], &cfg).unwrap();
        assert!((th[0] - 0.995).abs() < 1e-15);
        let (mut a, mut b) = ([2.0], [2.0]);
        sgd_step("p", &mut a, &[0.7], &OptimConfig::sgd(0.02)).unwrap();
        sgd_step("p", &mut b, &[0.7], &cfg).unwrap();
        sgd_step("p", &mut b, &[0.7], &cfg).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-15);
        assert!(sgd_step("p", &mut a, &[f64::INFINITY], &cfg).is_err());
    }

    #[test]
    fn bce_cases() {
        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert!(bce_loss(&Tensor::new(vec![1, 1], vec![1.0 - 1e-12]).unwrap(), &one).unwrap() < 1e-11);
        let half = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        assert!((bce_loss(&half, &one).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&half, &Tensor::new(vec![1, 1], vec![0.5]).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn bce_matches_scalar_loop(rows in 1usize..6, seed in any::<u64>()) {
            let mut r = rng::stream(seed, &[]);
            let p: Vec<f64> = (0..rows * 5).map(|_| r.random_range(1e-6..1.0 - 1e-6)).collect();
            let l: Vec<f64> = (0..rows * 5).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let mut want = 0.0;
            for i in 0..rows {
                for j in 0..5 {
                    let (c, y) = (p[i * 5 + j], l[i * 5 + j]);
                    want += -(y * c.ln() + (1.0 - y) * (1.0 - c).ln());
                }
            }
            want /= rows as f64;
            let got = bce_loss(&Tensor::new(vec![rows, 5], p).unwrap(), &Tensor::new(vec![rows, 5], l).unwrap()).unwrap();
            prop_assert!((got - want).abs() < 1e-12);
            prop_assert!(got >= 0.0);
        }

        #[test]
        fn optimizers_neutral_on_zero_grad(v in proptest::collection::vec(-10.0f64..10.0, 1..8)) {
            let z = vec![0.0; v.len()];
            let mut a = v.clone();
            adam_step("p", &mut a, &z, &mut AdamMoments::default(), 1, &OptimConfig::adam(0.1, 0.0)).unwrap();
            prop_assert_eq!(&a, &v);
            sgd_step("p", &mut a, &z, &OptimConfig::sgd(0.1)).unwrap();
            prop_assert_eq!(&a, &v);
        }
    }

    fn lv(bits: [bool; 5]) -> LabelVector {
        LabelVector::new(bits)
    }

    #[test]
    fn evaluation_cases() {
        let labels = vec![lv([true, false, false, false, false]), lv([false, true, false, false, false])];
        let perfect = Tensor::new(vec![2, 5], vec![0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.9, 0.1, 0.1, 0.1]).unwrap();
        let e = evaluate_predictions(&perfect, &labels, 0.5).unwrap();
        assert_eq!((e.weighted_accuracy, e.macro_accuracy), (1.0, 1.0));

        let single = vec![lv([true, false, false, false, false]); 3];
        let wrong = Tensor::new(vec![3, 5], vec![0.1; 15]).unwrap();
        assert_eq!(evaluate_predictions(&wrong, &single, 0.5).unwrap().weighted_accuracy, 0.0);

        // supports {3, 1}; class 0 always right, class 1 always wrong
        let labels = vec![
            lv([true, true, false, false, false]),
            lv([true, false, false, false, false]),
            lv([true, false, false, false, false]),
            lv([false, false, false, false, false]),
        ];
        let mut p = vec![0.0; 20];
        for i in 0..4 {
            p[i * 5] = if i < 3 { 0.9 } else { 0.1 };
            p[i * 5 + 1] = if i == 0 { 0.1 } else { 0.9 };
        }
        let e = evaluate_predictions(&Tensor::new(vec![4, 5], p).unwrap(), &labels, 0.5).unwrap();
        assert_eq!((e.per_class[0].accuracy, e.per_class[1].accuracy), (1.0, 0.0));
        assert!((e.weighted_accuracy - 0.75).abs() < 1e-15);

        // threshold flip on all-negative labels
        let neg = vec![lv([false; 5]); 2];
        let p = Tensor::new(vec![2, 5], vec![0.5 - 1e-9; 10]).unwrap();
        assert_eq!(evaluate_predictions(&p, &neg, 0.5).unwrap().macro_accuracy, 1.0);
        assert_eq!(evaluate_predictions(&p, &neg, 0.1).unwrap().macro_accuracy, 0.0);
        assert!(evaluate_predictions(&Tensor::zeros(&[0, 5]), &[], 0.5).is_err());
    }

    fn toy_data(n: usize, len: usize, seed: u64) -> (Vec<Signal>, Vec<LabelVector>) {
        let recs = generate_synthetic(&SyntheticConfig {
            n,
            len,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let recs: Vec<_> = recs.iter().map(crate::data::normalize).collect();
        (recs.iter().map(|r| r.signal.clone()).collect(), recs.iter().map(|r| r.labels.unwrap()).collect())
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            pretrain_epochs: 2,
            batch_size: 8,
            finetune_epochs: 10,
            finetune_batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pretrain_progress_and_determinism() {
        let (sig, _) = toy_data(64, 250, 1);
        let refs: Vec<&Signal> = sig.iter().collect();
        let spec = AugmentationSpec::GaussianNoise { sigma: 0.15 };
        let run = || {
            let mut m = ModelState::new(&EncoderConfig::toy(Variant::A), &HeadConfig::toy(), 3).unwrap();
            let mut lines = vec![];
            let curve = pretrain(&mut m, &refs, &spec, &small_cfg(), 9, &mut |r| {
                lines.push(r.to_string());
                Ok(())
            })
            .unwrap();
            (curve, lines, m.checksum(Component::Encoder))
        };
        let (a, lines, ca) = run();
        let (b, _, cb) = run();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert!(a[1] < a[0], "{a:?}");
        assert!(lines[0].starts_with("epoch=0 stage=pretrain loss="));
    }

    #[test]
    fn identity_augmentation_first_step() {
        let (sig, _) = toy_data(4, 250, 2);
        let refs: Vec<&Signal> = sig.iter().collect();
        let m = ModelState::new(&EncoderConfig::toy(Variant::A), &HeadConfig::toy(), 1).unwrap();
        let mut tape = Tape::new();
        let enc = m.encoder.store().bind(&mut tape, true);
        let proj = m.projection.store().bind(&mut tape, true);
        let x = contrastive::stack(&refs).unwrap();
        let g = contrastive::pair_graph(&mut tape, &m, &enc, &proj, x.clone(), x, Mode::Train, 0.1).unwrap();
        let (z, zt) = (tape.value(g.z), tape.value(g.z_aug));
        assert_eq!(z, zt);
        let b = contrastive::ContrastiveBatch::new(z.clone(), zt.clone(), 0.1).unwrap();
        assert!(b.positive_similarities().unwrap().iter().all(|s| (s - 1.0).abs() < 1e-12));
        // with identical views, anchor a's negatives are the other samples twice
        let w = z.shape()[1];
        let row = |i: usize| &z.data()[i * w..(i + 1) * w];
        let mut want = 0.0;
        for a in 0..4 {
            let others: f64 = (0..4)
                .filter(|&b| b != a)
                .map(|b| (contrastive::cosine_similarity(row(a), row(b)).unwrap() / 0.1).exp())
                .sum();
            want += -((1.0f64 / 0.1).exp() / ((1.0f64 / 0.1).exp() + 2.0 * others)).ln();
        }
        want /= 4.0;
        assert!((tape.value(g.loss).item() - want).abs() < 1e-9);
    }

    #[test]
    fn finetune_freezes_encoder_and_separates() {
        let (sig, lab) = toy_data(64, 250, 4);
        let refs: Vec<&Signal> = sig.iter().collect();
        let mut m = ModelState::new(&EncoderConfig::toy(Variant::A), &HeadConfig::toy(), 5).unwrap();
        let enc = m.checksum(Component::Encoder);
        let cls = m.checksum(Component::Classifier);
        let cfg = TrainConfig {
            finetune_epochs: 60,
            ..small_cfg()
        };
        let rep = finetune(&mut m, &refs, &lab, &cfg, 1, &mut no_observer()).unwrap();
        assert_eq!(rep.encoder_checksum, enc);
        assert_eq!(m.checksum(Component::Encoder), enc);
        assert_ne!(m.checksum(Component::Classifier), cls);
        assert!(rep.train_accuracy >= 0.9, "train accuracy {}", rep.train_accuracy);
        assert!(finetune(&mut m, &[], &[], &cfg, 1, &mut no_observer()).is_err());
    }

    #[test]
    fn supervised_repeatable() {
        let (sig, lab) = toy_data(32, 250, 6);
        let refs: Vec<&Signal> = sig.iter().collect();
        let cfg = TrainConfig {
            finetune_epochs: 2,
            ..small_cfg()
        };
        let run = || {
            let mut m = ModelState::new(&EncoderConfig::toy(Variant::B), &HeadConfig::toy(), 2).unwrap();
            supervised_baseline(&mut m, (&refs, &lab), (&refs, &lab), &cfg, 3, &mut no_observer()).unwrap()
        };
        assert_eq!(run(), run());
    }
}
