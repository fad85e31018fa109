//! Encoders A (residual) and B (plain), the projection head and the classifier.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    checkpoint, conv1d_output_len, pool_output_len, Bound, ParamId, ParamKind, ParamStore, Tape, Tensor, Var,
    BN_MOMENTUM,
};
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::A, Variant::B];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            _ => Err(Error::InvalidArgument(format!("unknown encoder variant {s:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::A => "A",
            Variant::B => "B",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Residual block: two "same"-padded convolutions, so `kernel` must be odd.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
}

pub const NUM_BLOCKS: usize = 4;
pub const NUM_POOLS: usize = 3;

/// Layer layout: stem conv, then block 1..4 with a max-pool after each of
/// the first three blocks, then flatten.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub input_len: usize,
    pub stem: ConvSpec,
    pub blocks: Vec<BlockSpec>,
    pub pools: Vec<PoolSpec>,
    pub expected_flatten: usize,
}

impl EncoderConfig {
    /// 12 x 1000 input (10 s at 100 Hz) to 384 x 20 = 7680 features.
    pub fn full(variant: Variant) -> Self {
        let b = |out_channels| BlockSpec { out_channels, kernel: 7 };
        EncoderConfig {
            variant,
            in_channels: 12,
            input_len: 1000,
            stem: ConvSpec {
                out_channels: 32,
                kernel: 7,
                stride: 1,
                padding: 3,
            },
            blocks: vec![b(64), b(128), b(256), b(384)],
            pools: vec![
                PoolSpec { kernel: 5, stride: 5 },
                PoolSpec { kernel: 5, stride: 5 },
                PoolSpec { kernel: 2, stride: 2 },
            ],
            expected_flatten: 7680,
        }
    }

    /// Reduced encoder for 12 x 250 inputs, used by the toy experiments.
    pub fn toy(variant: Variant) -> Self {
        let b = |out_channels| BlockSpec { out_channels, kernel: 5 };
        EncoderConfig {
            variant,
            in_channels: 12,
            input_len: 250,
            stem: ConvSpec {
                out_channels: 8,
                kernel: 5,
                stride: 1,
                padding: 2,
            },
            blocks: vec![b(8), b(16), b(16), b(16)],
            pools: vec![PoolSpec { kernel: 2, stride: 2 }; 3],
            expected_flatten: 16 * 31,
        }
    }

    /// Walks the layer shapes; returns the flatten width.
    pub fn flatten_size(&self) -> Result<usize> {
        let bad = |d: String| Err(Error::InvalidArgument(d));
        if self.blocks.len() != NUM_BLOCKS || self.pools.len() != NUM_POOLS {
            return bad(format!(
                "encoder needs {NUM_BLOCKS} blocks and {NUM_POOLS} pools, got {} and {}",
                self.blocks.len(),
                self.pools.len()
            ));
        }
        if self.in_channels == 0 || self.stem.out_channels == 0 || self.stem.kernel == 0 || self.stem.stride == 0 {
            return bad("stem sizes must be positive".into());
        }
        let mut len = conv1d_output_len(self.input_len, self.stem.kernel, self.stem.stride, self.stem.padding)
            .ok_or_else(|| Error::InvalidArgument(format!("input length {} too short for the stem", self.input_len)))?;
        for (i, blk) in self.blocks.iter().enumerate() {
            if blk.kernel % 2 == 0 || blk.out_channels == 0 {
                return bad(format!("block {} needs an odd kernel and positive width", i + 1));
            }
            if let Some(p) = self.pools.get(i) {
                if p.kernel == 0 || p.stride == 0 {
                    return bad(format!("pool {} sizes must be positive", i + 1));
                }
                len = pool_output_len(len, p.kernel, p.stride)
                    .ok_or_else(|| Error::InvalidArgument(format!("length {len} too short for pool {}", i + 1)))?;
            }
        }
        Ok(self.blocks[NUM_BLOCKS - 1].out_channels * len)
    }

    pub fn validate(&self) -> Result<usize> {
        let computed = self.flatten_size()?;
        if computed != self.expected_flatten {
            return Err(Error::FlattenSize {
                computed,
                expected: self.expected_flatten,
            });
        }
        Ok(computed)
    }
}

/// Output widths of the four linear layers of each head; input width is the
/// encoder's flatten size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub projection: Vec<usize>,
    pub classifier: Vec<usize>,
    pub projection_final_relu: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            projection: vec![2048, 512, 128, 64],
            classifier: vec![512, 128, 32, NUM_CLASSES],
            projection_final_relu: false,
        }
    }
}

impl HeadConfig {
    pub fn toy() -> Self {
        HeadConfig {
            projection: vec![64, 64, 32, 32],
            classifier: vec![32, 16, 16, NUM_CLASSES],
            projection_final_relu: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.projection.len() != 4 || self.classifier.len() != 4 {
            return Err(Error::InvalidArgument("each head has exactly 4 linear layers".into()));
        }
        if self.projection.iter().chain(&self.classifier).any(|&w| w == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if self.classifier[3] != NUM_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "classifier output must be {NUM_CLASSES}, got {}",
                self.classifier[3]
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

#[derive(Clone, Copy, Debug)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

fn add_bn(store: &mut ParamStore, name: &str, c: usize) -> BnIds {
    BnIds {
        gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[c], 1.0), ParamKind::Trainable),
        beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::Trainable),
        mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer),
        var: store.add(format!("{name}.running_var"), Tensor::filled(&[c], 1.0), ParamKind::Buffer),
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    conv1: ParamId,
    bn1: BnIds,
    conv2: ParamId,
    bn2: BnIds,
    skip: Option<ParamId>,
}

/// Batch statistics from one training-mode forward, to be folded into the
/// running estimates once the step is taken.
#[derive(Clone, Debug, Default)]
pub struct BnUpdates(Vec<(BnIds, Vec<f64>, Vec<f64>)>);

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    flatten: usize,
    store: ParamStore,
    stem: ParamId,
    stem_bn: BnIds,
    blocks: Vec<BlockIds>,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let flatten = config.validate()?;
        let mut rng = rng::stream(seed, &[0xe5c]);
        let mut store = ParamStore::new();
        let (cin, st) = (config.in_channels, config.stem);
        let stem = store.add(
            "encoder.stem.w",
            he_uniform(&[st.out_channels, cin, st.kernel], cin * st.kernel, &mut rng),
            ParamKind::Trainable,
        );
        let stem_bn = add_bn(&mut store, "encoder.stem.bn", st.out_channels);
        let mut c = st.out_channels;
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for (i, b) in config.blocks.iter().enumerate() {
            let p = format!("encoder.block{}", i + 1);
            let (o, k) = (b.out_channels, b.kernel);
            let conv1 = store.add(format!("{p}.conv1.w"), he_uniform(&[o, c, k], c * k, &mut rng), ParamKind::Trainable);
            let bn1 = add_bn(&mut store, &format!("{p}.bn1"), o);
            let conv2 = store.add(format!("{p}.conv2.w"), he_uniform(&[o, o, k], o * k, &mut rng), ParamKind::Trainable);
            let bn2 = add_bn(&mut store, &format!("{p}.bn2"), o);
            let skip = (config.variant == Variant::A && c != o)
                .then(|| store.add(format!("{p}.skip.w"), he_uniform(&[o, c, 1], c, &mut rng), ParamKind::Trainable));
            blocks.push(BlockIds {
                conv1,
                bn1,
                conv2,
                bn2,
                skip,
            });
            c = o;
        }
        Ok(Encoder {
            config: config.clone(),
            flatten,
            store,
            stem,
            stem_bn,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn flatten_size(&self) -> usize {
        self.flatten
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn bn(&self, tape: &mut Tape, p: &Bound, x: Var, ids: BnIds, mode: Mode, up: &mut BnUpdates) -> Result<Var> {
        let (g, b) = (p.var(ids.gamma), p.var(ids.beta));
        match mode {
            Mode::Train => {
                let (y, m) = tape.batchnorm_train(x, g, b)?;
                up.0.push((ids, m.mean, m.var));
                Ok(y)
            }
            Mode::Eval => {
                let (mean, var) = (self.store.get(ids.mean).data(), self.store.get(ids.var).data());
                tape.batchnorm_eval(x, g, b, mean, var)
            }
        }
    }

    /// `x` is `N x D x L`; returns `N x flatten`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mode: Mode) -> Result<(Var, BnUpdates)> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.config.in_channels || shape[2] != self.config.input_len {
            return Err(Error::shape(
                "encoder",
                format!(
                    "expected N x {} x {}, got {shape:?}",
                    self.config.in_channels, self.config.input_len
                ),
            ));
        }
        let mut up = BnUpdates::default();
        let st = self.config.stem;
        let h = tape.conv1d(x, p.var(self.stem), None, st.stride, st.padding)?;
        let h = self.bn(tape, p, h, self.stem_bn, mode, &mut up)?;
        let mut h = tape.elu(h);
        for (i, (ids, spec)) in self.blocks.iter().zip(&self.config.blocks).enumerate() {
            let pad = spec.kernel / 2;
            let y = tape.conv1d(h, p.var(ids.conv1), None, 1, pad)?;
            let y = self.bn(tape, p, y, ids.bn1, mode, &mut up)?;
            let y = tape.elu(y);
            let y = tape.conv1d(y, p.var(ids.conv2), None, 1, pad)?;
            let mut y = self.bn(tape, p, y, ids.bn2, mode, &mut up)?;
            if self.config.variant == Variant::A {
                let short = match ids.skip {
                    Some(w) => tape.conv1d(h, p.var(w), None, 1, 0)?,
                    None => h,
                };
                y = tape.add(y, short)?;
            }
            h = tape.elu(y);
            if let Some(pool) = self.config.pools.get(i) {
                h = tape.maxpool1d(h, pool.kernel, pool.stride)?;
            }
        }
        Ok((tape.flatten(h)?, up))
    }

    /// Folds batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, up: &BnUpdates) {
        for (ids, mean, var) in &up.0 {
            for (r, m) in self.store.get_mut(ids.mean).data_mut().iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in self.store.get_mut(ids.var).data_mut().iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }

    /// Eval-mode features for a batch, outside any training graph.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (h, _) = self.forward(&mut tape, &p, xv, Mode::Eval)?;
        Ok(tape.value(h).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    Linear,
    Relu,
    Sigmoid,
}

/// Stack of linear layers with ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    store: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
    output: Output,
    in_features: usize,
}

impl Mlp {
    pub fn new(prefix: &str, in_features: usize, widths: &[usize], output: Output, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[prefix.len() as u64, prefix.bytes().map(u64::from).sum()]);
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = in_features;
        for (i, &w) in widths.iter().enumerate() {
            let wid = store.add(
                format!("{prefix}.fc{}.w", i + 1),
                he_uniform(&[w, fan_in], fan_in, &mut rng),
                ParamKind::Trainable,
            );
            let bid = store.add(format!("{prefix}.fc{}.b", i + 1), Tensor::zeros(&[w]), ParamKind::Trainable);
            layers.push((wid, bid));
            fan_in = w;
        }
        Mlp {
            store,
            layers,
            output,
            in_features,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.layers.last().map_or(self.in_features, |&(w, _)| self.store.get(w).shape()[0])
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.linear(h, p.var(w), p.var(b))?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(match self.output {
            Output::Linear => h,
            Output::Relu => tape.relu(h),
            Output::Sigmoid => tape.sigmoid(h),
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Encoder,
    Projection,
    Classifier,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Encoder, Component::Projection, Component::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Projection => "projection",
            Component::Classifier => "classifier",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownComponent(s.to_string()))
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Encoder E, projection head G and classifier C with per-component freeze flags.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub encoder: Encoder,
    pub projection: Mlp,
    pub classifier: Mlp,
    frozen: [bool; 3],
}

impl ModelState {
    pub fn new(enc: &EncoderConfig, heads: &HeadConfig, seed: u64) -> Result<Self> {
        heads.validate()?;
        let encoder = Encoder::new(enc, seed)?;
        let f = encoder.flatten_size();
        let proj_out = if heads.projection_final_relu {
            Output::Relu
        } else {
            Output::Linear
        };
        Ok(ModelState {
            projection: Mlp::new("projection", f, &heads.projection, proj_out, seed),
            classifier: Mlp::new("classifier", f, &heads.classifier, Output::Sigmoid, seed),
            encoder,
            frozen: [false; 3],
        })
    }

    pub fn store(&self, c: Component) -> &ParamStore {
        match c {
            Component::Encoder => self.encoder.store(),
            Component::Projection => self.projection.store(),
            Component::Classifier => self.classifier.store(),
        }
    }

    pub fn store_mut(&mut self, c: Component) -> &mut ParamStore {
        match c {
            Component::Encoder => self.encoder.store_mut(),
            Component::Projection => self.projection.store_mut(),
            Component::Classifier => self.classifier.store_mut(),
        }
    }

    pub fn freeze(&mut self, c: Component) {
        self.frozen[c.index()] = true;
    }

    pub fn unfreeze(&mut self, c: Component) {
        self.frozen[c.index()] = false;
    }

    pub fn is_frozen(&self, c: Component) -> bool {
        self.frozen[c.index()]
    }

    pub fn checksum(&self, c: Component) -> u64 {
        self.store(c).checksum()
    }

    pub fn num_trainable(&self, c: Component) -> usize {
        self.store(c).num_trainable()
    }

    /// Batch of `N x 5` class probabilities in eval mode.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.classifier.apply(&self.encoder.encode(x)?)
    }

    pub fn entries(&self, components: &[Component]) -> Vec<(String, Tensor)> {
        components.iter().flat_map(|&c| self.store(c).to_entries()).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>, components: &[Component]) -> Result<()> {
        checkpoint::save(path, &self.entries(components))
    }

    /// Loads the named components from a checkpoint; others are untouched.
    pub fn load(&mut self, path: impl AsRef<Path>, components: &[Component]) -> Result<()> {
        let entries = checkpoint::load(path)?;
        for &c in components {
            self.store_mut(c).load_entries(&entries)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(n: usize, d: usize, l: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[]);
        Tensor::new(vec![n, d, l], (0..n * d * l).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn full_encoder_output_width() {
        let e = Encoder::new(&EncoderConfig::full(Variant::A), 1).unwrap();
        let h = e.encode(&input(2, 12, 1000, 2)).unwrap();
        assert_eq!(h.shape(), &[2, 7680]);
        assert!(h.all_finite());
    }

    #[test]
    fn flatten_mismatch_reports_computed_size() {
        let mut c = EncoderConfig::toy(Variant::A);
        c.expected_flatten = 7680;
        match Encoder::new(&c, 0) {
            Err(Error::FlattenSize { computed, expected }) => assert_eq!((computed, expected), (496, 7680)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelState::new(&EncoderConfig::toy(Variant::A), &HeadConfig::toy(), 7).unwrap();
        let b = ModelState::new(&EncoderConfig::toy(Variant::A), &HeadConfig::toy(), 7).unwrap();
        let c = ModelState::new(&EncoderConfig::toy(Variant::A), &HeadConfig::toy(), 8).unwrap();
        for comp in Component::ALL {
            assert_eq!(a.checksum(comp), b.checksum(comp));
            assert_ne!(a.checksum(comp), c.checksum(comp));
        }
        let g = a.encoder.store().find("encoder.block1.bn1.gamma").unwrap();
        assert!(a.encoder.store().get(g).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn variant_b_has_fewer_parameters() {
        for cfg in [EncoderConfig::toy, EncoderConfig::full] {
            let a = Encoder::new(&cfg(Variant::A), 0).unwrap();
            let b = Encoder::new(&cfg(Variant::B), 0).unwrap();
            assert!(b.store().num_trainable() < a.store().num_trainable());
        }
    }

    #[test]
    fn a_equals_b_with_zeroed_skips() {
        let mut cfg = EncoderConfig::toy(Variant::A);
        cfg.blocks = [12, 16, 20, 24].map(|out_channels| BlockSpec { out_channels, kernel: 3 }).to_vec();
        cfg.expected_flatten = 24 * 31;
        let mut a = Encoder::new(&cfg, 3).unwrap();
        cfg.variant = Variant::B;
        let mut b = Encoder::new(&cfg, 3).unwrap();
        let entries = a.store().to_entries();
        b.store_mut().load_entries(&entries).unwrap();
        for i in 1..=4 {
            let id = a.store().find(&format!("encoder.block{i}.skip.w")).unwrap();
            a.store_mut().get_mut(id).data_mut().fill(0.0);
        }
        let x = input(3, 12, 250, 4);
        let (ha, hb) = (a.encode(&x).unwrap(), b.encode(&x).unwrap());
        for (u, v) in ha.data().iter().zip(hb.data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn heads_and_modes() {
        let mut m = ModelState::new(&EncoderConfig::toy(Variant::A), &HeadConfig::toy(), 1).unwrap();
        let x = input(4, 12, 250, 9);
        let c = m.predict(&x).unwrap();
        assert_eq!(c.shape(), &[4, NUM_CLASSES]);
        assert!(c.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(m.encoder.encode(&x).unwrap(), m.encoder.encode(&x).unwrap());

        let zero = Tensor::zeros(&[1, m.projection.in_features()]);
        let z = m.projection.apply(&zero).unwrap();
        assert_eq!(z, m.projection.apply(&zero).unwrap());
        assert_eq!(z.shape(), &[1, 32]);

        // a training-mode forward moves the running statistics
        let before = m.checksum(Component::Encoder);
        let mut tape = Tape::new();
        let p = m.encoder.store().bind(&mut tape, true);
        let xv = tape.constant(x);
        let (_, up) = m.encoder.forward(&mut tape, &p, xv, Mode::Train).unwrap();
        m.encoder.apply_bn_updates(&up);
        assert_ne!(before, m.checksum(Component::Encoder));

        m.freeze(Component::Encoder);
        assert!(m.is_frozen(Component::Encoder));
        m.unfreeze(Component::Encoder);
        assert!(!m.is_frozen(Component::Encoder));
        assert!(matches!(Component::parse("decoder"), Err(Error::UnknownComponent(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let a = ModelState::new(&EncoderConfig::toy(Variant::B), &HeadConfig::toy(), 1).unwrap();
        a.save(&path, &Component::ALL).unwrap();
        let mut b = ModelState::new(&EncoderConfig::toy(Variant::B), &HeadConfig::toy(), 2).unwrap();
        b.load(&path, &[Component::Encoder]).unwrap();
        assert_eq!(a.checksum(Component::Encoder), b.checksum(Component::Encoder));
        assert_ne!(a.checksum(Component::Classifier), b.checksum(Component::Classifier));
    }
}
