//! Encoder (image → voxels), decoder (voxels → image) and the fixed
//! convolutional feature bank.
//!
//! Decoder: fully connected layer to `decoder_channels` maps of
//! `base_side × base_side`, then `n_blocks` × [3×3 conv + ReLU, ×2 nearest
//! upsampling, batch norm], then a 3×3 conv to the image channels and a
//! sigmoid.
//!
//! Encoder: fixed front-end filter bank + batch norm, then `n_blocks` ×
//! [3×3 stride-2 conv + ReLU, batch norm], then a fully connected layer to
//! voxel space.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::engine::{conv_out_len, fans, glorot_normal, ChannelStats, Element, Mode, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Batch statistics of each batch-norm layer touched by one forward pass.
type BatchStats<T> = Vec<(String, ChannelStats<T>)>;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Architecture hyper-parameters shared by the encoder and decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub image_side: usize,
    pub channels: usize,
    pub voxel_count: usize,
    /// Decoder seed resolution; the decoder doubles it `n_blocks` times.
    pub base_side: usize,
    pub decoder_channels: usize,
    pub encoder_channels: usize,
    pub n_blocks: usize,
    pub front_filters: usize,
    pub front_kernel: usize,
    pub front_stride: usize,
    /// Filters of the two feature-bank stages.
    pub feature_channels: [usize; 2],
    /// Seed of the fixed feature bank.
    pub seed: u64,
}

impl NetConfig {
    /// 112×112 layout: 64 maps at 14×14, three blocks, 32-channel encoder.
    pub fn full_scale(voxel_count: usize, channels: usize) -> Self {
        NetConfig {
            image_side: 112,
            channels,
            voxel_count,
            base_side: 14,
            decoder_channels: 64,
            encoder_channels: 32,
            n_blocks: 3,
            front_filters: 64,
            front_kernel: 11,
            front_stride: 4,
            feature_channels: [16, 32],
            seed: 0,
        }
    }

    /// 32×32 layout used for CPU experiments.
    pub fn desk(voxel_count: usize, channels: usize) -> Self {
        NetConfig {
            image_side: 32,
            channels,
            voxel_count,
            base_side: 4,
            decoder_channels: 16,
            encoder_channels: 32,
            n_blocks: 3,
            front_filters: 32,
            front_kernel: 5,
            front_stride: 2,
            feature_channels: [8, 16],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.voxel_count == 0 {
            return bad("voxel_count must be at least 1".into());
        }
        if self.base_side == 0 || self.n_blocks > 16 || self.base_side << self.n_blocks != self.image_side {
            return bad(format!(
                "image_side {} must equal base_side {} * 2^{}",
                self.image_side, self.base_side, self.n_blocks
            ));
        }
        if [self.decoder_channels, self.encoder_channels, self.front_filters, self.front_kernel, self.front_stride]
            .contains(&0)
            || self.feature_channels.contains(&0)
        {
            return bad("channel counts, kernel and stride must be positive".into());
        }
        if self.encoder_feature_side().is_none() {
            return bad(format!("encoder reduces a {0}x{0} image to nothing", self.image_side));
        }
        Ok(())
    }

    /// Spatial side of the front-end maps.
    pub fn front_side(&self) -> Option<usize> {
        conv_out_len(self.image_side, self.front_kernel, self.front_stride, self.front_kernel / 2)
    }

    /// Spatial side of the encoder maps entering the final dense layer.
    pub fn encoder_feature_side(&self) -> Option<usize> {
        (0..self.n_blocks).try_fold(self.front_side()?, |s, _| conv_out_len(s, 3, 2, 1))
    }
}

fn glorot<T: Element>(shape: &[usize], seed: u64, tag: &str) -> Result<Tensor<T>> {
    let (fi, fo) = fans(shape);
    glorot_normal(shape, fi, fo, crate::seeds::derive_seed(seed, tag, 0))
}

fn check_images(cfg: &NetConfig, shape: &[usize]) -> Result<()> {
    let want = [cfg.channels, cfg.image_side, cfg.image_side];
    if shape.len() != 4 || shape[1..] != want {
        return Err(Error::shape(
            "image batch",
            format!("expected [N, {}, {1}, {1}], got {shape:?}", cfg.channels, cfg.image_side),
        ));
    }
    Ok(())
}

/// Fixed random filters standing in for pretrained front-end and
/// perceptual-feature convolutions. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank<T: Element = f32> {
    front: Tensor<T>,
    stage1: Tensor<T>,
    stage2: Tensor<T>,
    seed: u64,
    front_stride: usize,
}

impl<T: Element> FeatureBank<T> {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let [f1, f2] = cfg.feature_channels;
        let k = cfg.front_kernel;
        Ok(FeatureBank {
            front: glorot(&[cfg.front_filters, c, k, k], cfg.seed, "bank.front")?,
            stage1: glorot(&[f1, c, 3, 3], cfg.seed, "bank.phi1")?,
            stage2: glorot(&[f2, f1, 3, 3], cfg.seed, "bank.phi2")?,
            seed: cfg.seed,
            front_stride: cfg.front_stride,
        })
    }

    pub fn front(&self) -> &Tensor<T> {
        &self.front
    }

    pub fn stages(&self) -> [&Tensor<T>; 2] {
        [&self.stage1, &self.stage2]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn checksum(&self) -> u64 {
        let parts = [self.front.checksum(), self.stage1.checksum(), self.stage2.checksum()];
        crate::io::fnv1a64(&parts.iter().flat_map(|p| p.to_le_bytes()).collect::<Vec<_>>())
    }

    /// Two conv+ReLU stages; returns `[N, F1 + F2]` with both stages'
    /// activations flattened per image.
    pub fn features<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.stage1.shape()[1] {
            return Err(Error::shape(
                "feature_extract",
                format!("image batch {s:?} vs bank for {} channels", self.stage1.shape()[1]),
            ));
        }
        let k1 = tape.constant(&self.stage1)?;
        let k2 = tape.constant(&self.stage2)?;
        let a1 = x.conv2d(k1, None, 1, 1)?.relu()?;
        let a2 = a1.conv2d(k2, None, 1, 1)?.relu()?;
        Var::concat_cols(&[a1.flatten_rows()?, a2.flatten_rows()?])
    }

    /// Eval-only convenience: `φ(s)` as a plain tensor.
    pub fn feature_extract(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let x = tape.constant(images)?;
        Ok(self.features(&tape, x)?.to_tensor())
    }
}

/// Running mean/variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub updates: u64,
}

impl<T: Element> RunningStats<T> {
    fn new(c: usize) -> Self {
        RunningStats { mean: vec![T::zero(); c], var: vec![T::one(); c], updates: 0 }
    }

    fn update(&mut self, batch: &ChannelStats<T>) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for i in 0..self.mean.len() {
            self.mean[i] = (T::one() - m) * self.mean[i] + m * batch.mean[i];
            self.var[i] = (T::one() - m) * self.var[i] + m * batch.var[i];
        }
        self.updates += 1;
    }
}

/// Trainable parameters, running statistics and frozen flag shared by both
/// networks.
#[derive(Debug, Clone)]
pub struct NetState<T: Element> {
    params: ParamStore<T>,
    running: IndexMap<String, RunningStats<T>>,
    frozen: bool,
}

impl<T: Element> NetState<T> {
    fn new(seed: u64) -> Self {
        NetState { params: ParamStore::new(seed), running: IndexMap::new(), frozen: false }
    }

    fn add_bn(&mut self, name: &str, c: usize) -> Result<()> {
        self.params.insert(format!("{name}.gamma"), Tensor::full(&[c], T::one()))?;
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]))?;
        self.running.insert(name.to_string(), RunningStats::new(c));
        Ok(())
    }

    fn add_layer(&mut self, name: &str, shape: &[usize], seed: u64) -> Result<()> {
        self.params.insert(format!("{name}.weight"), glorot(shape, seed, name)?)?;
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[shape[0]]))?;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Mutable access for optimizers; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore<T>> {
        if self.frozen {
            return Err(Error::Frozen(format!("store {}", self.params.rng_seed())));
        }
        Ok(&mut self.params)
    }

    pub fn running(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.running.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.params.zero_grad();
    }

    /// Checksum over parameters and running statistics.
    pub fn checksum(&self) -> u64 {
        let mut bytes = self.params.checksum().to_le_bytes().to_vec();
        for (name, r) in &self.running {
            bytes.extend_from_slice(name.as_bytes());
            for v in r.mean.iter().chain(&r.var) {
                v.write_le(&mut bytes);
            }
            bytes.extend_from_slice(&r.updates.to_le_bytes());
        }
        crate::io::fnv1a64(&bytes)
    }

    /// Replaces parameter values and running stats; shapes must match.
    pub fn load_from(
        &mut self,
        params: Vec<(String, Tensor<T>)>,
        running: Vec<(String, RunningStats<T>)>,
    ) -> Result<()> {
        for (name, t) in params {
            let dst = self.params.get_mut(&name)?;
            if dst.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        for (name, r) in running {
            let dst = self
                .running
                .get_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown batch-norm layer `{name}`")))?;
            if dst.mean.len() != r.mean.len() || dst.var.len() != r.var.len() {
                return Err(Error::Checkpoint(format!("running stats of `{name}` have wrong size")));
            }
            *dst = r;
        }
        Ok(())
    }

    fn cast<U: Element>(&self) -> NetState<U> {
        let mut params = ParamStore::new(self.params.rng_seed());
        for (name, t) in self.params.iter() {
            params.insert(name, t.cast()).expect("names are unique");
        }
        let running = self
            .running
            .iter()
            .map(|(k, r)| {
                let c = |v: &Vec<T>| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect();
                (k.clone(), RunningStats { mean: c(&r.mean), var: c(&r.var), updates: r.updates })
            })
            .collect();
        NetState { params, running, frozen: self.frozen }
    }

    fn var<'t>(&self, tape: &'t Tape<T>, name: &str) -> Result<Var<'t, T>> {
        if self.frozen {
            tape.frozen_param(&self.params, name)
        } else {
            tape.param(&self.params, name)
        }
    }

    fn batch_norm<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        name: &str,
        mode: Mode,
        stats: &mut Vec<(String, ChannelStats<T>)>,
    ) -> Result<Var<'t, T>> {
        let gamma = self.var(tape, &format!("{name}.gamma"))?;
        let beta = self.var(tape, &format!("{name}.beta"))?;
        let eps = T::from_f64_lossy(BN_EPS);
        match mode {
            Mode::Train => {
                let (y, s) = x.batch_norm_train(gamma, beta, eps)?;
                stats.push((name.to_string(), s));
                Ok(y)
            }
            Mode::Eval => {
                let r = &self.running[name];
                if r.updates == 0 {
                    return Err(Error::Config(format!("batch norm `{name}` has no running statistics yet")));
                }
                x.batch_norm_eval(gamma, beta, &r.mean, &r.var, eps)
            }
        }
    }

    fn apply_stats(&mut self, stats: Vec<(String, ChannelStats<T>)>) {
        for (name, s) in stats {
            self.running.get_mut(&name).expect("layer exists").update(&s);
        }
    }
}

/// Image → voxel network.
#[derive(Debug, Clone)]
pub struct Encoder<T: Element = f32> {
    config: NetConfig,
    front: Tensor<T>,
    state: NetState<T>,
}

/// Voxel → image network.
#[derive(Debug, Clone)]
pub struct Decoder<T: Element = f32> {
    config: NetConfig,
    state: NetState<T>,
}

pub fn build_encoder<T: Element>(config: &NetConfig, bank: &FeatureBank<T>, seed: u64) -> Result<Encoder<T>> {
    config.validate()?;
    let want = [config.front_filters, config.channels, config.front_kernel, config.front_kernel];
    if bank.front.shape() != want || bank.front_stride != config.front_stride {
        return Err(Error::Config(format!("feature bank front-end {:?} does not match config", bank.front.shape())));
    }
    let mut state = NetState::new(seed);
    state.add_bn("front_bn", config.front_filters)?;
    let mut c_in = config.front_filters;
    for i in 0..config.n_blocks {
        state.add_layer(&format!("block{i}.conv"), &[config.encoder_channels, c_in, 3, 3], seed)?;
        state.add_bn(&format!("block{i}.bn"), config.encoder_channels)?;
        c_in = config.encoder_channels;
    }
    let side = config.encoder_feature_side().expect("validated");
    state.add_layer("fc", &[config.voxel_count, c_in * side * side], seed)?;
    Ok(Encoder { config: config.clone(), front: bank.front.clone(), state })
}

pub fn build_decoder<T: Element>(config: &NetConfig, seed: u64) -> Result<Decoder<T>> {
    config.validate()?;
    let mut state = NetState::new(seed);
    let (cd, b) = (config.decoder_channels, config.base_side);
    state.add_layer("fc", &[cd * b * b, config.voxel_count], seed)?;
    for i in 0..config.n_blocks {
        state.add_layer(&format!("block{i}.conv"), &[cd, cd, 3, 3], seed)?;
        state.add_bn(&format!("block{i}.bn"), cd)?;
    }
    state.add_layer("out.conv", &[config.channels, cd, 3, 3], seed)?;
    Ok(Decoder { config: config.clone(), state })
}

impl<T: Element> Encoder<T> {
    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn state(&self) -> &NetState<T> {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut NetState<T> {
        &mut self.state
    }

    /// Fixed front-end filters (never trained).
    pub fn front(&self) -> &Tensor<T> {
        &self.front
    }

    pub fn freeze(&mut self) {
        self.state.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.state.is_frozen()
    }

    pub fn checksum(&self) -> u64 {
        crate::io::fnv1a64(&[self.state.checksum().to_le_bytes(), self.front.checksum().to_le_bytes()].concat())
    }

    pub fn cast<U: Element>(&self) -> Encoder<U> {
        Encoder { config: self.config.clone(), front: self.front.cast(), state: self.state.cast() }
    }

    fn run<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<(Var<'t, T>, BatchStats<T>)> {
        check_images(&self.config, &x.shape())?;
        let mut stats = Vec::new();
        let front = tape.constant(&self.front)?;
        let mut h = x.conv2d(front, None, self.config.front_stride, self.config.front_kernel / 2)?;
        h = self.state.batch_norm(tape, h, "front_bn", mode, &mut stats)?;
        for i in 0..self.config.n_blocks {
            let w = self.state.var(tape, &format!("block{i}.conv.weight"))?;
            let b = self.state.var(tape, &format!("block{i}.conv.bias"))?;
            h = h.conv2d(w, Some(b), 2, 1)?.relu()?;
            h = self.state.batch_norm(tape, h, &format!("block{i}.bn"), mode, &mut stats)?;
        }
        let w = self.state.var(tape, "fc.weight")?;
        let b = self.state.var(tape, "fc.bias")?;
        Ok((h.flatten_rows()?.fully_connected(w, Some(b))?, stats))
    }

    /// Training-mode forward: batch statistics, running stats updated.
    pub fn forward_train<'t>(&mut self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        if self.is_frozen() {
            return Err(Error::Frozen("encoder".into()));
        }
        let (y, stats) = self.run(tape, x, Mode::Train)?;
        self.state.apply_stats(stats);
        Ok(y)
    }

    /// Forward with batch statistics but without touching running stats.
    pub fn forward_batch_stats<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.run(tape, x, Mode::Train)?.0)
    }

    /// Evaluation-mode forward using running statistics.
    pub fn forward_eval<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.run(tape, x, Mode::Eval)?.0)
    }

    /// `r̂ = E(s)` in evaluation mode.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let x = tape.constant(images)?;
        Ok(self.forward_eval(&tape, x)?.to_tensor())
    }
}

impl<T: Element> Decoder<T> {
    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn state(&self) -> &NetState<T> {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut NetState<T> {
        &mut self.state
    }

    pub fn checksum(&self) -> u64 {
        self.state.checksum()
    }

    pub fn cast<U: Element>(&self) -> Decoder<U> {
        Decoder { config: self.config.clone(), state: self.state.cast() }
    }

    fn run<'t>(&self, tape: &'t Tape<T>, r: Var<'t, T>, mode: Mode) -> Result<(Var<'t, T>, BatchStats<T>)> {
        let s = r.shape();
        if s.len() != 2 || s[1] != self.config.voxel_count {
            return Err(Error::shape("decode", format!("expected [N, {}] voxels, got {s:?}", self.config.voxel_count)));
        }
        let (cd, b) = (self.config.decoder_channels, self.config.base_side);
        let mut stats = Vec::new();
        let w = self.state.var(tape, "fc.weight")?;
        let bias = self.state.var(tape, "fc.bias")?;
        let mut h = r.fully_connected(w, Some(bias))?.reshape(&[s[0], cd, b, b])?;
        for i in 0..self.config.n_blocks {
            let w = self.state.var(tape, &format!("block{i}.conv.weight"))?;
            let bias = self.state.var(tape, &format!("block{i}.conv.bias"))?;
            h = h.conv2d(w, Some(bias), 1, 1)?.relu()?.upsample2x()?;
            h = self.state.batch_norm(tape, h, &format!("block{i}.bn"), mode, &mut stats)?;
        }
        let w = self.state.var(tape, "out.conv.weight")?;
        let bias = self.state.var(tape, "out.conv.bias")?;
        Ok((h.conv2d(w, Some(bias), 1, 1)?.sigmoid()?, stats))
    }

    pub fn forward_train<'t>(&mut self, tape: &'t Tape<T>, r: Var<'t, T>) -> Result<Var<'t, T>> {
        if self.state.is_frozen() {
            return Err(Error::Frozen("decoder".into()));
        }
        let (y, stats) = self.run(tape, r, Mode::Train)?;
        self.state.apply_stats(stats);
        Ok(y)
    }

    pub fn forward_eval<'t>(&self, tape: &'t Tape<T>, r: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.run(tape, r, Mode::Eval)?.0)
    }

    /// `ŝ = D(r)` in evaluation mode.
    pub fn decode(&self, voxels: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let r = tape.constant(voxels)?;
        Ok(self.forward_eval(&tape, r)?.to_tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            image_side: 8,
            channels: 1,
            voxel_count: 5,
            base_side: 2,
            decoder_channels: 4,
            encoder_channels: 3,
            n_blocks: 2,
            front_filters: 4,
            front_kernel: 3,
            front_stride: 1,
            feature_channels: [2, 3],
            seed: 7,
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::desk(16, 3).validate().is_ok());
        assert!(NetConfig::full_scale(16, 3).validate().is_ok());
        let mut c = NetConfig::desk(16, 3);
        c.image_side = 48;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c = NetConfig::desk(0, 3);
        assert!(c.validate().is_err());
        c = NetConfig::desk(4, 2);
        assert!(c.validate().is_err());
    }

    #[test]
    fn output_sides() {
        let full = NetConfig::full_scale(10, 3);
        assert_eq!(full.base_side << full.n_blocks, 112);
        assert_eq!(NetConfig::desk(10, 1).base_side << 3, 32);
        // three stride-2 blocks on 32x32 maps
        assert_eq!((0..3).try_fold(32, |s, _| conv_out_len(s, 3, 2, 1)), Some(4));
        assert_eq!(NetConfig::desk(10, 1).encoder_feature_side(), Some(2));
    }

    #[test]
    fn eval_before_stats_is_error() {
        let d = build_decoder::<f32>(&tiny(), 1).unwrap();
        let r = Tensor::zeros(&[2, 5]);
        assert!(matches!(d.decode(&r), Err(Error::Config(_))));
    }

    #[test]
    fn decoder_shapes_and_range() {
        let mut d = build_decoder::<f64>(&tiny(), 1).unwrap();
        let r = Tensor::from_fn(&[3, 5], |i| (i as f64).sin() * 3.0);
        let tape = Tape::new();
        let x = tape.constant(&r).unwrap();
        let y = d.forward_train(&tape, x).unwrap();
        assert_eq!(y.shape(), vec![3, 1, 8, 8]);
        assert!(y.value().iter().all(|&v| v > 0.0 && v < 1.0));
        let z = d.decode(&Tensor::zeros(&[1, 5])).unwrap();
        assert_eq!(z.shape(), &[1, 1, 8, 8]);
        assert!(z.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(z, d.decode(&Tensor::zeros(&[1, 5])).unwrap());
    }

    #[test]
    fn encoder_shapes_and_dim_errors() {
        let cfg = tiny();
        let bank = FeatureBank::<f64>::new(&cfg).unwrap();
        let mut e = build_encoder(&cfg, &bank, 3).unwrap();
        let imgs = Tensor::from_fn(&[4, 1, 8, 8], |i| ((i * 7) % 11) as f64 / 11.0);
        let tape = Tape::new();
        let x = tape.constant(&imgs).unwrap();
        assert_eq!(e.forward_train(&tape, x).unwrap().shape(), vec![4, 5]);
        let r1 = e.encode(&imgs).unwrap();
        assert_eq!(r1, e.encode(&imgs).unwrap());
        assert!(e.encode(&Tensor::zeros(&[1, 3, 8, 8])).is_err());
        assert!(e.encode(&Tensor::zeros(&[1, 1, 16, 16])).is_err());
    }

    #[test]
    fn frozen_encoder_refuses_updates() {
        let cfg = tiny();
        let bank = FeatureBank::<f32>::new(&cfg).unwrap();
        let mut e = build_encoder(&cfg, &bank, 3).unwrap();
        e.freeze();
        assert!(matches!(e.state_mut().params_mut(), Err(Error::Frozen(_))));
        let tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[2, 1, 8, 8])).unwrap();
        assert!(e.forward_train(&tape, x).is_err());
    }

    #[test]
    fn bank_is_deterministic_and_discriminative() {
        let cfg = tiny();
        let a = FeatureBank::<f64>::new(&cfg).unwrap();
        assert_eq!(a.checksum(), FeatureBank::<f64>::new(&cfg).unwrap().checksum());
        let s1 = Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.3).sin().abs());
        let s2 = Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.7).cos().abs());
        let (f1, f2) = (a.feature_extract(&s1).unwrap(), a.feature_extract(&s2).unwrap());
        assert_eq!(f1, a.feature_extract(&s1).unwrap());
        assert_eq!(f1.shape(), &[1, (2 + 3) * 64]);
        let d: f64 = f1.data().iter().zip(f2.data()).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(d > 0.0);
    }
}
