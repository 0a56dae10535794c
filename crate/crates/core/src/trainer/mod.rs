//! Two-phase training: supervised encoder training with shift augmentation,
//! then decoder training on mixed supervised and cycle batches with the
//! encoder frozen. Checkpoints capture everything needed to resume.

mod checkpoint;
mod phase1;
mod phase2;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NetSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use phase1::{train_encoder, EncoderReport};
pub use phase2::{reconstruct, train_decoder, DecoderTrainer, EpochLosses};

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{LrSchedule, Tensor};
use crate::error::{Error, Result};
use crate::nets::NetConfig;
use crate::objectives::{EncoderNorm, LossWeights};
use crate::seeds::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub schedule: LrSchedule,
    /// Largest translation in pixels along each axis.
    pub shift_max: usize,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Phase1Config {
            epochs: 80,
            batch_size: 32,
            momentum: 0.9,
            schedule: LrSchedule::milestones(0.1, &[(40, 0.01), (60, 0.001)]),
            shift_max: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// Fractions of (paired, unlabeled images, unlabeled responses).
    pub mix: [f64; 3],
    /// Feed repeat-averaged test responses to the response cycle.
    pub average_repeats: bool,
    pub encoder_norm: EncoderNorm,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Phase2Config {
            epochs: 150,
            batch_size: 64,
            schedule: LrSchedule::step_decay(1e-3, 0.2, 30),
            mix: [0.6, 0.2, 0.2],
            average_repeats: true,
            encoder_norm: EncoderNorm::Fixed,
        }
    }
}

/// Which self-supervised terms take part in phase 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub enable_ed: bool,
    pub enable_de: bool,
    /// Withhold each test stimulus's own response from the decoder that
    /// reconstructs it.
    pub exclude_target_fmri: bool,
    /// Number of folds the test stimuli are split into when excluding
    /// targets; each fold gets its own decoder.
    pub exclusion_folds: usize,
}

impl Default for Ablation {
    fn default() -> Self {
        AblationPreset::D.flags()
    }
}

/// The four ladder configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationPreset {
    /// Supervised only.
    B,
    /// Supervised plus the image cycle.
    C,
    /// Full method.
    D,
    /// Full method without each target's own response.
    E,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 4] = [AblationPreset::B, AblationPreset::C, AblationPreset::D, AblationPreset::E];

    pub fn flags(self) -> Ablation {
        let (enable_ed, enable_de, exclude_target_fmri) = match self {
            AblationPreset::B => (false, false, false),
            AblationPreset::C => (true, false, false),
            AblationPreset::D => (true, true, false),
            AblationPreset::E => (true, true, true),
        };
        Ablation { enable_ed, enable_de, exclude_target_fmri, exclusion_folds: 2 }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationPreset::B => "b",
            AblationPreset::C => "c",
            AblationPreset::D => "d",
            AblationPreset::E => "e",
        }
    }
}

impl FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b" => Ok(AblationPreset::B),
            "c" => Ok(AblationPreset::C),
            "d" => Ok(AblationPreset::D),
            "e" => Ok(AblationPreset::E),
            _ => Err(Error::Config(format!("unknown ablation `{s}`, expected b, c, d or e"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub ablation: Ablation,
    pub loss: LossWeights,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.phase1.epochs == 0 || self.phase2.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.phase1.batch_size < 2 || self.phase2.batch_size == 0 {
            return bad("phase-1 batch size must be at least 2 and phase-2 at least 1".into());
        }
        if !(0.0..1.0).contains(&self.phase1.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.phase1.momentum));
        }
        self.phase1.schedule.validate()?;
        self.phase2.schedule.validate()?;
        check_mix(&self.phase2.mix)?;
        if self.ablation.exclude_target_fmri && self.ablation.exclusion_folds < 2 {
            return bad("target exclusion needs at least 2 folds".into());
        }
        self.loss.validate()
    }

    /// Hash identifying a training run: the network and training configs.
    pub fn hash_with(&self, net: &NetConfig) -> Result<u64> {
        crate::io::config_hash(&serde_json::json!({ "net": net, "train": self }))
    }
}

fn check_mix(mix: &[f64; 3]) -> Result<()> {
    let sum: f64 = mix.iter().sum();
    if mix.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("mix fractions must be nonnegative and sum to 1, got {mix:?}")));
    }
    Ok(())
}

/// Sub-batch sizes by largest-remainder rounding of `mix * batch_size`.
///
/// Each part first gets the floor of its quota; the leftover slots go to the
/// largest fractional remainders, ties to the earlier part.
pub fn mix_sizes(batch_size: usize, mix: &[f64; 3]) -> Result<[usize; 3]> {
    check_mix(mix)?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let quota = mix.map(|f| f * batch_size as f64);
    // absorb representation error such as 0.6 * 5 = 2.9999999999999996
    let mut sizes = quota.map(|q| (q + 1e-9).floor() as usize);
    let rem = [0, 1, 2].map(|i| (quota[i] - sizes[i] as f64).max(0.0));
    let mut order = [0usize, 1, 2];
    // remainders within 1e-9 are ties, so float noise cannot reorder them
    let key = rem.map(|r| (r * 1e9).round() as u64);
    order.sort_by(|&a, &b| key[b].cmp(&key[a]).then(a.cmp(&b)));
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().take(batch_size.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Offset `(dx, dy)` uniform on `[-shift_max, shift_max]^2`.
pub fn random_offset(shift_max: usize, seed: u64) -> (isize, isize) {
    let m = shift_max as isize;
    let mut rng = stream(seed, "shift", 0);
    (rng.gen_range(-m..=m), rng.gen_range(-m..=m))
}

/// Translates every image of an NCHW batch by `(dx, dy)`: the value at
/// `(x, y)` moves to `(x + dx, y + dy)` and vacated pixels are zero.
pub fn translate(images: &Tensor<f32>, dx: isize, dy: isize) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape("translate", format!("expected NCHW, got {s:?}")));
    }
    let (h, w) = (s[2] as isize, s[3] as isize);
    let src = images.data();
    let mut out = Tensor::zeros(s);
    let dst = out.data_mut();
    for (plane_in, plane_out) in src.chunks_exact((h * w) as usize).zip(dst.chunks_exact_mut((h * w) as usize)) {
        for y in 0.max(dy)..h.min(h + dy) {
            for x in 0.max(dx)..w.min(w + dx) {
                plane_out[(y * w + x) as usize] = plane_in[((y - dy) * w + x - dx) as usize];
            }
        }
    }
    Ok(out)
}

/// Shifts each image of the batch by its own offset; image `i` uses the
/// offset drawn from `(seed, i)`.
pub fn random_shift(images: &Tensor<f32>, shift_max: usize, seed: u64) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape("random_shift", format!("expected NCHW, got {s:?}")));
    }
    if shift_max * 4 >= s[2].min(s[3]) {
        return Err(Error::Config(format!("shift_max {shift_max} must be below a quarter of the image side")));
    }
    let mut parts = Vec::with_capacity(s[0]);
    for i in 0..s[0] {
        let (dx, dy) = random_offset(shift_max, crate::seeds::derive_seed(seed, "shift.image", i as u64));
        parts.push(translate(&images.select_rows(&[i])?, dx, dy)?);
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_examples() {
        let m = [0.6, 0.2, 0.2];
        assert_eq!(mix_sizes(10, &m).unwrap(), [6, 2, 2]);
        assert_eq!(mix_sizes(5, &m).unwrap(), [3, 1, 1]);
        assert_eq!(mix_sizes(7, &[1.0, 0.0, 0.0]).unwrap(), [7, 0, 0]);
        assert_eq!(mix_sizes(64, &m).unwrap(), [38, 13, 13]);
        assert!(mix_sizes(4, &[0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn translate_moves_right() {
        let img = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f32 + 1.0);
        let out = translate(&img, 1, 0).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 2.0, 0.0, 4.0, 5.0, 0.0, 7.0, 8.0]);
        assert_eq!(translate(&img, 0, 0).unwrap(), img);
    }

    #[test]
    fn shift_precondition() {
        let img = Tensor::zeros(&[2, 1, 8, 8]);
        assert!(random_shift(&img, 2, 0).is_err());
        assert!(random_shift(&img, 1, 0).is_ok());
    }

    #[test]
    fn presets_parse() {
        assert!(!"c".parse::<AblationPreset>().unwrap().flags().enable_de);
        assert!("x".parse::<AblationPreset>().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
