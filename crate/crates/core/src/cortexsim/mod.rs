//! Synthetic ground truth: a linear "brain" of Gabor-like voxel receptive
//! fields with Gaussian measurement noise, a procedural image sampler and
//! cohort generation with repeat-measured test stimuli.

mod cohort;
mod images;

pub use cohort::{
    average_repeats, generate_cohort, generate_cohort_from_pools, simulate, snr_per_voxel, snr_screen, Cohort,
    CohortConfig,
};
pub use images::{gaussian_field, images_from_pnm, sample_images};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::seeds::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Identity,
    Softplus,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => x,
            Nonlinearity::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }
}

/// Voxels with fixed unit-norm receptive fields and per-voxel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBrain {
    voxel_count: usize,
    image_side: usize,
    channels: usize,
    /// `[V, C * S * S]`, row-major.
    filters: Vec<f64>,
    nonlinearity: Nonlinearity,
    noise_sigma: Vec<f64>,
    seed: u64,
}

/// A Gaussian-windowed oriented grating with its DC response removed, unit
/// norm. Envelopes are small (σ between 4% and 12% of the side) with a
/// carrier wavelength of 2 to 4 σ.
fn receptive_field(side: usize, channels: usize, seed: u64, voxel: u64) -> Vec<f64> {
    let mut r = stream(seed, "brain.rf", voxel);
    let s = side as f64;
    let (cx, cy) = (r.gen_range(0.15..0.85) * s, r.gen_range(0.15..0.85) * s);
    let sigma = r.gen_range(0.04..0.12) * s;
    let wavelength = sigma * r.gen_range(2.0..4.0);
    let theta = r.gen_range(0.0..std::f64::consts::PI);
    let phase = r.gen_range(0.0..std::f64::consts::TAU);
    let colour: Vec<f64> =
        if channels == 1 { vec![1.0] } else { (0..channels).map(|_| r.gen_range(0.2..1.0)).collect() };
    let (ct, st) = (theta.cos(), theta.sin());
    let mut env = Vec::with_capacity(side * side);
    let mut carrier = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            env.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
            carrier.push((std::f64::consts::TAU * (dx * ct + dy * st) / wavelength + phase).cos());
        }
    }
    // remove the DC response so the voxel ignores mean luminance
    let dc = env.iter().zip(&carrier).map(|(e, c)| e * c).sum::<f64>() / env.iter().sum::<f64>();
    let mut f = Vec::with_capacity(channels * side * side);
    for w in &colour {
        f.extend(env.iter().zip(&carrier).map(|(e, c)| w * e * (c - dc)));
    }
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    f.iter_mut().for_each(|v| *v /= norm);
    f
}

/// Builds a brain with the same noise level on every voxel.
pub fn make_brain(
    voxel_count: usize,
    image_side: usize,
    channels: usize,
    noise_sigma: f64,
    nonlinearity: Nonlinearity,
    seed: u64,
) -> Result<SyntheticBrain> {
    if voxel_count == 0 || image_side == 0 {
        return Err(Error::Config("brain needs at least one voxel and a nonempty image".into()));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("channels must be 1 or 3, got {channels}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma must be finite and non-negative, got {noise_sigma}")));
    }
    let filters = (0..voxel_count as u64).flat_map(|v| receptive_field(image_side, channels, seed, v)).collect();
    Ok(SyntheticBrain {
        voxel_count,
        image_side,
        channels,
        filters,
        nonlinearity,
        noise_sigma: vec![noise_sigma; voxel_count],
        seed,
    })
}

impl SyntheticBrain {
    pub fn voxel_count(&self) -> usize {
        self.voxel_count
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn noise_sigma(&self) -> &[f64] {
        &self.noise_sigma
    }

    fn pixels(&self) -> usize {
        self.channels * self.image_side * self.image_side
    }

    pub fn filter(&self, voxel: usize) -> &[f64] {
        let p = self.pixels();
        &self.filters[voxel * p..(voxel + 1) * p]
    }

    pub fn checksum(&self) -> u64 {
        crate::io::fnv1a64(&self.filters.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
    }

    pub fn set_noise_sigma(&mut self, sigma: Vec<f64>) -> Result<()> {
        if sigma.len() != self.voxel_count || sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("need one finite non-negative noise level per voxel".into()));
        }
        self.noise_sigma = sigma;
        Ok(())
    }

    /// Sets each voxel's noise so that signal variance over `images`
    /// divided by noise variance equals `snr`.
    pub fn calibrate_noise(&mut self, images: &Tensor<f32>, snr: f64) -> Result<()> {
        if !(snr > 0.0 && snr.is_finite()) {
            return Err(Error::Config(format!("snr must be positive, got {snr}")));
        }
        let clean = self.noiseless(images)?;
        let n = clean.rows();
        if n < 2 {
            return Err(Error::Data("noise calibration needs at least two images".into()));
        }
        let v = self.voxel_count;
        let sigma = (0..v)
            .map(|j| {
                let col: Vec<f64> = (0..n).map(|i| clean.data()[i * v + j] as f64).collect();
                let mean = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                (var / snr).sqrt()
            })
            .collect();
        self.set_noise_sigma(sigma)
    }

    fn check_image(&self, len: usize) -> Result<()> {
        if len != self.pixels() {
            return Err(Error::Data(format!(
                "image has {len} values, brain expects {}x{}x{}",
                self.channels, self.image_side, self.image_side
            )));
        }
        Ok(())
    }

    fn drive(&self, image: &[f32]) -> Vec<f64> {
        (0..self.voxel_count)
            .map(|v| {
                let dot: f64 = self.filter(v).iter().zip(image).map(|(f, &x)| f * x as f64).sum();
                self.nonlinearity.apply(dot)
            })
            .collect()
    }

    /// Noise-free response to one image.
    pub fn respond_clean(&self, image: &[f32]) -> Result<Vec<f32>> {
        self.check_image(image.len())?;
        Ok(self.drive(image).into_iter().map(|v| v as f32).collect())
    }

    /// One noisy measurement; the noise draw is keyed by `noise_seed`.
    pub fn respond(&self, image: &[f32], noise_seed: u64) -> Result<Vec<f32>> {
        self.check_image(image.len())?;
        let mut r = stream(noise_seed, "brain.noise", 0);
        Ok(self
            .drive(image)
            .into_iter()
            .zip(&self.noise_sigma)
            .map(|(x, s)| {
                let z: f64 = StandardNormal.sample(&mut r);
                (x + s * z) as f32
            })
            .collect())
    }

    /// Noise-free responses `[N, V]` to an image batch `[N, C, S, S]`.
    pub fn noiseless(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = images.rows();
        let mut out = Vec::with_capacity(n * self.voxel_count);
        for i in 0..n {
            out.extend(self.respond_clean(images.row(i))?);
        }
        Tensor::new(vec![n, self.voxel_count], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filters_are_unit_norm_and_seeded() {
        let b = make_brain(20, 16, 3, 0.0, Nonlinearity::Identity, 5).unwrap();
        for v in 0..20 {
            let n: f64 = b.filter(v).iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
        assert_eq!(b, make_brain(20, 16, 3, 0.0, Nonlinearity::Identity, 5).unwrap());
        assert_ne!(b.checksum(), make_brain(20, 16, 3, 0.0, Nonlinearity::Identity, 6).unwrap().checksum());
    }

    #[test]
    fn zero_image_and_purity() {
        let b = make_brain(8, 8, 1, 0.0, Nonlinearity::Identity, 1).unwrap();
        assert!(b.respond(&[0.0; 64], 3).unwrap().iter().all(|&v| v == 0.0));
        let img: Vec<f32> = (0..64).map(|i| i as f32 / 64.0).collect();
        assert_eq!(b.respond(&img, 1).unwrap(), b.respond(&img, 2).unwrap());
        assert!(b.respond(&[0.0; 10], 0).is_err());
    }

    #[test]
    fn softplus_is_positive_and_stable() {
        for x in [-800.0, -3.0, 0.0, 3.0, 800.0] {
            let y = Nonlinearity::Softplus.apply(x);
            assert!(y.is_finite() && y >= 0.0);
        }
        assert!((Nonlinearity::Softplus.apply(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn noise_std_matches_sigma() {
        let b = make_brain(4, 8, 1, 0.3, Nonlinearity::Identity, 2).unwrap();
        let img: Vec<f32> = (0..64).map(|i| ((i * 7) % 11) as f32 / 11.0).collect();
        let clean = b.respond_clean(&img).unwrap();
        let draws = 10_000;
        let mut ss = [0.0f64; 4];
        for k in 0..draws {
            let r = b.respond(&img, k).unwrap();
            for v in 0..4 {
                ss[v] += ((r[v] - clean[v]) as f64).powi(2);
            }
        }
        for s in ss {
            let std = (s / draws as f64).sqrt();
            assert!((std / 0.3 - 1.0).abs() < 0.03, "{std}");
        }
    }
}
