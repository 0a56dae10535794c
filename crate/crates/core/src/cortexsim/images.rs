use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::io::read_pnm_dir;
use crate::seeds::stream;

/// In-place 2-D FFT of a square row-major buffer.
fn fft2(buf: &mut [Complex64], side: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(side) } else { planner.plan_fft_forward(side) };
    for row in buf.chunks_exact_mut(side) {
        fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); side];
    for x in 0..side {
        for y in 0..side {
            col[y] = buf[y * side + x];
        }
        fft.process(&mut col);
        for y in 0..side {
            buf[y * side + x] = col[y];
        }
    }
}

/// Gaussian random field with a `1/f` amplitude spectrum (power `∝ f^-2`),
/// standardized to zero mean and unit variance.
pub fn gaussian_field(side: usize, seed: u64) -> Vec<f64> {
    let mut r = stream(seed, "field", 0);
    let mut buf: Vec<Complex64> =
        (0..side * side).map(|_| Complex64::new(StandardNormal.sample(&mut r), 0.0)).collect();
    fft2(&mut buf, side, false);
    let freq = |k: usize| if k <= side / 2 { k as f64 } else { k as f64 - side as f64 };
    for y in 0..side {
        for x in 0..side {
            let f = freq(x).hypot(freq(y));
            buf[y * side + x] *= if f == 0.0 { 0.0 } else { 1.0 / f };
        }
    }
    fft2(&mut buf, side, true);
    let v: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    v.iter().map(|x| if std > 0.0 { (x - mean) / std } else { 0.0 }).collect()
}

/// One procedural image: a `1/f` field with a few opaque dead-leaves discs
/// painted over it, clipped to `[0, 1]`. Planar `[C, S, S]`.
fn sample_image(side: usize, channels: usize, seed: u64, index: u64) -> Vec<f32> {
    let mut r = stream(seed, "image", index);
    let lum = gaussian_field(side, r.gen());
    let mut planes: Vec<Vec<f64>> = (0..channels)
        .map(|_| {
            let tint = if channels == 1 { vec![0.0; side * side] } else { gaussian_field(side, r.gen()) };
            let base = r.gen_range(0.35..0.65);
            lum.iter().zip(&tint).map(|(l, t)| base + 0.15 * l + 0.05 * t).collect()
        })
        .collect();
    let discs = r.gen_range(2..=6);
    let s = side as f64;
    for _ in 0..discs {
        let (cx, cy) = (r.gen_range(0.0..s), r.gen_range(0.0..s));
        let radius = r.gen_range(s / 16.0..s / 4.0);
        let grey: f64 = r.gen_range(0.0..1.0);
        let colour: Vec<f64> = (0..channels).map(|_| (grey + r.gen_range(-0.15..0.15)).clamp(0.0, 1.0)).collect();
        for y in 0..side {
            for x in 0..side {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= radius * radius {
                    for (plane, c) in planes.iter_mut().zip(&colour) {
                        // keep a little texture inside each disc
                        plane[y * side + x] = c + 0.03 * lum[y * side + x];
                    }
                }
            }
        }
    }
    planes.into_iter().flatten().map(|v| v.clamp(0.0, 1.0) as f32).collect()
}

/// `n` images `[n, C, S, S]`; image `i` depends only on `(seed, start + i)`.
pub fn sample_images(n: usize, side: usize, channels: usize, seed: u64) -> Result<Tensor<f32>> {
    sample_image_range(0, n, side, channels, seed)
}

pub(crate) fn sample_image_range(start: u64, n: usize, side: usize, channels: usize, seed: u64) -> Result<Tensor<f32>> {
    if n == 0 || side < 2 {
        return Err(Error::Config("need at least one image of side >= 2".into()));
    }
    let data = (0..n as u64).flat_map(|i| sample_image(side, channels, seed, start + i)).collect();
    Tensor::new(vec![n, channels, side, side], data)
}

/// Loads a directory of 8-bit PGM/PPM files as an image pool. Every file
/// must match the requested side and channel count.
pub fn images_from_pnm(dir: impl AsRef<Path>, side: usize, channels: usize) -> Result<Tensor<f32>> {
    let imgs = read_pnm_dir(dir)?;
    if imgs.is_empty() {
        return Err(Error::Data("no .pgm/.ppm images found".into()));
    }
    let mut data = Vec::with_capacity(imgs.len() * channels * side * side);
    for img in &imgs {
        if img.height != side || img.width != side || img.channels != channels {
            return Err(Error::Data(format!(
                "image is {}x{}x{}, expected {channels}x{side}x{side}",
                img.channels, img.height, img.width
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![imgs.len(), channels, side, side], data)
}
