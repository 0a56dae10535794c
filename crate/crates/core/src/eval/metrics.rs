use std::cell::Cell;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::seeds::{derive_seed, stream};

thread_local! {
    static CONSTANT_WARNINGS: Cell<u64> = const { Cell::new(0) };
}

/// Number of Pearson correlations on this thread that hit a constant input.
pub fn constant_input_warnings() -> u64 {
    CONSTANT_WARNINGS.with(Cell::get)
}

/// Sample Pearson correlation. A constant input gives 0 and a warning.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape("pearson", format!("need equal lengths >= 2, got {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        CONSTANT_WARNINGS.with(|c| c.set(c.get() + 1));
        log::warn!("pearson correlation of a constant vector; using 0");
        return Ok(0.0);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn flat(t: &Tensor<f32>, i: usize) -> Vec<f64> {
    t.row(i).iter().map(|&v| v as f64).collect()
}

/// Per-column correlation between predicted and observed responses `[N, V]`.
pub fn voxel_correlations(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<Vec<f64>> {
    if pred.shape() != target.shape() || pred.shape().len() != 2 {
        return Err(Error::shape("voxel_correlations", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let (n, v) = (pred.shape()[0], pred.shape()[1]);
    (0..v)
        .map(|j| {
            let a: Vec<f64> = (0..n).map(|i| pred.data()[i * v + j] as f64).collect();
            let b: Vec<f64> = (0..n).map(|i| target.data()[i * v + j] as f64).collect();
            pearson(&a, &b)
        })
        .collect()
}

/// True when `recon` correlates strictly better with `gt` than with every
/// distractor. Needs exactly `n - 1` distractors.
pub fn identify_nway(recon: &[f64], gt: &[f64], distractors: &[&[f64]], n: usize) -> Result<bool> {
    if n < 2 || distractors.len() != n - 1 {
        return Err(Error::Config(format!(
            "{n}-way identification needs {} distractors, got {}",
            n.saturating_sub(1),
            distractors.len()
        )));
    }
    if gt.len() != recon.len() || distractors.iter().any(|d| d.len() != recon.len()) {
        return Err(Error::shape("identify_nway", "images differ in size"));
    }
    let own = pearson(recon, gt)?;
    for d in distractors {
        if pearson(recon, d)? >= own {
            return Ok(false);
        }
    }
    Ok(true)
}

/// How distractor sets are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    /// Every other image once (2-way only).
    Exhaustive,
    /// `draws` random sets of `n - 1` other images per image.
    MonteCarlo { draws: usize },
}

/// Outcome of one identification protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identification {
    pub n: usize,
    /// Correct flags, one row per image and one column per trial.
    pub outcomes: Vec<Vec<bool>>,
}

impl Identification {
    pub fn per_image(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.iter().filter(|&&c| c).count() as f64 / o.len() as f64).collect()
    }

    pub fn mean(&self) -> f64 {
        let p = self.per_image();
        p.iter().sum::<f64>() / p.len() as f64
    }
}

/// `corr[i][j] = pearson(recon_i, gt_j)` over flattened images.
pub fn correlation_matrix(recons: &Tensor<f32>, gts: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    if recons.shape() != gts.shape() {
        return Err(Error::shape("identification", format!("{:?} vs {:?}", recons.shape(), gts.shape())));
    }
    let g: Vec<Vec<f64>> = (0..gts.rows()).map(|j| flat(gts, j)).collect();
    (0..recons.rows())
        .map(|i| {
            let r = flat(recons, i);
            g.iter().map(|gj| pearson(&r, gj)).collect()
        })
        .collect()
}

/// n-way identification of every reconstruction against the other ground
/// truths. Trial `t` of image `i` draws from its own seeded stream, so the
/// result does not depend on evaluation order.
pub fn identification_accuracy(corr: &[Vec<f64>], n: usize, protocol: Protocol, seed: u64) -> Result<Identification> {
    let m = corr.len();
    if n < 2 || n > m {
        return Err(Error::Config(format!("{n}-way identification needs at least {n} images, have {m}")));
    }
    if corr.iter().any(|row| row.len() != m) {
        return Err(Error::shape("identification", "correlation matrix must be square"));
    }
    let outcomes = match protocol {
        Protocol::Exhaustive => {
            if n != 2 {
                return Err(Error::Config("exhaustive identification is defined for n = 2 only".into()));
            }
            (0..m).map(|i| (0..m).filter(|&j| j != i).map(|j| corr[i][i] > corr[i][j]).collect()).collect()
        }
        Protocol::MonteCarlo { draws } => {
            if draws == 0 {
                return Err(Error::Config("Monte-Carlo identification needs at least one draw".into()));
            }
            let base = derive_seed(seed, "nway", n as u64);
            (0..m)
                .map(|i| {
                    (0..draws)
                        .map(|t| {
                            let mut rng = stream(base, "trial", (i * draws + t) as u64);
                            let picks = sample(&mut rng, m - 1, n - 1);
                            picks.iter().map(|p| if p >= i { p + 1 } else { p }).all(|j| corr[i][i] > corr[i][j])
                        })
                        .collect()
                })
                .collect()
        }
    };
    Ok(Identification { n, outcomes })
}

/// Percentile bootstrap interval of the mean of `values`.
///
/// The interval is widened to contain the sample mean when resampling
/// skew would leave it outside.
pub fn bootstrap_ci(values: &[f64], level: f64, resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Config(format!("bootstrap needs at least 2 values, got {}", values.len())));
    }
    if resamples < 1000 || !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!(
            "bootstrap needs >= 1000 resamples and a level in (0, 1), got {resamples}, {level}"
        )));
    }
    let n = values.len();
    let mut rng = stream(seed, "bootstrap", 0);
    let mut means: Vec<f64> =
        (0..resamples).map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64).collect();
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let q = |p: f64| means[((p * resamples as f64).floor() as usize).min(resamples - 1)];
    let tail = (1.0 - level) / 2.0;
    let point = values.iter().sum::<f64>() / n as f64;
    Ok((q(tail).min(point), q(1.0 - tail).max(point)))
}

/// One-sided sign test p-value for "differences tend to be positive";
/// zero differences are dropped.
pub fn sign_test(diffs: &[f64]) -> f64 {
    let n = diffs.iter().filter(|d| **d != 0.0).count();
    let k = diffs.iter().filter(|d| **d > 0.0).count();
    // P(X >= k), X ~ Binomial(n, 1/2)
    let mut p = 0.0;
    for j in k..=n {
        p += binomial(n, j) * 0.5f64.powi(n as i32);
    }
    p.min(1.0)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
