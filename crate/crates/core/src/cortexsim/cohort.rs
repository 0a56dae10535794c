use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::images::sample_image_range;
use super::{make_brain, Nonlinearity, SyntheticBrain};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::io::{fnv1a64, read_array, write_array};
use crate::seeds::derive_seed;

/// Simulated (or ingested) data set.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    /// `[N, C, S, S]`
    pub train_images: Tensor<f32>,
    /// `[N, V]`, one measurement per image.
    pub train_fmri: Tensor<f32>,
    /// `[T, C, S, S]`, ground truth for evaluation only.
    pub test_images: Tensor<f32>,
    /// `[T, m, V]`
    pub test_fmri_repeats: Tensor<f32>,
    /// `[U, C, S, S]`
    pub unlabeled_images: Tensor<f32>,
    pub voxel_mask: Vec<bool>,
}

const ROLES: [&str; 6] =
    ["train_images", "train_fmri", "test_images", "test_fmri_repeats", "unlabeled_images", "voxel_mask"];

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    arrays: HashMap<String, String>,
}

const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "vxc-cohort";

fn image_hashes(t: &Tensor<f32>) -> impl Iterator<Item = u64> + '_ {
    (0..t.rows()).map(|i| fnv1a64(&t.row(i).iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>()))
}

impl Cohort {
    pub fn voxel_count(&self) -> usize {
        self.voxel_mask.len()
    }

    pub fn kept_voxels(&self) -> usize {
        self.voxel_mask.iter().filter(|&&k| k).count()
    }

    pub fn image_side(&self) -> usize {
        self.test_images.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.test_images.shape()[1]
    }

    pub fn test_repeats(&self) -> usize {
        self.test_fmri_repeats.shape()[1]
    }

    /// Checks shapes, counts and pool disjointness.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(m));
        let img = |t: &Tensor<f32>, name: &str| -> Result<()> {
            let s = t.shape();
            if s.len() != 4 || s[0] == 0 || s[2] != s[3] || s[1..] != self.test_images.shape()[1..] {
                return Err(Error::Data(format!("{name} has shape {s:?}")));
            }
            Ok(())
        };
        img(&self.test_images, "test_images")?;
        img(&self.train_images, "train_images")?;
        img(&self.unlabeled_images, "unlabeled_images")?;
        let v = self.voxel_count();
        if v == 0 || self.kept_voxels() == 0 {
            return bad("voxel mask keeps no voxels".into());
        }
        if self.train_fmri.shape() != [self.train_images.rows(), v] {
            return bad(format!(
                "train_fmri has shape {:?}, expected [{}, {v}]",
                self.train_fmri.shape(),
                self.train_images.rows()
            ));
        }
        let r = self.test_fmri_repeats.shape();
        if r.len() != 3 || r[0] != self.test_images.rows() || r[1] == 0 || r[2] != v {
            return bad(format!("test_fmri_repeats has shape {r:?}"));
        }
        let mut seen: HashMap<u64, usize> = HashMap::new();
        for (pool, t) in [&self.train_images, &self.test_images, &self.unlabeled_images].into_iter().enumerate() {
            for h in image_hashes(t) {
                if let Some(&other) = seen.get(&h) {
                    if other != pool {
                        return bad(format!("image pools {other} and {pool} share an image"));
                    }
                }
                seen.insert(h, pool);
            }
        }
        Ok(())
    }

    /// Keeps the masked voxel columns of a `[.., V]` tensor.
    pub fn mask_columns(&self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let v = self.voxel_count();
        let s = t.shape();
        if s.last() != Some(&v) {
            return Err(Error::Data(format!("expected last dim {v}, got {s:?}")));
        }
        let data: Vec<f32> = t
            .data()
            .chunks_exact(v)
            .flat_map(|row| row.iter().zip(&self.voxel_mask).filter(|(_, &k)| k).map(|(x, _)| *x))
            .collect();
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = self.kept_voxels();
        Tensor::new(shape, data)
    }

    /// Masked train responses `[N, V']`.
    pub fn train_responses(&self) -> Result<Tensor<f32>> {
        self.mask_columns(&self.train_fmri)
    }

    /// Masked test responses: repeat averages `[T, V']`, or every single
    /// repeat `[T * m, V']` with stimulus `t`'s repeats at rows `t*m..(t+1)*m`.
    pub fn test_responses(&self, averaged: bool) -> Result<Tensor<f32>> {
        let masked = self.mask_columns(&self.test_fmri_repeats)?;
        if averaged {
            average_repeats(&masked)
        } else {
            let s = masked.shape().to_vec();
            masked.reshape(&[s[0] * s[1], s[2]])
        }
    }

    /// Replaces the mask with the top `keep_k` voxels by repeat SNR.
    pub fn apply_screen(&mut self, keep_k: usize) -> Result<()> {
        self.voxel_mask = snr_screen(&self.test_fmri_repeats, keep_k)?;
        Ok(())
    }

    /// Writes one VXC1 container per role plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mask = Tensor::new(
            vec![self.voxel_count()],
            self.voxel_mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        )?;
        let arrays = [
            &self.train_images,
            &self.train_fmri,
            &self.test_images,
            &self.test_fmri_repeats,
            &self.unlabeled_images,
            &mask,
        ];
        let mut names = HashMap::new();
        for (role, t) in ROLES.iter().zip(arrays) {
            let file = format!("{role}.vxc");
            write_array(dir.join(&file), t)?;
            names.insert(role.to_string(), file);
        }
        let manifest = Manifest { format: FORMAT.into(), version: 1, arrays: names };
        std::fs::write(dir.join(MANIFEST), crate::io::canonical_json(&serde_json::to_value(&manifest)?)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Cohort> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad cohort manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.version != 1 {
            return Err(Error::Data(format!("unsupported cohort format {} v{}", manifest.format, manifest.version)));
        }
        let load = |role: &str| -> Result<Tensor<f32>> {
            let file = manifest.arrays.get(role).ok_or_else(|| Error::Data(format!("manifest lacks role {role}")))?;
            read_array(dir.join(file))
        };
        let [ti, tf, si, sr, ui, mask] = ROLES.map(load);
        let mask = mask?;
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("voxel_mask must hold only 0 and 1".into()));
        }
        let cohort = Cohort {
            train_images: ti?,
            train_fmri: tf?,
            test_images: si?,
            test_fmri_repeats: sr?,
            unlabeled_images: ui?,
            voxel_mask: mask.data().iter().map(|&v| v == 1.0).collect(),
        };
        cohort.validate()?;
        Ok(cohort)
    }
}

/// Per-voxel SNR of `[S, m, V]` repeats: variance across stimuli of the
/// repeat means over the mean within-stimulus variance. Zero within-stimulus
/// variance gives `+inf` (or 0 when the voxel is constant).
pub fn snr_per_voxel(repeats: &Tensor<f32>) -> Result<Vec<f64>> {
    let s = repeats.shape();
    if s.len() != 3 || s[0] < 2 || s[1] < 2 {
        return Err(Error::Data(format!("SNR needs [stimuli >= 2, repeats >= 2, V], got {s:?}")));
    }
    let (ns, m, v) = (s[0], s[1], s[2]);
    let d = repeats.data();
    Ok((0..v)
        .map(|j| {
            let mut means = Vec::with_capacity(ns);
            let mut within = 0.0;
            for st in 0..ns {
                let xs: Vec<f64> = (0..m).map(|k| d[(st * m + k) * v + j] as f64).collect();
                let mean = xs.iter().sum::<f64>() / m as f64;
                within += xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
                means.push(mean);
            }
            within /= ns as f64;
            let grand = means.iter().sum::<f64>() / ns as f64;
            let between = means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (ns - 1) as f64;
            if within > 0.0 {
                between / within
            } else if between > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .collect())
}

/// Mask of the `keep_k` highest-SNR voxels; ties go to the lower index.
pub fn snr_screen(repeats: &Tensor<f32>, keep_k: usize) -> Result<Vec<bool>> {
    let snr = snr_per_voxel(repeats)?;
    if keep_k == 0 || keep_k > snr.len() {
        return Err(Error::Config(format!("keep_k must lie in 1..={}, got {keep_k}", snr.len())));
    }
    let mut order: Vec<usize> = (0..snr.len()).collect();
    order.sort_by(|&a, &b| snr[b].total_cmp(&snr[a]).then(a.cmp(&b)));
    let mut mask = vec![false; snr.len()];
    order[..keep_k].iter().for_each(|&i| mask[i] = true);
    Ok(mask)
}

/// Mean over the repeat axis of `[S, m, V]`.
pub fn average_repeats(repeats: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = repeats.shape();
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::Data(format!("expected [stimuli, repeats >= 1, V], got {s:?}")));
    }
    let (ns, m, v) = (s[0], s[1], s[2]);
    let d = repeats.data();
    let data = (0..ns)
        .flat_map(|st| {
            (0..v).map(move |j| ((0..m).map(|k| d[(st * m + k) * v + j] as f64).sum::<f64>() / m as f64) as f32)
        })
        .collect();
    Tensor::new(vec![ns, v], data)
}

/// Measures the given pools through `brain`. Train images get one
/// measurement, test images `repeats`; noise draws are keyed by `seed`.
pub fn generate_cohort_from_pools(
    brain: &SyntheticBrain,
    train_images: Tensor<f32>,
    test_images: Tensor<f32>,
    unlabeled_images: Tensor<f32>,
    repeats: usize,
    seed: u64,
) -> Result<Cohort> {
    if repeats == 0 {
        return Err(Error::Config("need at least one test repeat".into()));
    }
    let v = brain.voxel_count();
    let mut train = Vec::with_capacity(train_images.rows() * v);
    for i in 0..train_images.rows() {
        train.extend(brain.respond(train_images.row(i), derive_seed(seed, "train.noise", i as u64))?);
    }
    let mut test = Vec::with_capacity(test_images.rows() * repeats * v);
    for i in 0..test_images.rows() {
        for k in 0..repeats {
            test.extend(brain.respond(test_images.row(i), derive_seed(seed, "test.noise", (i * repeats + k) as u64))?);
        }
    }
    let cohort = Cohort {
        train_fmri: Tensor::new(vec![train_images.rows(), v], train)?,
        test_fmri_repeats: Tensor::new(vec![test_images.rows(), repeats, v], test)?,
        train_images,
        test_images,
        unlabeled_images,
        voxel_mask: vec![true; v],
    };
    cohort.validate()?;
    Ok(cohort)
}

/// Samples disjoint procedural pools and measures them.
pub fn generate_cohort(
    brain: &SyntheticBrain,
    n_train: usize,
    n_test: usize,
    n_unlabeled: usize,
    repeats: usize,
    seed: u64,
) -> Result<Cohort> {
    if n_train == 0 || n_test == 0 || n_unlabeled == 0 {
        return Err(Error::Config("every pool needs at least one image".into()));
    }
    let (side, c) = (brain.image_side(), brain.channels());
    let img_seed = derive_seed(seed, "cohort.images", 0);
    let train = sample_image_range(0, n_train, side, c, img_seed)?;
    let test = sample_image_range(n_train as u64, n_test, side, c, img_seed)?;
    let unlabeled = sample_image_range((n_train + n_test) as u64, n_unlabeled, side, c, img_seed)?;
    generate_cohort_from_pools(brain, train, test, unlabeled, repeats, seed)
}

/// Everything needed to simulate a cohort from one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub voxel_count: usize,
    pub image_side: usize,
    pub channels: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub test_repeats: usize,
    pub n_unlabeled: usize,
    /// Single-measurement signal-to-noise variance ratio per voxel;
    /// `None` simulates a noiseless brain.
    pub snr: Option<f64>,
    pub nonlinearity: Nonlinearity,
    /// Images used to calibrate the noise level.
    pub calibration_images: usize,
    /// Keep only the top voxels by repeat SNR; `None` keeps all.
    pub keep_voxels: Option<usize>,
}

impl Default for CohortConfig {
    /// The desk cohort: 32×32 grayscale, 256 voxels, 300 pairs, 50 test
    /// stimuli × 16 repeats, 2000 unlabeled images, SNR 1.
    fn default() -> Self {
        CohortConfig {
            voxel_count: 256,
            image_side: 32,
            channels: 1,
            n_train: 300,
            n_test: 50,
            test_repeats: 16,
            n_unlabeled: 2000,
            snr: Some(1.0),
            nonlinearity: Nonlinearity::Identity,
            calibration_images: 500,
            keep_voxels: None,
        }
    }
}

/// Builds a brain and a cohort from `cfg`, all keyed by `seed`.
pub fn simulate(cfg: &CohortConfig, seed: u64) -> Result<(SyntheticBrain, Cohort)> {
    let mut brain = make_brain(
        cfg.voxel_count,
        cfg.image_side,
        cfg.channels,
        0.0,
        cfg.nonlinearity,
        derive_seed(seed, "brain", 0),
    )?;
    if let Some(snr) = cfg.snr {
        let calib = sample_image_range(
            0,
            cfg.calibration_images,
            cfg.image_side,
            cfg.channels,
            derive_seed(seed, "calibration", 0),
        )?;
        brain.calibrate_noise(&calib, snr)?;
    }
    let mut cohort = generate_cohort(&brain, cfg.n_train, cfg.n_test, cfg.n_unlabeled, cfg.test_repeats, seed)?;
    if let Some(k) = cfg.keep_voxels {
        cohort.apply_screen(k)?;
    }
    Ok((brain, cohort))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn small() -> CohortConfig {
        CohortConfig {
            voxel_count: 12,
            image_side: 8,
            n_train: 10,
            n_test: 4,
            test_repeats: 3,
            n_unlabeled: 6,
            calibration_images: 50,
            ..CohortConfig::default()
        }
    }

    #[test]
    fn cohort_structure_and_roundtrip() {
        let (_, c) = simulate(&small(), 1).unwrap();
        assert_eq!(c.train_fmri.shape(), &[10, 12]);
        assert_eq!(c.test_fmri_repeats.shape(), &[4, 3, 12]);
        assert_eq!(c.unlabeled_images.shape(), &[6, 1, 8, 8]);
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(Cohort::load(dir.path()).unwrap(), c);
        assert_eq!(simulate(&small(), 1).unwrap().1, c);
    }

    #[test]
    fn overlapping_pools_rejected() {
        let (_, mut c) = simulate(&small(), 2).unwrap();
        let dup = c.test_images.select_rows(&[0]).unwrap();
        c.unlabeled_images = Tensor::concat_rows(&[&c.unlabeled_images, &dup]).unwrap();
        assert!(matches!(c.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn masking_and_averaging_commute() {
        let (_, mut c) = simulate(&small(), 3).unwrap();
        c.apply_screen(5).unwrap();
        assert_eq!(c.kept_voxels(), 5);
        let a = c.test_responses(true).unwrap();
        let b = c.mask_columns(&average_repeats(&c.test_fmri_repeats).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(c.test_responses(false).unwrap().shape(), &[12, 5]);
    }

    #[test]
    fn screen_conventions() {
        // voxel 0 noiseless signal, voxel 1 constant, voxel 2 noise
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f32> = (0..3).flat_map(|s| (0..2).flat_map(move |_| [s as f32, 1.0, 0.0])).collect();
        let mut t = Tensor::new(vec![3, 2, 3], data).unwrap();
        t.data_mut().chunks_exact_mut(3).for_each(|row| row[2] = r.gen_range(-1.0..1.0));
        let snr = snr_per_voxel(&t).unwrap();
        assert!(snr[0].is_infinite() && snr[1] == 0.0);
        assert_eq!(snr_screen(&t, 1).unwrap(), vec![true, false, false]);
        assert_eq!(snr_screen(&t, 3).unwrap(), vec![true; 3]);
        assert!(snr_screen(&t, 4).is_err());
        // equal SNR: lower index wins
        let tied = Tensor::new(vec![2, 2, 2], vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 4.0, 4.0]).unwrap();
        assert_eq!(snr_screen(&tied, 1).unwrap(), vec![true, false]);
    }

    #[test]
    fn signal_voxel_outranks_noise_voxel() {
        let mut wins = 0;
        for trial in 0..100u64 {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(trial);
            let (ns, m) = (20, 4);
            let signal: Vec<f64> =
                (0..ns).map(|_| 10.0 * Distribution::<f64>::sample(&StandardNormal, &mut r)).collect();
            let mut data = Vec::new();
            for s in &signal {
                for _ in 0..m {
                    let n1: f64 = StandardNormal.sample(&mut r);
                    let n2: f64 = StandardNormal.sample(&mut r);
                    data.extend([n1 as f32, (s + n2) as f32]);
                }
            }
            let mask = snr_screen(&Tensor::new(vec![ns, m, 2], data).unwrap(), 1).unwrap();
            wins += mask[1] as usize;
        }
        assert!(wins >= 99);
    }

    #[test]
    fn averaging_examples_and_noise_shrinkage() {
        let r = Tensor::new(vec![1, 2, 3], vec![1.0, -2.0, 3.0, -1.0, 2.0, -3.0]).unwrap();
        assert_eq!(average_repeats(&r).unwrap().data(), &[0.0, 0.0, 0.0]);
        let same = Tensor::new(vec![1, 2, 2], vec![0.5, 0.25, 0.5, 0.25]).unwrap();
        assert_eq!(average_repeats(&same).unwrap().data(), &[0.5, 0.25]);

        let brain = make_brain(2, 4, 1, 0.8, Nonlinearity::Identity, 1).unwrap();
        let img = vec![0.5f32; 16];
        let clean = brain.respond_clean(&img).unwrap();
        let trials = 1000;
        let mut ss = 0.0;
        for t in 0..trials {
            let reps: Vec<f32> = (0..16).flat_map(|k| brain.respond(&img, t * 16 + k).unwrap()).collect();
            let avg = average_repeats(&Tensor::new(vec![1, 16, 2], reps).unwrap()).unwrap();
            ss += ((avg.data()[0] - clean[0]) as f64).powi(2);
        }
        let std = (ss / trials as f64).sqrt();
        assert!((std / 0.2 - 1.0).abs() < 0.1, "{std}");
    }

    #[test]
    fn calibrated_snr_is_near_target() {
        let cfg = CohortConfig {
            voxel_count: 16,
            image_side: 16,
            n_train: 10,
            n_test: 40,
            test_repeats: 16,
            n_unlabeled: 5,
            calibration_images: 400,
            ..CohortConfig::default()
        };
        let (_, c) = simulate(&cfg, 4).unwrap();
        let snr = snr_per_voxel(&c.test_fmri_repeats).unwrap();
        let mean = snr.iter().sum::<f64>() / snr.len() as f64;
        // between-stimulus variance of means carries sigma^2/16 on top of the signal
        assert!((mean - 17.0 / 16.0).abs() < 0.35, "{mean}");
    }
}
