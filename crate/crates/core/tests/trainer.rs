use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;
use voxrecon::cortexsim::{simulate, Cohort, CohortConfig};
use voxrecon::engine::Tensor;
use voxrecon::nets::{FeatureBank, NetConfig};
use voxrecon::objectives::{cosine_evaluations, reset_cosine_evaluations};
use voxrecon::trainer::{
    load_checkpoint, mix_sizes, random_offset, random_shift, reconstruct, save_checkpoint, train_encoder, Checkpoint,
    DecoderTrainer, TrainConfig,
};
use voxrecon::Error;

fn small_cohort() -> &'static Cohort {
    static C: OnceLock<Cohort> = OnceLock::new();
    C.get_or_init(|| {
        let cfg = CohortConfig {
            voxel_count: 48,
            n_train: 40,
            n_test: 8,
            test_repeats: 3,
            n_unlabeled: 40,
            calibration_images: 100,
            ..CohortConfig::default()
        };
        simulate(&cfg, 21).unwrap().1
    })
}

fn small_config(seed: u64, phase1: usize, phase2: usize) -> TrainConfig {
    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    cfg.phase1.epochs = phase1;
    cfg.phase1.batch_size = 8;
    cfg.phase2.epochs = phase2;
    cfg.phase2.batch_size = 10;
    cfg
}

fn net(c: &Cohort) -> NetConfig {
    NetConfig::desk(c.kept_voxels(), c.channels())
}

#[test]
fn shift_offsets_are_uniform() {
    let draws = 10_000;
    let mut counts = [[0usize; 5]; 5];
    for i in 0..draws {
        let (dx, dy) = random_offset(2, i);
        counts[(dy + 2) as usize][(dx + 2) as usize] += 1;
    }
    for row in counts {
        for c in row {
            let f = c as f64 / draws as f64;
            assert!((f - 0.04).abs() < 0.01, "offset frequency {f}");
        }
    }
}

#[test]
fn shift_is_deterministic_and_identity_at_zero() {
    let imgs = Tensor::from_fn(&[3, 1, 16, 16], |i| (i % 7) as f32 / 7.0);
    assert_eq!(random_shift(&imgs, 2, 5).unwrap(), random_shift(&imgs, 2, 5).unwrap());
    assert_eq!(random_shift(&imgs, 0, 5).unwrap(), imgs);
    assert!(random_shift(&imgs, 4, 5).is_err());
}

/// Oracle: exact rational largest remainder via integer arithmetic on
/// percentages.
fn largest_remainder(batch: usize, pct: [usize; 3]) -> [usize; 3] {
    let quota: Vec<usize> = pct.iter().map(|p| p * batch).collect();
    let mut sizes = [quota[0] / 100, quota[1] / 100, quota[2] / 100];
    let mut order = [0, 1, 2];
    order.sort_by_key(|&i| (std::cmp::Reverse(quota[i] % 100), i));
    let left = batch - sizes.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        sizes[i] += 1;
    }
    sizes
}

proptest! {
    #[test]
    fn mix_sizes_match_integer_oracle(batch in 1usize..=256, a in 0usize..=100, b in 0usize..=100) {
        prop_assume!(a + b <= 100);
        let pct = [a, b, 100 - a - b];
        let mix = pct.map(|p| p as f64 / 100.0);
        let got = mix_sizes(batch, &mix).unwrap();
        prop_assert_eq!(got.iter().sum::<usize>(), batch);
        prop_assert_eq!(got, largest_remainder(batch, pct));
    }
}

#[test]
fn alpha_one_never_evaluates_the_cosine() {
    let c = small_cohort();
    let net = net(c);
    let bank = FeatureBank::new(&net).unwrap();
    let mut cfg = small_config(1, 2, 1);
    cfg.loss.alpha = 1.0;
    reset_cosine_evaluations();
    let (enc, _) = train_encoder(c, &net, &bank, &cfg).unwrap();
    let mut t = DecoderTrainer::new(c, &net, &enc, &bank, &cfg, BTreeSet::new()).unwrap();
    t.run().unwrap();
    assert_eq!(cosine_evaluations(), 0);

    cfg.loss.alpha = 0.9;
    train_encoder(c, &net, &bank, &cfg).unwrap();
    assert!(cosine_evaluations() > 0);
}

#[test]
fn encoder_loss_decreases() {
    let c = small_cohort();
    let net = net(c);
    let bank = FeatureBank::new(&net).unwrap();
    let (_, report) = train_encoder(c, &net, &bank, &small_config(2, 12, 1)).unwrap();
    let first = report.epoch_losses[0];
    let last = *report.epoch_losses.last().unwrap();
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn excluded_responses_are_never_drawn() {
    let c = small_cohort();
    let net = net(c);
    let bank = FeatureBank::new(&net).unwrap();
    let cfg = small_config(3, 1, 3);
    let (enc, _) = train_encoder(c, &net, &bank, &cfg).unwrap();
    let excluded: BTreeSet<usize> = [0, 2, 4, 6].into();
    let mut t = DecoderTrainer::new(c, &net, &enc, &bank, &cfg, excluded.clone()).unwrap();
    t.run().unwrap();
    let draws = t.fmri_draws();
    assert!(draws.iter().sum::<u64>() > 0);
    assert!(excluded.iter().all(|&i| draws[i] == 0), "{draws:?}");
    let all: BTreeSet<usize> = (0..c.test_images.rows()).collect();
    assert!(DecoderTrainer::new(c, &net, &enc, &bank, &cfg, all).is_err());
}

#[test]
fn all_terms_disabled_is_a_config_error() {
    let c = small_cohort();
    let net = net(c);
    let bank = FeatureBank::new(&net).unwrap();
    let mut cfg = small_config(4, 1, 1);
    let (enc, _) = train_encoder(c, &net, &bank, &cfg).unwrap();
    cfg.loss.d = 0.0;
    cfg.ablation.enable_ed = false;
    cfg.ablation.enable_de = false;
    let err = DecoderTrainer::new(c, &net, &enc, &bank, &cfg, BTreeSet::new()).err().unwrap();
    assert!(err.is_config(), "{err}");
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let c = small_cohort();
    let net = net(c);
    let bank = FeatureBank::new(&net).unwrap();
    let cfg = small_config(5, 1, 2);
    let (enc, _) = train_encoder(c, &net, &bank, &cfg).unwrap();
    let mut t = DecoderTrainer::new(c, &net, &enc, &bank, &cfg, BTreeSet::new()).unwrap();
    t.run_epoch().unwrap();
    let ckpt = t.checkpoint();
    let bytes = ckpt.to_bytes();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);

    for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 1;
    assert!(Checkpoint::from_bytes(&flipped).is_err());
    let mut version = bytes.clone();
    version[4] = 99;
    assert!(Checkpoint::from_bytes(&version).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let hash = cfg.hash_with(&net).unwrap();
    assert_eq!(load_checkpoint(&path, Some(hash)).unwrap(), ckpt);
    assert!(matches!(load_checkpoint(&path, Some(hash ^ 1)), Err(Error::Checkpoint(_))));

    let other = small_config(6, 1, 2);
    assert!(DecoderTrainer::resume(c, &net, &enc, &bank, &other, &ckpt).is_err());
    let restored = ckpt.restore_encoder(&net, &bank).unwrap();
    assert_eq!(restored.checksum(), enc.checksum());
    let dec = ckpt.restore_decoder(&net).unwrap();
    assert_eq!(dec.checksum(), t.decoder().checksum());
}

#[test]
fn reconstruct_shape_range_and_purity() {
    let c = small_cohort();
    let net = net(c);
    let bank = FeatureBank::new(&net).unwrap();
    let cfg = small_config(7, 1, 1);
    let (enc, _) = train_encoder(c, &net, &bank, &cfg).unwrap();
    let mut t = DecoderTrainer::new(c, &net, &enc, &bank, &cfg, BTreeSet::new()).unwrap();
    t.run().unwrap();
    let before = t.decoder().checksum();
    let fmri = c.test_responses(true).unwrap();
    let a = reconstruct(t.decoder(), &fmri).unwrap();
    let b = reconstruct(t.decoder(), &fmri).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), c.test_images.shape());
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(t.decoder().checksum(), before);
    // each row is decoded independently of the rest of the batch
    let one = reconstruct(t.decoder(), &fmri.select_rows(&[3]).unwrap()).unwrap();
    assert_eq!(one, a.select_rows(&[3]).unwrap());
    assert!(reconstruct(t.decoder(), &Tensor::zeros(&[2, 5])).is_err());
}
