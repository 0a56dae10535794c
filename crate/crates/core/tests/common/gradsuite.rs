//! Finite-difference checks for every layer and loss, each over
//! `SHAPES` random shapes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use voxrecon::engine::{Mode, ParamStore, Tape, Tensor, Var};
use voxrecon::nets::{build_decoder, build_encoder, Decoder, Encoder, FeatureBank, NetConfig, BN_EPS};
use voxrecon::objectives::{
    de_cycle, decoder_objective, ed_cycle, fmri_loss, image_loss, tv, EncoderNorm, LossWeights, MixedBatch,
};

use super::{check_inputs, check_params, project, random_tensor, rng, Check};

pub const SHAPES: usize = 20;

fn dims(r: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| r.gen_range(1..=max)).collect()
}

fn over_shapes(seed: u64, mut one: impl FnMut(&mut ChaCha8Rng, u64) -> Check) -> Check {
    let mut r = rng(seed);
    (0..SHAPES as u64).fold(Check::empty(), |acc, i| {
        let s: u64 = r.gen();
        acc.merge(one(&mut r, s ^ i))
    })
}

pub fn elementwise_binary() -> Check {
    over_shapes(1, |r, s| {
        let rank = r.gen_range(1..=4);
        let shape = dims(r, rank, 4);
        let (a, b) = (random_tensor(r, &shape, 0.1), random_tensor(r, &shape, 0.1));
        let op = r.gen_range(0..3);
        check_inputs(&[a, b], s, move |_, v| {
            let y = match op {
                0 => v[0].add(v[1])?,
                1 => v[0].sub(v[1])?,
                _ => v[0].mul(v[1])?,
            };
            project(y, s)
        })
    })
}

pub fn elementwise_unary() -> Check {
    over_shapes(2, |r, s| {
        let rank = r.gen_range(1..=4);
        let shape = dims(r, rank, 4);
        let x = random_tensor(r, &shape, 0.05);
        let (op, k) = (r.gen_range(0..6), r.gen_range(-2.0..2.0));
        check_inputs(&[x], s, move |_, v| {
            let y = match op {
                0 => v[0].scale(k)?,
                1 => v[0].add_scalar(k)?,
                2 => v[0].abs()?,
                3 => v[0].square()?,
                4 => v[0].relu()?,
                _ => v[0].scale(3.0)?.sigmoid()?,
            };
            project(y, s)
        })
    })
}

pub fn reductions_and_reshape() -> Check {
    over_shapes(3, |r, s| {
        let shape = dims(r, 3, 4);
        let x = random_tensor(r, &shape, 0.0);
        let op = r.gen_range(0..4);
        check_inputs(&[x], s, move |_, v| {
            let x = v[0].square()?;
            match op {
                0 => x.sum(),
                1 => x.mean(),
                2 => {
                    let n = x.numel();
                    project(x.reshape(&[n])?, s)
                }
                _ => project(x.flatten_rows()?, s),
            }
        })
    })
}

pub fn fully_connected() -> Check {
    over_shapes(4, |r, s| {
        let (n, i, o) = (r.gen_range(1..=5), r.gen_range(1..=6), r.gen_range(1..=6));
        let bias = r.gen_bool(0.5);
        let inputs = vec![random_tensor(r, &[n, i], 0.0), random_tensor(r, &[o, i], 0.0), random_tensor(r, &[o], 0.0)];
        check_inputs(&inputs, s, move |_, v| project(v[0].fully_connected(v[1], bias.then_some(v[2]))?, s))
    })
}

pub fn conv2d() -> Check {
    over_shapes(5, |r, s| {
        let (n, c, o) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let k: usize = [1, 3, 5][r.gen_range(0..3)];
        let pad = r.gen_range(0..=k / 2 + 1);
        let stride = r.gen_range(1..=3);
        let lo = k.saturating_sub(2 * pad).max(1);
        let (h, w) = (r.gen_range(lo..=7), r.gen_range(lo..=7));
        let bias = r.gen_bool(0.7);
        let inputs = vec![
            random_tensor(r, &[n, c, h, w], 0.0),
            random_tensor(r, &[o, c, k, k], 0.0),
            random_tensor(r, &[o], 0.0),
        ];
        check_inputs(&inputs, s, move |_, v| project(v[0].conv2d(v[1], bias.then_some(v[2]), stride, pad)?, s))
    })
}

pub fn upsample2x() -> Check {
    over_shapes(6, |r, s| {
        let shape = dims(r, 4, 4);
        check_inputs(&[random_tensor(r, &shape, 0.0)], s, move |_, v| project(v[0].upsample2x()?, s))
    })
}

pub fn batch_norm_train() -> Check {
    over_shapes(7, |r, s| {
        let (n, c) = (r.gen_range(2..=4), r.gen_range(1..=3));
        let shape = if r.gen_bool(0.3) { vec![n, c] } else { vec![n, c, r.gen_range(1..=3), r.gen_range(1..=3)] };
        let inputs = vec![random_tensor(r, &shape, 0.0), random_tensor(r, &[c], 0.2), random_tensor(r, &[c], 0.0)];
        check_inputs(&inputs, s, move |_, v| project(v[0].batch_norm_train(v[1], v[2], BN_EPS)?.0, s))
    })
}

pub fn batch_norm_eval() -> Check {
    over_shapes(8, |r, s| {
        let (n, c) = (r.gen_range(1..=4), r.gen_range(1..=3));
        let shape = vec![n, c, r.gen_range(1..=3), r.gen_range(1..=3)];
        let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.1..2.0)).collect();
        let inputs = vec![random_tensor(r, &shape, 0.0), random_tensor(r, &[c], 0.2), random_tensor(r, &[c], 0.0)];
        check_inputs(&inputs, s, move |_, v| project(v[0].batch_norm_eval(v[1], v[2], &mean, &var, BN_EPS)?, s))
    })
}

pub fn row_ops() -> Check {
    over_shapes(9, |r, s| {
        let (n, m, d) = (r.gen_range(2..=5), r.gen_range(1..=4), r.gen_range(1..=5));
        let (start, len) = (r.gen_range(0..n - 1), 1);
        let len = len + r.gen_range(0..n - start);
        let inputs =
            vec![random_tensor(r, &[n, d], 0.0), random_tensor(r, &[m, d], 0.0), random_tensor(r, &[n, m], 0.0)];
        let op = r.gen_range(0..3);
        check_inputs(&inputs, s, move |_, v| match op {
            0 => project(v[0].slice_rows(start, len)?, s),
            1 => project(Var::concat_rows(&[v[0], v[1]])?, s),
            _ => project(Var::concat_cols(&[v[0], v[2]])?, s),
        })
    })
}

pub fn row_norm_and_cosine() -> Check {
    over_shapes(10, |r, s| {
        let (n, d) = (r.gen_range(1..=4), r.gen_range(1..=6));
        let inputs = vec![random_tensor(r, &[n, d], 0.1), random_tensor(r, &[n, d], 0.1)];
        let op = r.gen_bool(0.5);
        check_inputs(
            &inputs,
            s,
            move |_, v| {
                if op {
                    project(v[0].row_norm()?, s)
                } else {
                    project(v[0].row_cosine(v[1])?, s)
                }
            },
        )
    })
}

pub fn spatial_diffs() -> Check {
    over_shapes(11, |r, s| {
        let shape = vec![r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(2..=5), r.gen_range(2..=5)];
        let op = r.gen_bool(0.5);
        check_inputs(&[random_tensor(r, &shape, 0.0)], s, move |_, v| {
            project(if op { v[0].diff_w()? } else { v[0].diff_h()? }, s)
        })
    })
}

pub fn fmri_loss_grad() -> Check {
    over_shapes(12, |r, s| {
        let (n, d) = (r.gen_range(1..=5), r.gen_range(1..=8));
        let alpha = [0.0, 0.5, 0.9, 1.0][r.gen_range(0..4)];
        let inputs = vec![random_tensor(r, &[n, d], 0.05), random_tensor(r, &[n, d], 0.05)];
        check_inputs(&inputs, s, move |_, v| fmri_loss(v[0], v[1], alpha))
    })
}

pub fn tv_grad() -> Check {
    over_shapes(13, |r, s| {
        let shape = vec![r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(2..=6), r.gen_range(2..=6)];
        check_inputs(&[random_tensor(r, &shape, 0.0)], s, |_, v| tv(v[0]))
    })
}

/// A random small network layout.
pub fn tiny_config(r: &mut ChaCha8Rng) -> NetConfig {
    let n_blocks = r.gen_range(1..=2);
    let base_side = r.gen_range(2..=3);
    NetConfig {
        image_side: base_side << n_blocks,
        channels: if r.gen_bool(0.5) { 1 } else { 3 },
        voxel_count: r.gen_range(2..=6),
        base_side,
        decoder_channels: r.gen_range(2..=4),
        encoder_channels: r.gen_range(2..=3),
        n_blocks,
        front_filters: r.gen_range(2..=4),
        front_kernel: 3,
        front_stride: r.gen_range(1..=2),
        feature_channels: [r.gen_range(1..=3), r.gen_range(1..=3)],
        seed: r.gen(),
    }
}

fn images(r: &mut ChaCha8Rng, cfg: &NetConfig, n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, cfg.channels, cfg.image_side, cfg.image_side], |_| r.gen_range(0.0..1.0))
}

/// Encoder with running statistics, frozen.
fn primed_encoder(r: &mut ChaCha8Rng, cfg: &NetConfig, bank: &FeatureBank<f64>) -> Encoder<f64> {
    let mut enc = build_encoder(cfg, bank, r.gen()).unwrap();
    let tape = Tape::new();
    let x = tape.constant(&images(r, cfg, 4)).unwrap();
    enc.forward_train(&tape, x).unwrap();
    enc.freeze();
    enc
}

fn dec_store(d: &mut Decoder<f64>) -> &mut ParamStore<f64> {
    d.state_mut().params_mut().unwrap()
}

fn enc_store(e: &mut Encoder<f64>) -> &mut ParamStore<f64> {
    e.state_mut().params_mut().unwrap()
}

pub fn feature_bank_grad() -> Check {
    over_shapes(14, |r, s| {
        let cfg = tiny_config(r);
        let bank = FeatureBank::<f64>::new(&cfg).unwrap();
        let n = r.gen_range(1..=2);
        let x = images(r, &cfg, n);
        check_inputs(&[x], s, move |tape, v| project(bank.features(tape, v[0])?, s))
    })
}

pub fn image_loss_grad() -> Check {
    over_shapes(15, |r, s| {
        let cfg = tiny_config(r);
        let bank = FeatureBank::<f64>::new(&cfg).unwrap();
        let n = r.gen_range(1..=3);
        let w = LossWeights::default();
        let inputs = vec![images(r, &cfg, n), images(r, &cfg, n)];
        check_inputs(&inputs, s, move |_, v| image_loss(v[0], v[1], &bank, &w))
    })
}

pub fn encoder_grad() -> Check {
    over_shapes(16, |r, s| {
        let cfg = tiny_config(r);
        let bank = FeatureBank::<f64>::new(&cfg).unwrap();
        let enc = build_encoder(&cfg, &bank, r.gen()).unwrap();
        let n = r.gen_range(2..=3);
        let x = images(r, &cfg, n);
        let wrt_params = check_params(&enc, enc_store, s, |tape, e| {
            let xv = tape.constant(&x)?;
            project(e.forward_train(tape, xv)?, s)
        });
        let primed = primed_encoder(r, &cfg, &bank);
        let n = r.gen_range(1..=2);
        let x = images(r, &cfg, n);
        let wrt_pixels = check_inputs(&[x], s, move |tape, v| project(primed.forward_eval(tape, v[0])?, s));
        wrt_params.merge(wrt_pixels)
    })
}

pub fn decoder_grad() -> Check {
    over_shapes(17, |r, s| {
        let cfg = tiny_config(r);
        let dec = build_decoder::<f64>(&cfg, r.gen()).unwrap();
        let n = r.gen_range(2..=3);
        let v = random_tensor(r, &[n, cfg.voxel_count], 0.0);
        let wrt_params = check_params(&dec, dec_store, s, |tape, d| {
            let rv = tape.constant(&v)?;
            project(d.forward_train(tape, rv)?, s)
        });
        let wrt_input = check_inputs(std::slice::from_ref(&v), s, move |tape, x| {
            let mut d = dec.clone();
            project(d.forward_train(tape, x[0])?, s)
        });
        wrt_params.merge(wrt_input)
    })
}

pub fn cycle_grads() -> Check {
    over_shapes(18, |r, s| {
        let cfg = tiny_config(r);
        let bank = FeatureBank::<f64>::new(&cfg).unwrap();
        let enc = primed_encoder(r, &cfg, &bank);
        let dec = build_decoder::<f64>(&cfg, r.gen()).unwrap();
        let w = LossWeights::default();
        let (ni, nv) = (r.gen_range(2..=3), r.gen_range(2..=3));
        let imgs = images(r, &cfg, ni);
        let vox = random_tensor(r, &[nv, cfg.voxel_count], 0.0);
        let ed =
            check_params(
                &dec,
                dec_store,
                s,
                |tape, d| Ok(ed_cycle(tape, &enc, d, &imgs, &bank, &w, Mode::Train)?.loss),
            );
        let de = check_params(&dec, dec_store, s, |tape, d| Ok(de_cycle(tape, &enc, d, &vox, &w, Mode::Train)?.loss));
        ed.merge(de)
    })
}

pub fn decoder_objective_grad() -> Check {
    over_shapes(19, |r, s| {
        let cfg = tiny_config(r);
        let bank = FeatureBank::<f64>::new(&cfg).unwrap();
        let enc = primed_encoder(r, &cfg, &bank);
        let dec = build_decoder::<f64>(&cfg, r.gen()).unwrap();
        let w = LossWeights::default();
        let np = r.gen_range(1..=3);
        let batch = MixedBatch {
            paired: Some((images(r, &cfg, np), random_tensor(r, &[np, cfg.voxel_count], 0.0))),
            images: r.gen_bool(0.8).then(|| images(r, &cfg, 1)),
            fmri: r.gen_bool(0.8).then(|| random_tensor(r, &[1, cfg.voxel_count], 0.0)),
        };
        let norm = if r.gen_bool(0.5) { EncoderNorm::Fixed } else { EncoderNorm::BatchStats };
        check_params(&dec, dec_store, s, |tape, d| {
            Ok(decoder_objective(tape, &enc, d, &batch, &bank, &w, Mode::Train, norm)?.total)
        })
    })
}

/// Every check, labelled.
pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("add/sub/mul", elementwise_binary()),
        ("unary", elementwise_unary()),
        ("sum/mean/reshape", reductions_and_reshape()),
        ("fully_connected", fully_connected()),
        ("conv2d", conv2d()),
        ("upsample2x", upsample2x()),
        ("batch_norm train", batch_norm_train()),
        ("batch_norm eval", batch_norm_eval()),
        ("slice/concat", row_ops()),
        ("row_norm/row_cosine", row_norm_and_cosine()),
        ("diff_w/diff_h", spatial_diffs()),
        ("fmri_loss", fmri_loss_grad()),
        ("tv", tv_grad()),
        ("feature bank", feature_bank_grad()),
        ("image_loss", image_loss_grad()),
        ("encoder", encoder_grad()),
        ("decoder", decoder_grad()),
        ("ed/de cycles", cycle_grads()),
        ("decoder objective", decoder_objective_grad()),
    ]
}
