mod common;

use proptest::prelude::*;
use voxrecon::engine::{conv_out_len, Tape, Tensor};
use voxrecon::nets::BN_EPS;

/// Direct zero-padded cross-correlation.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            for a in 0..ho {
                for b in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let (ih, iw) = (
                                    (a * stride + i) as isize - pad as isize,
                                    (b * stride + j) as isize - pad as isize,
                                );
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                    acc += x.data()[((ni * c + ci) * h + ih as usize) * w + iw as usize]
                                        * k.data()[((oi * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    y[((ni * o + oi) * ho + a) * wo + b] = acc;
                }
            }
        }
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_loop_and_shape_formula(
        n in 1usize..40, c in 1usize..3, h in 1usize..9, w in 1usize..9, o in 1usize..4,
        k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..4, pad in 0usize..3, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut r = common::rng(seed);
        let x = common::random_tensor(&mut r, &[n, c, h, w], 0.0);
        let kern = common::random_tensor(&mut r, &[o, c, k, k], 0.0);
        let tape = Tape::new();
        let y = tape.constant(&x).unwrap().conv2d(tape.constant(&kern).unwrap(), None, stride, pad).unwrap();
        let ho = conv_out_len(h, k, stride, pad).unwrap();
        let wo = conv_out_len(w, k, stride, pad).unwrap();
        prop_assert_eq!(y.shape(), vec![n, o, ho, wo]);
        for (a, b) in y.value().iter().zip(naive_conv(&x, &kern, stride, pad)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_and_dense_shapes(n in 1usize..5, c in 1usize..4, h in 1usize..6, w in 1usize..6, out in 1usize..7) {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::zeros(&[n, c, h, w])).unwrap();
        prop_assert_eq!(x.upsample2x().unwrap().shape(), vec![n, c, 2 * h, 2 * w]);
        let flat = x.flatten_rows().unwrap();
        let wt = tape.constant(&Tensor::zeros(&[out, c * h * w])).unwrap();
        prop_assert_eq!(flat.fully_connected(wt, None).unwrap().shape(), vec![n, out]);
    }

    #[test]
    fn batch_norm_train_standardizes(n in 2usize..6, c in 1usize..4, side in 1usize..4, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let x = common::random_tensor(&mut r, &[n, c, side, side], 0.0);
        let tape = Tape::new();
        let ones = tape.constant(&Tensor::full(&[c], 1.0)).unwrap();
        let zeros = tape.constant(&Tensor::zeros(&[c])).unwrap();
        let (y, _) = tape.constant(&x).unwrap().batch_norm_train(ones, zeros, BN_EPS).unwrap();
        let v = y.value();
        let plane = side * side;
        for ci in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|ni| v[(ni * c + ci) * plane..(ni * c + ci + 1) * plane].to_vec()).collect();
            let m = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / m;
            let var = vals.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / m;
            let raw: Vec<f64> = (0..n).flat_map(|ni| x.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane].to_vec()).collect();
            let raw_mean = raw.iter().sum::<f64>() / m;
            let raw_var = raw.iter().map(|z| (z - raw_mean).powi(2)).sum::<f64>() / m;
            prop_assert!(mean.abs() < 1e-5);
            // exact value is raw_var / (raw_var + eps)
            prop_assert!((var - raw_var / (raw_var + BN_EPS)).abs() < 1e-9);
            if raw_var > 0.1 {
                prop_assert!((var - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let x = common::random_tensor(&mut r, &[3, 2, 5, 5], 0.0);
        let k = common::random_tensor(&mut r, &[4, 2, 3, 3], 0.0);
        let run = || {
            let tape = Tape::new();
            let kv = tape.leaf(&k.clone().with_requires_grad(true)).unwrap();
            let y = tape.constant(&x).unwrap().conv2d(kv, None, 1, 1).unwrap().relu().unwrap().sum().unwrap();
            let g = tape.backward(y).unwrap();
            (y.item().to_bits(), g.wrt(&kv).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
