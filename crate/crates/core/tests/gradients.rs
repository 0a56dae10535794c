mod common;

use common::gradsuite as g;
use common::Check;

fn assert_passes(name: &str, c: Check) {
    println!("{name}: worst rel err {:.2e} over {} coords, {} probes on kinks skipped", c.worst, c.probed, c.kinks);
    assert!(c.passed(), "{name}: {c:?}");
}

macro_rules! grad_tests {
    ($($f:ident),* $(,)?) => {
        $(#[test] fn $f() { assert_passes(stringify!($f), g::$f()); })*
    };
}

grad_tests!(
    elementwise_binary,
    elementwise_unary,
    reductions_and_reshape,
    fully_connected,
    conv2d,
    upsample2x,
    batch_norm_train,
    batch_norm_eval,
    row_ops,
    row_norm_and_cosine,
    spatial_diffs,
    fmri_loss_grad,
    tv_grad,
    feature_bank_grad,
    image_loss_grad,
    encoder_grad,
    decoder_grad,
    cycle_grads,
    decoder_objective_grad,
);

#[test]
fn square_sum_gradient() {
    let tape = voxrecon::engine::Tape::<f64>::new();
    let x = voxrecon::engine::Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad(true);
    let xv = tape.leaf(&x).unwrap();
    let g = tape.backward(xv.square().unwrap().sum().unwrap()).unwrap();
    assert_eq!(g.wrt(&xv).unwrap(), &[2.0, 4.0]);
}

#[test]
fn second_accumulation_doubles_grads() {
    use voxrecon::engine::{ParamStore, Tape, Tensor};
    let mut store = ParamStore::<f64>::new(0);
    store.insert("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
    let tape = Tape::new();
    let loss = tape.param(&store, "w").unwrap().square().unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    store.accumulate(&g).unwrap();
    let once = store.get("w").unwrap().grad().unwrap().to_vec();
    let g = tape.backward(loss).unwrap();
    store.accumulate(&g).unwrap();
    let twice = store.get("w").unwrap().grad().unwrap();
    assert!(once.iter().zip(twice).all(|(a, b)| *b == 2.0 * a));
}
