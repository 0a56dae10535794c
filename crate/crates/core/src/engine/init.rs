use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};

/// Glorot (Xavier) normal initialization: `N(0, 2 / (fan_in + fan_out))`.
pub fn glorot_normal<T: Element>(shape: &[usize], fan_in: usize, fan_out: usize, seed: u64) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Config(format!("glorot_normal needs positive fans, got {fan_in}/{fan_out}")));
    }
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(&mut rng))))
}

/// Fans of a dense `[out, in]` weight or an OIHW convolution kernel.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [o, i] => (*i, *o),
        [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    }
}
