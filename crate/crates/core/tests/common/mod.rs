#![allow(dead_code)]

pub mod gradsuite;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxrecon::engine::{ParamStore, Tape, Tensor, Var};
use voxrecon::Result;

/// Central-difference step used by every check.
pub const H: f64 = 1e-3;
/// Maximum relative error tolerated.
pub const TOL: f64 = 1e-4;
/// Smooth coordinates compared per check (all of them if fewer exist).
pub const COORDS: usize = 50;
/// Denominator floor, as a fraction of the largest probed gradient, so
/// coordinates whose gradient nearly vanishes compare at the scale of the rest.
const FLOOR: f64 = 1e-2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(analytic: f64, numeric: f64, scale: f64) -> f64 {
    // the absolute floor sits well above roundoff of a central difference
    let denom = analytic.abs().max(numeric.abs()).max(FLOOR * scale).max(1e-9);
    (analytic - numeric).abs() / denom
}

/// Uniform values in `[-1, 1]` kept at least `margin` away from zero, so
/// `abs` and `relu` are probed away from their kinks.
pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = r.gen_range(margin..1.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// `sum(y * w)` for a fixed random `w`, turning any output into a scalar whose
/// gradient is not uniform.
pub fn project<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut r = rng(seed ^ 0x9e37_79b9);
    let w = random_tensor(&mut r, &y.shape(), 0.0);
    y.mul(y.tape().constant(&w)?)?.sum()
}

/// Outcome of one check; `worst` is the largest relative error seen.
#[derive(Debug, Clone, Copy)]
pub struct Check {
    pub worst: f64,
    pub probed: usize,
    pub kinks: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst < TOL && self.probed > 0
    }

    pub fn merge(self, o: Check) -> Check {
        Check { worst: self.worst.max(o.worst), probed: self.probed + o.probed, kinks: self.kinks + o.kinks }
    }

    pub fn empty() -> Check {
        Check { worst: 0.0, probed: 0, kinks: 0 }
    }
}

/// All coordinates in random order; probing stops once `COORDS` smooth ones
/// have been compared.
fn order(r: &mut ChaCha8Rng, total: usize) -> Vec<usize> {
    rand::seq::index::sample(r, total, total).into_vec()
}

/// Third differences are `O(h^3)` on smooth stretches but `O(h)` when a
/// ReLU/abs kink lies inside the stencil, where finite differences are
/// meaningless.
fn straddles_kink(f: [f64; 5], slope: f64) -> bool {
    let [m2, m1, mid, p1, p2] = f;
    let right = p2 - 3.0 * p1 + 3.0 * mid - m1;
    let left = p1 - 3.0 * mid + 3.0 * m1 - m2;
    let roundoff = 1e-14 * f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    right.abs().max(left.abs()) > 1e-5 * H * slope + roundoff
}

struct Probes {
    pairs: Vec<(f64, f64)>,
    kinks: usize,
}

impl Probes {
    fn new() -> Self {
        Probes { pairs: Vec::new(), kinks: 0 }
    }

    fn done(&self) -> bool {
        self.pairs.len() >= COORDS
    }

    fn probe(&mut self, analytic: f64, mid: f64, f: &mut dyn FnMut(f64) -> f64) {
        let v = [f(-2.0 * H), f(-H), mid, f(H), f(2.0 * H)];
        let numeric = (v[3] - v[1]) / (2.0 * H);
        if straddles_kink(v, analytic.abs().max(numeric.abs())) {
            self.kinks += 1;
        } else {
            self.pairs.push((analytic, numeric));
        }
    }

    fn finish(self) -> Check {
        let scale = self.pairs.iter().fold(0.0f64, |m, (a, n)| m.max(a.abs()).max(n.abs()));
        let worst = self.pairs.iter().map(|&(a, n)| rel_err(a, n, scale)).fold(0.0, f64::max);
        Check { worst, probed: self.pairs.len(), kinks: self.kinks }
    }
}

/// Checks d f / d inputs for a scalar function of several input tensors.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> Check
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x).unwrap()).collect();
        f(&tape, &vars).unwrap().item()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(&x.clone().with_requires_grad(true)).unwrap()).collect();
    let loss = f(&tape, &vars).unwrap();
    let mid = loss.item();
    let grads = tape.backward(loss).unwrap();

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut r = rng(seed);
    let mut probes = Probes::new();
    for flat in order(&mut r, total) {
        if probes.done() {
            break;
        }
        let (mut which, mut idx) = (0, flat);
        while idx >= inputs[which].numel() {
            idx -= inputs[which].numel();
            which += 1;
        }
        let analytic = grads.wrt(&vars[which]).map_or(0.0, |g| g[idx]);
        let mut probe = |delta: f64| {
            let mut xs = inputs.to_vec();
            xs[which].data_mut()[idx] += delta;
            eval(&xs)
        };
        probes.probe(analytic, mid, &mut probe);
    }
    probes.finish()
}

/// Checks d f / d parameters for a model holding a `ParamStore`.
pub fn check_params<M, S, F>(model: &M, store: S, seed: u64, f: F) -> Check
where
    M: Clone,
    S: Fn(&mut M) -> &mut ParamStore<f64>,
    F: for<'t> Fn(&'t Tape<f64>, &mut M) -> Result<Var<'t, f64>>,
{
    let mut m = model.clone();
    let tape = Tape::new();
    let loss = f(&tape, &mut m).unwrap();
    let mid = loss.item();
    let grads = tape.backward(loss).unwrap();
    let mut fresh = model.clone();
    let params = store(&mut fresh);
    params.zero_grad();
    params.accumulate(&grads).unwrap();
    let coords: Vec<(String, usize, f64)> = params
        .iter()
        .flat_map(|(name, t)| {
            let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
            g.into_iter().enumerate().map(move |(i, v)| (name.to_string(), i, v))
        })
        .collect();

    let mut r = rng(seed);
    let mut probes = Probes::new();
    for c in order(&mut r, coords.len()) {
        if probes.done() {
            break;
        }
        let (name, idx, analytic) = &coords[c];
        let mut probe = |delta: f64| {
            let mut m = model.clone();
            store(&mut m).get_mut(name).unwrap().data_mut()[*idx] += delta;
            let tape = Tape::new();
            f(&tape, &mut m).unwrap().item()
        };
        probes.probe(*analytic, mid, &mut probe);
    }
    probes.finish()
}
