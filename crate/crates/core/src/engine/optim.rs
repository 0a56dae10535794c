use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::engine::{Element, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum }
    }
}

/// Moment buffers for one parameter. SGD only uses `first` (velocity).
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T: Element = f32> {
    pub kind: OptimizerKind,
    pub lr: f64,
    step_count: u64,
    moments: IndexMap<String, Moments<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerState { kind, lr, step_count: 0, moments: IndexMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Moments<T>)> {
        self.moments.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Rebuilds a state from persisted parts.
    pub fn from_parts(kind: OptimizerKind, lr: f64, step_count: u64, moments: Vec<(String, Moments<T>)>) -> Self {
        OptimizerState { kind, lr, step_count, moments: moments.into_iter().collect() }
    }

    /// Applies one update to every parameter in `params` from its grad buffer.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        for (name, p) in params.iter() {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        let t = self.step_count + 1;
        let lr = self.lr;
        for (name, p) in params.iter_mut() {
            let m = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments { first: vec![T::zero(); p.numel()], second: Vec::new() });
            if m.first.len() != p.numel() {
                return Err(Error::shape("optimizer_step", format!("moment buffer for `{name}` has wrong size")));
            }
            let grad = p.grad().expect("checked above").to_vec();
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let (mu, lr) = (T::from_f64_lossy(momentum), T::from_f64_lossy(lr));
                    for i in 0..data.len() {
                        m.first[i] = mu * m.first[i] + grad[i];
                        data[i] -= lr * m.first[i];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    if m.second.len() != data.len() {
                        m.second = vec![T::zero(); data.len()];
                    }
                    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
                    let c1 = T::from_f64_lossy(1.0 - beta1.powi(t as i32));
                    let c2 = T::from_f64_lossy(1.0 - beta2.powi(t as i32));
                    let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(eps));
                    for i in 0..data.len() {
                        let g = grad[i];
                        m.first[i] = b1 * m.first[i] + (T::one() - b1) * g;
                        m.second[i] = b2 * m.second[i] + (T::one() - b2) * g * g;
                        let mhat = m.first[i] / c1;
                        let vhat = m.second[i] / c2;
                        data[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("optimizer_step"));
            }
        }
        self.step_count = t;
        Ok(())
    }
}
