use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-parameter optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advances the step counter; call once before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Returns the updated value of parameter `name`.
    pub fn apply(&mut self, name: &str, param: &Tensor, grad: &Tensor) -> Tensor {
        match self.kind {
            OptimizerKind::Sgd => param.zip_map(grad, |p, g| p - self.lr * g).expect("same shape"),
            OptimizerKind::Adam => {
                let n = param.len();
                let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                let t = self.t.max(1) as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                let mut out = param.clone();
                for (i, (p, &g)) in out.data_mut().iter_mut().zip(grad.data()).enumerate() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    *p -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                }
                out
            }
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    norm
}
