//! Low-rank adapters on every linear layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{matmul, ParamStore, Prng, Tensor};

pub const ADAPTER_PREFIX: &str = "lora.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
        }
    }
}

impl AdapterSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// One factorised weight delta `(alpha / r) * B . A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    /// `[r x d_in]`
    pub a: Tensor,
    /// `[d_out x r]`
    pub b: Tensor,
    pub spec: AdapterSpec,
}

impl LowRankAdapter {
    pub fn delta(&self) -> Result<Tensor> {
        Ok(matmul(&self.b, &self.a)?.scale(self.spec.scale()))
    }
}

pub fn adapter_a_name(layer: &str) -> String {
    format!("{ADAPTER_PREFIX}{layer}.a")
}

pub fn adapter_b_name(layer: &str) -> String {
    format!("{ADAPTER_PREFIX}{layer}.b")
}

/// Every weight matrix the model applies as a linear map.
pub fn linear_layers(cfg: &ModelConfig) -> Vec<String> {
    let mut names = vec!["img.w1".to_string(), "img.w2".to_string()];
    for l in 0..cfg.layers {
        for w in ["wq", "wk", "wv", "wo", "ff1.w", "ff2.w"] {
            names.push(format!("blk{l}.{w}"));
        }
    }
    names.push("head.w".to_string());
    names
}

/// Adapter parameters for every linear layer of `base`: `A` Gaussian with
/// variance `1 / d_in`, `B` zero, so the adapted model starts identical.
pub fn init_adapters(
    cfg: &ModelConfig,
    base: &ParamStore,
    spec: AdapterSpec,
    rng: &mut Prng,
) -> Result<ParamStore> {
    if spec.rank == 0 {
        return Err(Error::Config("adapter rank must be >= 1".into()));
    }
    let mut out = ParamStore::new();
    for layer in linear_layers(cfg) {
        let w = base.get(&layer)?;
        let (d_out, d_in) = (w.rows(), w.cols());
        out.insert(
            adapter_a_name(&layer),
            Tensor::randn(&[spec.rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
        );
        out.insert(adapter_b_name(&layer), Tensor::zeros(&[d_out, spec.rank]));
    }
    Ok(out)
}

/// The adapter stored for `layer`, if any.
pub fn adapter_for(
    adapters: &ParamStore,
    layer: &str,
    spec: AdapterSpec,
) -> Option<LowRankAdapter> {
    let a = adapters.get(&adapter_a_name(layer)).ok()?;
    let b = adapters.get(&adapter_b_name(layer)).ok()?;
    Some(LowRankAdapter {
        a: a.clone(),
        b: b.clone(),
        spec,
    })
}

/// Base parameters with every adapted weight replaced by `W + (alpha/r) B A`.
pub fn apply_adapters(
    params: &ParamStore,
    adapters: &ParamStore,
    spec: AdapterSpec,
) -> Result<ParamStore> {
    let mut merged = params.clone();
    for (name, w) in params.iter() {
        let Some(ad) = adapter_for(adapters, name, spec) else {
            continue;
        };
        if ad.a.cols() != w.cols() || ad.b.rows() != w.rows() || ad.a.rows() != ad.b.cols() {
            return Err(Error::Input(format!(
                "adapter for {name} has A {:?}, B {:?} but weight {:?}",
                ad.a.shape(),
                ad.b.shape(),
                w.shape()
            )));
        }
        let merged_w = w.add(&ad.delta()?)?;
        merged.insert(name.clone(), merged_w);
    }
    Ok(merged)
}
