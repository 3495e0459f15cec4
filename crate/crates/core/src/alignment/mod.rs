//! Projectors, patch-wise similarity losses and the combined objective
//! `l_vla + lambda * l_align`.

mod projector;


use serde::{Deserialize, Serialize};

pub use projector::{
    power_iteration, Projector, ProjectorKind, ProjectorSpec, POWER_ITERATIONS, WHITENING_EPS,
};

use crate::error::{Error, Result};
use crate::model::{ForwardVars, ModelConfig};
use crate::numerics::{GradTape, Tensor, Var};

/// Denominator floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    Cosine,
    /// Negative squared Euclidean distance.
    NegativeL2,
    NtXent,
}

impl SimilarityKind {
    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Cosine => "cosine",
            SimilarityKind::NegativeL2 => "negative_l2",
            SimilarityKind::NtXent => "nt_xent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilaritySpec {
    pub kind: SimilarityKind,
    /// NT-Xent temperature.
    pub temperature: f64,
}

impl Default for SimilaritySpec {
    fn default() -> Self {
        Self {
            kind: SimilarityKind::Cosine,
            temperature: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Backbone hidden states at layer `i*` against the teacher.
    #[serde(rename = "backbone2enc")]
    Backbone2Enc,
    /// The student's own visual encoder output against the teacher.
    #[serde(rename = "enc2enc")]
    Enc2Enc,
}

impl Paradigm {
    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Backbone2Enc => "backbone2enc",
            Paradigm::Enc2Enc => "enc2enc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub lambda: f64,
    /// Hidden-state index; `None` picks the middle block for backbone
    /// alignment and the encoder output (0) for encoder alignment.
    pub layer: Option<usize>,
    pub paradigm: Paradigm,
    pub projector: ProjectorSpec,
    pub similarity: SimilaritySpec,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            layer: None,
            paradigm: Paradigm::Backbone2Enc,
            projector: ProjectorSpec::default(),
            similarity: SimilaritySpec::default(),
        }
    }
}

impl AlignConfig {
    pub fn resolve_layer(&self, layers: usize) -> usize {
        self.layer.unwrap_or(match self.paradigm {
            Paradigm::Backbone2Enc => layers.div_ceil(2),
            Paradigm::Enc2Enc => 0,
        })
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        let layer = self.resolve_layer(model.layers);
        match self.paradigm {
            Paradigm::Backbone2Enc if layer == 0 || layer > model.layers => {
                return Err(Error::Config(format!(
                    "backbone alignment layer must lie in 1..={}, got {layer}",
                    model.layers
                )))
            }
            Paradigm::Enc2Enc if layer != 0 => {
                return Err(Error::Config(format!(
                    "encoder alignment reads the encoder output (layer 0), got {layer}"
                )))
            }
            _ => {}
        }
        if self.similarity.kind == SimilarityKind::NtXent
            && !(self.similarity.temperature.is_finite() && self.similarity.temperature > 0.0)
        {
            return Err(Error::Config("nt_xent temperature must be positive".into()));
        }
        self.projector.validate()
    }
}

fn check_pair(tape: &GradTape, u: Var, z: &Tensor) -> Result<usize> {
    let us = tape.shape(u);
    if us != z.shape() || us.len() != 2 {
        return Err(Error::shape("align_loss", us, z.shape()));
    }
    Ok(us[0])
}

fn normalized(z: &Tensor) -> Tensor {
    let mut out = z.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let d = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_EPS);
        row.iter_mut().for_each(|v| *v /= d);
    }
    out
}

/// `-(1/k) sum_j Sim(u_j, z_j)`; `z` enters as a constant.
pub fn align_loss_on_tape(tape: &mut GradTape, u: Var, z: &Tensor, sim: &SimilaritySpec) -> Result<Var> {
    let k = check_pair(tape, u, z)?;
    if k == 0 {
        return Err(Error::Input("alignment over zero patches".into()));
    }
    match sim.kind {
        SimilarityKind::Cosine => {
            let nu = tape.normalize_rows(u, COSINE_EPS);
            let nz = tape.constant(normalized(z));
            let prod = tape.mul(nu, nz)?;
            let s = tape.sum(prod);
            Ok(tape.scale(s, -1.0 / k as f64))
        }
        SimilarityKind::NegativeL2 => {
            let zc = tape.constant(z.clone());
            let d = tape.sub(u, zc)?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum(sq);
            Ok(tape.scale(s, 1.0 / k as f64))
        }
        SimilarityKind::NtXent => ntxent_on_tape(tape, u, z, sim.temperature),
    }
}

/// InfoNCE over patches of one image: anchor `u_j`, positive `z_j`, the
/// other teacher patches as negatives.
pub fn ntxent_on_tape(tape: &mut GradTape, u: Var, z: &Tensor, temperature: f64) -> Result<Var> {
    let k = check_pair(tape, u, z)?;
    if k < 2 {
        return Err(Error::Input(format!("nt_xent needs at least 2 patches, got {k}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Input(format!("temperature must be positive, got {temperature}")));
    }
    let nu = tape.normalize_rows(u, COSINE_EPS);
    let nz = tape.constant(normalized(z));
    let logits = tape.matmul_t(nu, nz)?;
    let logits = tape.scale(logits, 1.0 / temperature);
    let idx: Vec<usize> = (0..k).collect();
    tape.cross_entropy(logits, &idx, &idx, &vec![1.0; k])
}

fn eval(u: &Tensor, f: impl FnOnce(&mut GradTape, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = GradTape::new();
    let uv = tape.constant(u.clone());
    let out = f(&mut tape, uv)?;
    tape.value(out).item()
}

pub fn align_loss(u: &Tensor, z: &Tensor, sim: &SimilaritySpec) -> Result<f64> {
    eval(u, |t, v| align_loss_on_tape(t, v, z, sim))
}

pub fn ntxent_loss(u: &Tensor, z: &Tensor, temperature: f64) -> Result<f64> {
    eval(u, |t, v| ntxent_on_tape(t, v, z, temperature))
}

pub fn total_loss(l_vla: f64, l_align: f64, lambda: f64) -> f64 {
    l_vla + lambda * l_align
}

pub fn total_loss_on_tape(tape: &mut GradTape, l_vla: Var, l_align: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(l_align, lambda);
    tape.add(l_vla, weighted)
}

/// Student features the configuration aligns, `[k x d_e]`.
pub fn student_features(tape: &mut GradTape, vars: &ForwardVars, model: &ModelConfig, cfg: &AlignConfig) -> Result<Var> {
    let layer = cfg.resolve_layer(model.layers);
    match cfg.paradigm {
        Paradigm::Enc2Enc => Ok(vars.visual),
        Paradigm::Backbone2Enc => {
            let h = *vars.hidden.get(layer).ok_or_else(|| {
                Error::Config(format!("layer {layer} outside 1..={}", model.layers))
            })?;
            tape.slice_rows(h, 0, model.visual_tokens())
        }
    }
}

/// FiLM conditioning: mean of the instruction's text-encoder rows.
pub fn film_condition(tape: &mut GradTape, vars: &ForwardVars, model: &ModelConfig, text_len: usize) -> Result<Var> {
    if text_len == 0 {
        return Ok(tape.constant(Tensor::zeros(&[1, model.width])));
    }
    let t = tape.slice_rows(vars.text, 0, text_len)?;
    tape.mean_rows(t)
}

/// The alignment loss for one forward pass against teacher features `z`.
#[allow(clippy::too_many_arguments)]
pub fn alignment_term(
    tape: &mut GradTape,
    vars: &ForwardVars,
    model: &ModelConfig,
    text_len: usize,
    cfg: &AlignConfig,
    projector: &Projector,
    proj_bindings: &crate::numerics::Bindings,
    z: &Tensor,
) -> Result<Var> {
    cfg.validate(model)?;
    let h = student_features(tape, vars, model, cfg)?;
    let cond = if projector.spec().kind == ProjectorKind::Film {
        Some(film_condition(tape, vars, model, text_len)?)
    } else {
        None
    };
    let u = projector.project_on_tape(tape, proj_bindings, h, cond)?;
    align_loss_on_tape(tape, u, z, &cfg.similarity)
}
