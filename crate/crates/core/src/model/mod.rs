//! The miniature vision-language-action transformer.
//!
//! Sequence layout: `k` visual tokens from the patch encoder, then the
//! instruction tokens, then all but the last target token (teacher forcing).
//! The logit row at position `k + |text| - 1 + t` predicts target `t`.
//! Blocks are pre-norm residual: `h + Attn(LN(h))`, then `+ FFN(LN(.))`, and
//! the head reads the last hidden state directly.

mod adapters;
mod checkpoint;
mod config;

pub use adapters::{
    adapter_a_name, adapter_b_name, adapter_for, apply_adapters, init_adapters, linear_layers,
    AdapterSpec, LowRankAdapter, ADAPTER_PREFIX,
};
pub use checkpoint::{read_checkpoint, read_checkpoint_bytes, write_checkpoint, checkpoint_bytes};
pub use config::ModelConfig;

use crate::error::{Error, Result};
use crate::numerics::{
    Bindings, GradTape, ParamStore, Prng, Tensor, Var, LAYER_NORM_EPS,
};

/// Prefix of the parameters that make up the visual encoder.
pub const IMAGE_ENCODER_PREFIX: &str = "img.";

/// One training or inference example.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSequence {
    /// `[grid x grid x channels]`
    pub image: Tensor,
    pub text: Vec<usize>,
    pub targets: Vec<usize>,
    /// 1 where a target contributes to the loss, 0 elsewhere.
    pub mask: Vec<u8>,
}

impl MultimodalSequence {
    pub fn new(image: Tensor, text: Vec<usize>, targets: Vec<usize>, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != targets.len() {
            return Err(Error::Input(format!(
                "mask length {} differs from target length {}",
                mask.len(),
                targets.len()
            )));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::Input("mask entries must be 0 or 1".into()));
        }
        Ok(Self {
            image,
            text,
            targets,
            mask,
        })
    }

    /// Tokens fed to the text encoder: instruction then shifted targets.
    pub fn input_tokens(&self) -> Vec<usize> {
        let mut t = self.text.clone();
        if self.targets.len() > 1 {
            t.extend_from_slice(&self.targets[..self.targets.len() - 1]);
        }
        t
    }

    pub fn len(&self, cfg: &ModelConfig) -> usize {
        cfg.visual_tokens() + self.input_tokens().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Logit row that predicts target `t`.
    pub fn prediction_position(&self, cfg: &ModelConfig, t: usize) -> usize {
        cfg.visual_tokens() + self.text.len() + t - 1
    }
}

/// Everything a forward pass exposes.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `h^0 .. h^L`, each `[seq x width]`.
    pub hidden: Vec<Tensor>,
    /// `attention[layer][head]`, each `[seq x seq]`.
    pub attention: Vec<Vec<Tensor>>,
    /// `[seq x vocab]`
    pub logits: Tensor,
    pub visual_tokens: usize,
}

/// Tape handles produced by [`forward_on_tape`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub hidden: Vec<Var>,
    pub attention: Vec<Var>,
    pub logits: Var,
    /// Output of the image encoder, `[k x width]`.
    pub visual: Var,
    /// Output of the text encoder.
    pub text: Var,
}

impl ForwardVars {
    pub fn trace(&self, tape: &GradTape, cfg: &ModelConfig) -> ForwardTrace {
        ForwardTrace {
            hidden: self.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
            attention: self
                .attention
                .iter()
                .map(|&v| tape.attention_probs(v).map(<[Tensor]>::to_vec).unwrap_or_default())
                .collect(),
            logits: tape.value(self.logits).clone(),
            visual_tokens: cfg.visual_tokens(),
        }
    }
}

/// Fresh parameters. Residual output projections are scaled down by
/// `sqrt(2L)` so deep stacks start close to the identity.
pub fn init_params(cfg: &ModelConfig, rng: &mut Prng) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.width;
    let f = cfg.ffn_width();
    let k = cfg.visual_tokens();
    let lin = |rows: usize, cols: usize, rng: &mut Prng| {
        Tensor::randn(&[rows, cols], 1.0 / (cols as f64).sqrt(), rng)
    };
    let resid = 1.0 / ((2 * cfg.layers) as f64).sqrt();
    let mut p = ParamStore::new();
    p.insert("img.w1", lin(d, cfg.patch_dim(), rng));
    p.insert("img.b1", Tensor::zeros(&[d]));
    p.insert("img.w2", lin(d, d, rng));
    p.insert("img.b2", Tensor::zeros(&[d]));
    p.insert("img.pos", Tensor::randn(&[k, d], 0.1, rng));
    p.insert("txt.emb", Tensor::randn(&[cfg.vocab, d], 0.5, rng));
    p.insert("txt.pos", Tensor::randn(&[cfg.max_text_len(), d], 0.1, rng));
    for l in 0..cfg.layers {
        p.insert(format!("blk{l}.ln1.g"), Tensor::filled(&[d], 1.0));
        p.insert(format!("blk{l}.ln1.b"), Tensor::zeros(&[d]));
        p.insert(format!("blk{l}.wq"), lin(d, d, rng));
        p.insert(format!("blk{l}.wk"), lin(d, d, rng));
        p.insert(format!("blk{l}.wv"), lin(d, d, rng));
        p.insert(format!("blk{l}.wo"), lin(d, d, rng).scale(resid));
        p.insert(format!("blk{l}.ln2.g"), Tensor::filled(&[d], 1.0));
        p.insert(format!("blk{l}.ln2.b"), Tensor::zeros(&[d]));
        p.insert(format!("blk{l}.ff1.w"), lin(f, d, rng));
        p.insert(format!("blk{l}.ff1.b"), Tensor::zeros(&[f]));
        p.insert(format!("blk{l}.ff2.w"), lin(d, f, rng).scale(resid));
        p.insert(format!("blk{l}.ff2.b"), Tensor::zeros(&[d]));
    }
    p.insert("head.w", lin(cfg.vocab, d, rng));
    Ok(p)
}

/// Splits an image into non-overlapping patches, one flattened row per
/// patch in row-major patch order; pixels within a patch are row-major with
/// channels innermost.
pub fn patchify(image: &Tensor, grid: usize, patch: usize, channels: usize) -> Result<Tensor> {
    if image.shape() != [grid, grid, channels] {
        return Err(Error::shape("patchify", image.shape(), &[grid, grid, channels]));
    }
    let side = grid / patch;
    let pd = patch * patch * channels;
    let px = image.data();
    let mut out = Vec::with_capacity(side * side * pd);
    for pr in 0..side {
        for pc in 0..side {
            for dy in 0..patch {
                for dx in 0..patch {
                    let (y, x) = (pr * patch + dy, pc * patch + dx);
                    let base = (y * grid + x) * channels;
                    out.extend_from_slice(&px[base..base + channels]);
                }
            }
        }
    }
    Tensor::matrix(side * side, pd, out)
}

/// Applies linear layer `name` to `x`. When `lora.<name>.*` is bound the
/// effective weight `W + (alpha/r) B A` is built on the tape.
fn linear(
    tape: &mut GradTape,
    b: &Bindings,
    name: &str,
    x: Var,
    adapters: Option<AdapterSpec>,
) -> Result<Var> {
    let mut w = b.get(name)?;
    if let Some(spec) = adapters {
        let (an, bn) = (adapter_a_name(name), adapter_b_name(name));
        if b.contains(&an) && b.contains(&bn) {
            let ba = tape.matmul(b.get(&bn)?, b.get(&an)?)?;
            let delta = tape.scale(ba, spec.scale());
            w = tape.add(w, delta)?;
        }
    }
    tape.matmul_t(x, w)
}

fn linear_bias(
    tape: &mut GradTape,
    b: &Bindings,
    name: &str,
    x: Var,
    adapters: Option<AdapterSpec>,
) -> Result<Var> {
    let y = linear(tape, b, &format!("{name}.w"), x, adapters)?;
    tape.add_row(y, b.get(&format!("{name}.b"))?)
}

/// Patch perceptron: patchify, `GELU(W1 x + b1)`, `W2 . + b2`, plus the
/// per-patch position bias.
pub fn encode_image_on_tape(
    tape: &mut GradTape,
    b: &Bindings,
    cfg: &ModelConfig,
    image: &Tensor,
    adapters: Option<AdapterSpec>,
) -> Result<Var> {
    let patches = patchify(image, cfg.grid, cfg.patch, cfg.channels)?;
    let x = tape.constant(patches);
    let h = linear(tape, b, "img.w1", x, adapters)?;
    let h = tape.add_row(h, b.get("img.b1")?)?;
    let h = tape.gelu(h);
    let h = linear(tape, b, "img.w2", h, adapters)?;
    let h = tape.add_row(h, b.get("img.b2")?)?;
    tape.add(h, b.get("img.pos")?)
}

/// Embedding lookup plus learned position offsets starting at 0.
pub fn encode_text_on_tape(
    tape: &mut GradTape,
    b: &Bindings,
    cfg: &ModelConfig,
    tokens: &[usize],
) -> Result<Var> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Input(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab
        )));
    }
    if tokens.len() > cfg.max_text_len() {
        return Err(Error::Input(format!(
            "{} text tokens exceed the {} available positions",
            tokens.len(),
            cfg.max_text_len()
        )));
    }
    let emb = tape.gather_rows(b.get("txt.emb")?, tokens)?;
    let pos = tape.slice_rows(b.get("txt.pos")?, 0, tokens.len())?;
    tape.add(emb, pos)
}

/// Records a full forward pass on `tape`.
pub fn forward_on_tape(
    tape: &mut GradTape,
    b: &Bindings,
    cfg: &ModelConfig,
    seq: &MultimodalSequence,
    adapters: Option<AdapterSpec>,
) -> Result<ForwardVars> {
    let n = seq.len(cfg);
    if n > cfg.max_len {
        return Err(Error::Input(format!(
            "sequence of {n} tokens exceeds max_len {}",
            cfg.max_len
        )));
    }
    let visual = encode_image_on_tape(tape, b, cfg, &seq.image, adapters)?;
    let text = encode_text_on_tape(tape, b, cfg, &seq.input_tokens())?;
    let mut h = tape.concat_rows(&[visual, text])?;
    let mut hidden = vec![h];
    let mut attention = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = |s: &str| format!("blk{l}.{s}");
        let a = tape.layer_norm(h, b.get(&p("ln1.g"))?, b.get(&p("ln1.b"))?, LAYER_NORM_EPS)?;
        let q = linear(tape, b, &p("wq"), a, adapters)?;
        let k = linear(tape, b, &p("wk"), a, adapters)?;
        let v = linear(tape, b, &p("wv"), a, adapters)?;
        let att = tape.causal_attention(q, k, v, cfg.heads)?;
        attention.push(att);
        let o = linear(tape, b, &p("wo"), att, adapters)?;
        h = tape.add(h, o)?;
        let a = tape.layer_norm(h, b.get(&p("ln2.g"))?, b.get(&p("ln2.b"))?, LAYER_NORM_EPS)?;
        let f = linear_bias(tape, b, &p("ff1"), a, adapters)?;
        let f = tape.gelu(f);
        let f = linear_bias(tape, b, &p("ff2"), f, adapters)?;
        h = tape.add(h, f)?;
        hidden.push(h);
    }
    let logits = linear(tape, b, "head.w", h, adapters)?;
    Ok(ForwardVars {
        hidden,
        attention,
        logits,
        visual,
        text,
    })
}

/// Masked next-token loss on the tape.
pub fn vla_loss_on_tape(
    tape: &mut GradTape,
    cfg: &ModelConfig,
    vars: &ForwardVars,
    seq: &MultimodalSequence,
) -> Result<Var> {
    let (positions, weights) = loss_layout(cfg, seq);
    tape.cross_entropy(vars.logits, &positions, &seq.targets, &weights)
}

fn loss_layout(cfg: &ModelConfig, seq: &MultimodalSequence) -> (Vec<usize>, Vec<f64>) {
    let positions = (0..seq.targets.len())
        .map(|t| seq.prediction_position(cfg, t))
        .collect();
    let weights = seq.mask.iter().map(|&m| f64::from(m)).collect();
    (positions, weights)
}

/// Inference-only forward pass; nothing is tracked.
pub fn forward(
    cfg: &ModelConfig,
    params: &ParamStore,
    seq: &MultimodalSequence,
    adapters: Option<AdapterSpec>,
) -> Result<ForwardTrace> {
    let mut tape = GradTape::new();
    let b = params.bind(&mut tape, |_| false);
    let vars = forward_on_tape(&mut tape, &b, cfg, seq, adapters)?;
    Ok(vars.trace(&tape, cfg))
}

pub fn encode_image(cfg: &ModelConfig, params: &ParamStore, image: &Tensor) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let b = params.bind(&mut tape, |_| false);
    let v = encode_image_on_tape(&mut tape, &b, cfg, image, None)?;
    Ok(tape.value(v).clone())
}

pub fn encode_text(cfg: &ModelConfig, params: &ParamStore, tokens: &[usize]) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let b = params.bind(&mut tape, |_| false);
    let v = encode_text_on_tape(&mut tape, &b, cfg, tokens)?;
    Ok(tape.value(v).clone())
}

/// Mean over masked targets of `-log p(y_t | prefix)`; 0 when the mask is empty.
pub fn vla_loss(trace: &ForwardTrace, cfg: &ModelConfig, seq: &MultimodalSequence) -> Result<f64> {
    let mut tape = GradTape::new();
    let logits = tape.constant(trace.logits.clone());
    let (positions, weights) = loss_layout(cfg, seq);
    let l = tape.cross_entropy(logits, &positions, &seq.targets, &weights)?;
    tape.value(l).item()
}

/// First `k` rows of `h^layer`.
pub fn extract_vision_tokens(trace: &ForwardTrace, layer: usize) -> Result<Tensor> {
    let h = trace.hidden.get(layer).ok_or_else(|| {
        Error::Input(format!(
            "layer {layer} outside 0..={}",
            trace.hidden.len().saturating_sub(1)
        ))
    })?;
    h.slice_rows(0, trace.visual_tokens)
}

/// Attention from `query` onto the visual tokens of block `layer`, head
/// `head`, renormalised to sum to one.
pub fn attention_map(trace: &ForwardTrace, layer: usize, head: usize, query: usize) -> Result<Tensor> {
    let heads = trace
        .attention
        .get(layer)
        .ok_or_else(|| Error::Input(format!("attention layer {layer} out of range")))?;
    let p = heads
        .get(head)
        .ok_or_else(|| Error::Input(format!("attention head {head} out of range")))?;
    if query >= p.rows() {
        return Err(Error::Input(format!(
            "query position {query} outside sequence of {}",
            p.rows()
        )));
    }
    let k = trace.visual_tokens;
    let row = &p.row(query)[..k];
    let total: f64 = row.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numeric("no attention mass on visual tokens".into()));
    }
    Ok(Tensor::vector(row.iter().map(|v| v / total).collect()))
}

/// Logits of the first target position, i.e. the next-action distribution.
pub fn next_token_logits(trace: &ForwardTrace, cfg: &ModelConfig, seq: &MultimodalSequence) -> Vec<f64> {
    trace.logits.row(seq.prediction_position(cfg, 0)).to_vec()
}
