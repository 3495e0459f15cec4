use anyhow::Result;
use serde::{Deserialize, Serialize};
use vla_align_core::model::{forward, next_token_logits, ModelConfig, MultimodalSequence};
use vla_align_core::numerics::ParamStore;
use vla_align_core::taskgen::{render, Action, Canvas, Episode, PAD};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rollout {
    pub success: bool,
    /// Emitted tokens, one per environment step.
    pub actions: Vec<usize>,
    /// Tokens that were not actions and ran as no-ops.
    pub invalid: usize,
}

/// Greedy closed-loop rollout: the argmax token at the first action position
/// is executed each step until the episode ends or `max_steps` is reached.
pub fn rollout(model: &ModelConfig, params: &ParamStore, episode: &Episode, max_steps: usize) -> Result<Rollout> {
    let canvas = Canvas::for_model(model)?;
    let mut world = episode.world();
    let mut actions = Vec::new();
    let mut invalid = 0;
    while !world.done && actions.len() < max_steps {
        let image = render(&world.scene, canvas.patch);
        let seq = MultimodalSequence::new(image, episode.instruction_tokens.clone(), vec![PAD], vec![0])?;
        let trace = forward(model, params, &seq, None)?;
        let logits = next_token_logits(&trace, model, &seq);
        let token = argmax(&logits);
        if Action::from_token(token).is_none() {
            invalid += 1;
        }
        world.step_token(token);
        actions.push(token);
    }
    Ok(Rollout {
        success: world.success(),
        actions,
        invalid,
    })
}

/// Executes a fixed token sequence open-loop.
pub fn replay(episode: &Episode, tokens: &[usize]) -> bool {
    let mut world = episode.world();
    for &t in tokens {
        if world.done {
            break;
        }
        world.step_token(t);
    }
    world.success()
}

pub fn max_steps(episode: &Episode, factor: usize) -> usize {
    episode.expert_actions.len() * factor
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
