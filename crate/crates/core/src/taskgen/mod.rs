//! Procedural pick-and-place gridworld: scenes, an expert planner, held-out
//! variation factors and board-selection probe tasks.

mod episode;
mod scene;
mod split;
mod vlthink;
pub mod vocab;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use episode::{episodes_to_string, read_episodes, write_episodes, Episode, EPISODE_HEADER};
pub use scene::{
    parse_render, render, Board, Cell, CellView, Glyph, Object, Reposition, Scene, World,
    CHANNELS, COLOR_SCALE, GLYPH_SCALE, NUM_GLYPH_CODES, NUM_TEXTURES,
};
pub use split::{Axis, Environment, Factor, SplitSpec};
pub use vlthink::{episode_concept, make_vlthink_tasks, Category, Concept};
pub use vocab::{Action, PAD};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Prng;
use vocab::{w, COLORS, OBJECTS, RECEPTACLES};

/// Instruction templates; `O` is the object slot and `T` the target slot.
pub const TEMPLATES: [&[&str]; 4] = [
    &["put", "the", "O", "on", "the", "T"],
    &["place", "the", "O", "onto", "the", "T"],
    &["move", "the", "O", "to", "the", "T"],
    &["pick", "up", "the", "O", "and", "drop", "it", "on", "the", "T"],
];

/// Fraction of the expert trajectory after which a repositioned object moves.
pub const REPOSITION_FRACTION: f64 = 0.4;

/// Cells per side and pixels per cell side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub side: usize,
    pub patch: usize,
}

impl Default for Canvas {
    fn default() -> Self {
        Self { side: 4, patch: 2 }
    }
}

impl Canvas {
    /// Canvas whose cells coincide with the model's patches.
    pub fn for_model(cfg: &ModelConfig) -> Result<Canvas> {
        if cfg.channels != CHANNELS || cfg.grid % cfg.patch != 0 {
            return Err(Error::Config(format!(
                "model expects {}-channel {}px images in {}px patches; scenes need {CHANNELS} channels",
                cfg.channels, cfg.grid, cfg.patch
            )));
        }
        let c = Canvas {
            side: cfg.grid / cfg.patch,
            patch: cfg.patch,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch < 2 || self.side < 3 {
            return Err(Error::Config("canvas needs side >= 3 and patch >= 2".into()));
        }
        Ok(())
    }
}

/// A sampled scene together with its goal and instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub scene: Scene,
    pub goal: Cell,
    pub instruction: Vec<usize>,
    pub tags: BTreeMap<String, String>,
    pub reposition: Option<Reposition>,
}

/// Index in `0..n` from exactly one uniform draw.
pub(crate) fn draw(rng: &mut Prng, n: usize) -> usize {
    ((rng.uniform() * n as f64) as usize).min(n - 1)
}

/// Random permutation using exactly `n` uniform draws.
pub(crate) fn permutation(rng: &mut Prng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (0..n).rev() {
        let j = draw(rng, i + 1);
        p.swap(i, j);
    }
    p
}

pub(crate) fn instruction(template: usize, object: &str, target: &[&str]) -> Vec<usize> {
    let mut out = Vec::new();
    for &tok in TEMPLATES[template] {
        match tok {
            "O" => out.push(w(object)),
            "T" => out.extend(target.iter().map(|t| w(t))),
            other => out.push(w(other)),
        }
    }
    out
}

/// Samples a pick-and-place scene. Every factor is drawn with a fixed number
/// of random draws, so scenes from the same generator state differ only in
/// the factor whose held-out pool `env` selects.
pub fn gen_scene(rng: &mut Prng, split: &SplitSpec, env: Environment, canvas: Canvas) -> Result<Task> {
    split.validate()?;
    canvas.validate()?;
    let held = |e: Environment| env == e;
    let from = |rng: &mut Prng, pool: &[u8]| pool[draw(rng, pool.len())];

    let object = from(rng, split.objects.pool(held(Environment::Object)));
    let receptacle = from(rng, split.receptacles.pool(held(Environment::Receptacle)));
    let template = from(rng, split.templates.pool(held(Environment::Instruction)));
    let texture = from(rng, split.textures.pool(held(Environment::Texture)));
    let noise_pool = split.noise.pool(held(Environment::Noise));
    let noise = noise_pool[draw(rng, noise_pool.len())];
    let region = from(rng, split.start_regions.pool(held(Environment::Pose)));
    let rep_pool = split.reposition.pool(held(Environment::Reposition));
    let reposition = rep_pool[draw(rng, rep_pool.len())];

    let n_distractors = 1 + draw(rng, 2);
    let mut others: Vec<u8> = split
        .receptacles
        .train
        .iter()
        .copied()
        .filter(|&r| r != receptacle)
        .collect();
    let mut distractors = Vec::with_capacity(n_distractors);
    for _ in 0..2 {
        let d = others.remove(draw(rng, others.len()));
        distractors.push(d);
    }
    distractors.truncate(n_distractors);

    let object_color = draw(rng, COLORS.len()) as u8;
    let board_colors: Vec<u8> = (0..3).map(|_| draw(rng, COLORS.len()) as u8).collect();
    let cells = permutation(rng, canvas.side * canvas.side);
    let cell = |i: usize| Cell::new(cells[i] / canvas.side, cells[i] % canvas.side);
    let half = canvas.side / 2;
    let agent_row = draw(rng, half) + if region == 1 { canvas.side - half } else { 0 };
    let agent = Cell::new(agent_row, draw(rng, canvas.side));
    let noise_seed = rng.next_u64();
    let rep_draw = rng.uniform();

    let mut boards = vec![Board {
        cell: cell(0),
        glyph: Glyph::Receptacle(receptacle),
        color: board_colors[0],
    }];
    for (i, &d) in distractors.iter().enumerate() {
        boards.push(Board {
            cell: cell(1 + i),
            glyph: Glyph::Receptacle(d),
            color: board_colors[1 + i],
        });
    }
    let scene = Scene {
        side: canvas.side,
        agent,
        holding: false,
        object: Object {
            cell: cell(3),
            class: object,
            color: object_color,
        },
        boards,
        texture,
        noise,
        noise_seed,
        tick: 0,
    };
    scene.validate()?;
    let goal = scene.boards[0].cell;
    let reposition = if reposition {
        Some(plan_reposition(&scene, goal, rep_draw)?)
    } else {
        None
    };

    let mut tags = BTreeMap::new();
    tags.insert("environment".into(), env.name().into());
    tags.insert(
        "axis".into(),
        env.axis().map_or("id", Axis::name).to_string(),
    );
    tags.insert("object".into(), object.to_string());
    tags.insert("receptacle".into(), receptacle.to_string());
    tags.insert("template".into(), template.to_string());
    tags.insert("texture".into(), texture.to_string());
    tags.insert("noise".into(), noise.to_string());
    tags.insert("start_region".into(), region.to_string());
    tags.insert("reposition".into(), reposition.is_some().to_string());

    Ok(Task {
        instruction: instruction(
            template as usize,
            OBJECTS[object as usize],
            &[RECEPTACLES[receptacle as usize]],
        ),
        scene,
        goal,
        tags,
        reposition,
    })
}

fn walk(from: Cell, to: Cell, out: &mut Vec<Action>) {
    let (r, c) = (from.row as isize, from.col as isize);
    let (tr, tc) = (to.row as isize, to.col as isize);
    let v = if tr < r { Action::Up } else { Action::Down };
    out.extend(std::iter::repeat_n(v, (tr - r).unsigned_abs()));
    let h = if tc < c { Action::Left } else { Action::Right };
    out.extend(std::iter::repeat_n(h, (tc - c).unsigned_abs()));
}

/// Shortest plan: walk to the object (rows first), pick, walk to the goal,
/// place. A held object skips straight to the goal.
pub fn expert_policy(scene: &Scene, goal: Cell) -> Result<Vec<Action>> {
    let inside = |c: Cell| c.row < scene.side && c.col < scene.side;
    if !inside(goal) || !inside(scene.agent) || !inside(scene.object.cell) {
        return Err(Error::Planning(format!(
            "goal {goal:?} or an entity lies outside the {0}x{0} grid",
            scene.side
        )));
    }
    let mut plan = Vec::new();
    let mut pos = scene.agent;
    if !scene.holding {
        walk(pos, scene.object.cell, &mut plan);
        plan.push(Action::Pick);
        pos = scene.object.cell;
    }
    walk(pos, goal, &mut plan);
    plan.push(Action::Place);
    Ok(plan)
}

/// Chooses when and where the object teleports: at a fixed fraction of the
/// expert plan (never after the pick) to a cell free at that moment.
pub fn plan_reposition(scene: &Scene, goal: Cell, u: f64) -> Result<Reposition> {
    let plan = expert_policy(scene, goal)?;
    let pick = plan.iter().position(|&a| a == Action::Pick).unwrap_or(0);
    let step = ((REPOSITION_FRACTION * plan.len() as f64).floor() as usize).min(pick);
    let mut world = World::new(scene.clone(), vec![goal], None);
    for &a in &plan[..step] {
        world.step(a);
    }
    let mut free = world.scene.free_cells();
    free.retain(|&c| c != goal);
    if free.is_empty() {
        return Err(Error::Planning("no free cell for repositioning".into()));
    }
    let cell = free[((u * free.len() as f64) as usize).min(free.len() - 1)];
    Ok(Reposition {
        step: scene.tick + step as u64,
        cell,
    })
}

/// Runs the closed-loop expert, re-planning after every step, and records
/// the frames it saw.
pub fn build_episode(task: &Task, canvas: Canvas) -> Result<Episode> {
    let mut world = World::new(task.scene.clone(), vec![task.goal], task.reposition);
    let limit = 4 * canvas.side * canvas.side;
    let mut frames = Vec::new();
    let mut actions = Vec::new();
    while !world.done {
        if actions.len() >= limit {
            return Err(Error::Planning("expert exceeded its step budget".into()));
        }
        frames.push(render(&world.scene, canvas.patch));
        let a = expert_policy(&world.scene, task.goal)?[0];
        actions.push(a.token());
        world.step(a);
    }
    if !world.success() {
        return Err(Error::Planning("expert rollout did not satisfy the goal".into()));
    }
    Ok(Episode {
        instruction_tokens: task.instruction.clone(),
        frames,
        expert_actions: actions,
        success_cells: vec![task.goal],
        tags: task.tags.clone(),
        scene: task.scene.clone(),
        reposition: task.reposition,
    })
}

/// `n` expert episodes; episode `i` uses generator stream `rng.split(i)`, so
/// shards can be produced independently and concatenated in order.
pub fn make_dataset(
    n: usize,
    split: &SplitSpec,
    env: Environment,
    rng: &Prng,
    canvas: Canvas,
) -> Result<Vec<Episode>> {
    if n == 0 {
        return Err(Error::Input("dataset size must be at least 1".into()));
    }
    (0..n)
        .map(|i| {
            let mut r = rng.split(i as u64);
            build_episode(&gen_scene(&mut r, split, env, canvas)?, canvas)
        })
        .collect()
}

/// Vision: re-renders with seeded texture noise of the given strength.
/// Execution: adds a mid-episode object teleport. Strength 0 is identity.
pub fn perturb(ep: &Episode, axis: Axis, strength: f64, rng: &mut Prng, canvas: Canvas) -> Result<Episode> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Input(format!("strength {strength} outside [0, 1]")));
    }
    let goal = *ep
        .success_cells
        .first()
        .ok_or_else(|| Error::Input("episode has no success cell".into()))?;
    let mut task = Task {
        scene: ep.scene.clone(),
        goal,
        instruction: ep.instruction_tokens.clone(),
        tags: ep.tags.clone(),
        reposition: ep.reposition,
    };
    match axis {
        Axis::Semantic => {
            return Err(Error::Config("only vision and execution perturbations exist".into()))
        }
        _ if strength == 0.0 => return Ok(ep.clone()),
        Axis::Vision => {
            task.scene.noise = strength;
            task.scene.noise_seed = rng.next_u64();
            task.tags.insert("noise".into(), strength.to_string());
        }
        Axis::Execution => {
            task.reposition = Some(plan_reposition(&task.scene, goal, rng.uniform())?);
            task.tags.insert("reposition".into(), "true".into());
        }
    }
    build_episode(&task, canvas)
}
