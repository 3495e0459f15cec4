//! Gridworld state, dynamics and rendering.
//!
//! Each scene cell occupies one `patch x patch` block of pixels, so cells and
//! visual tokens correspond one to one. Within a cell:
//!
//! | pixel | channel 0          | channel 1          |
//! |-------|--------------------|--------------------|
//! | (0,0) | board glyph code   | board color code   |
//! | (0,1) | object glyph code  | object color code  |
//! | (1,0) | agent present      | agent holding      |
//! | (1,1) | held glyph code    | held color code    |
//!
//! Channel 2 of every pixel carries the scene texture plus optional noise.
//! Codes are written as `code / scale` so parsing back is exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mix, Prng, Tensor};
use crate::taskgen::vocab::{Action, COLORS};

pub const GLYPH_SCALE: f64 = 64.0;
pub const COLOR_SCALE: f64 = 8.0;
pub const CHANNELS: usize = 3;
pub const NUM_TEXTURES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    pub fn index(self, side: usize) -> usize {
        self.row * side + self.col
    }
}

/// What is drawn on a board or object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Glyph {
    Object(u8),
    Receptacle(u8),
    Shape(u8),
    Arrow(u8),
    Numeral(u8),
}

pub const NUM_GLYPH_CODES: usize = 33;

impl Glyph {
    /// Distinct positive code per glyph; 0 means "nothing".
    pub fn code(self) -> usize {
        match self {
            Glyph::Object(i) => 1 + i as usize,
            Glyph::Receptacle(i) => 9 + i as usize,
            Glyph::Shape(i) => 15 + i as usize,
            Glyph::Arrow(i) => 20 + i as usize,
            Glyph::Numeral(n) => 23 + n as usize,
        }
    }

    pub fn from_code(code: usize) -> Option<Glyph> {
        Some(match code {
            1..=8 => Glyph::Object((code - 1) as u8),
            9..=14 => Glyph::Receptacle((code - 9) as u8),
            15..=19 => Glyph::Shape((code - 15) as u8),
            20..=23 => Glyph::Arrow((code - 20) as u8),
            24..=32 => Glyph::Numeral((code - 23) as u8),
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Board {
    pub cell: Cell,
    pub glyph: Glyph,
    /// Index into [`COLORS`].
    pub color: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub cell: Cell,
    pub class: u8,
    pub color: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Cells per side.
    pub side: usize,
    pub agent: Cell,
    pub holding: bool,
    pub object: Object,
    pub boards: Vec<Board>,
    pub texture: u8,
    pub noise: f64,
    pub noise_seed: u64,
    pub tick: u64,
}

/// What a single cell shows, as recovered from pixels.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CellView {
    pub board: Option<(usize, usize)>,
    pub object: Option<(usize, usize)>,
    pub agent: bool,
    pub holding: bool,
    pub held: Option<(usize, usize)>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let ok = |c: Cell| c.row < self.side && c.col < self.side;
        if !ok(self.agent) || !ok(self.object.cell) || !self.boards.iter().all(|b| ok(b.cell)) {
            return Err(Error::Input("scene entity outside the grid".into()));
        }
        if self.holding && self.object.cell != self.agent {
            return Err(Error::Input("held object must share the agent cell".into()));
        }
        if self.boards.is_empty() {
            return Err(Error::Input("scene has no board".into()));
        }
        if (self.texture as usize) >= NUM_TEXTURES || self.object.color as usize >= COLORS.len() {
            return Err(Error::Input("texture or color code out of range".into()));
        }
        Ok(())
    }

    pub fn board_at(&self, cell: Cell) -> Option<&Board> {
        self.boards.iter().find(|b| b.cell == cell)
    }

    /// Cells with neither board, object nor agent.
    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for r in 0..self.side {
            for c in 0..self.side {
                let cell = Cell::new(r, c);
                if cell != self.agent && cell != self.object.cell && self.board_at(cell).is_none() {
                    out.push(cell);
                }
            }
        }
        out
    }

    /// Ground-truth per-cell contents, the inverse-render oracle's target.
    pub fn cell_views(&self) -> Vec<CellView> {
        let mut views = vec![CellView::default(); self.side * self.side];
        for b in &self.boards {
            views[b.cell.index(self.side)].board = Some((b.glyph.code(), 1 + b.color as usize));
        }
        let obj = (
            Glyph::Object(self.object.class).code(),
            1 + self.object.color as usize,
        );
        let a = &mut views[self.agent.index(self.side)];
        a.agent = true;
        if self.holding {
            a.holding = true;
            a.held = Some(obj);
        } else {
            views[self.object.cell.index(self.side)].object = Some(obj);
        }
        views
    }
}

fn texture_value(texture: u8, y: usize, x: usize) -> f64 {
    // Fixed frequency/phase table; each texture is a distinct plane wave.
    const TABLE: [(f64, f64, f64); NUM_TEXTURES] = [
        (0.0, 0.0, 0.0),
        (0.9, 0.0, 0.3),
        (0.0, 1.1, 1.0),
        (0.7, 0.7, 2.0),
        (1.7, -0.4, 0.5),
        (-0.5, 2.3, 2.7),
    ];
    let (fx, fy, ph) = TABLE[texture as usize % NUM_TEXTURES];
    0.5 + 0.25 * (fx * x as f64 + fy * y as f64 + ph).sin()
}

/// Renders a scene into a `[side*patch, side*patch, 3]` image.
pub fn render(scene: &Scene, patch: usize) -> Tensor {
    assert!(patch >= 2, "cells need at least 2x2 pixels");
    let g = scene.side * patch;
    let mut px = vec![0.0; g * g * CHANNELS];
    let views = scene.cell_views();
    let mut noise = Prng::new(scene.noise_seed, mix(scene.tick, 0x7e47));
    for y in 0..g {
        for x in 0..g {
            let base = (y * g + x) * CHANNELS;
            let mut t = texture_value(scene.texture, y, x);
            if scene.noise > 0.0 {
                t += scene.noise * (2.0 * noise.uniform() - 1.0);
            }
            px[base + 2] = t;
        }
    }
    for r in 0..scene.side {
        for c in 0..scene.side {
            let v = &views[r * scene.side + c];
            let mut put = |dy: usize, dx: usize, a: f64, b: f64| {
                let base = ((r * patch + dy) * g + c * patch + dx) * CHANNELS;
                px[base] = a;
                px[base + 1] = b;
            };
            let code = |gc: Option<(usize, usize)>| {
                gc.map_or((0.0, 0.0), |(gl, co)| {
                    (gl as f64 / GLYPH_SCALE, co as f64 / COLOR_SCALE)
                })
            };
            let (a, b) = code(v.board);
            put(0, 0, a, b);
            let (a, b) = code(v.object);
            put(0, 1, a, b);
            put(1, 0, f64::from(u8::from(v.agent)), f64::from(u8::from(v.holding)));
            let (a, b) = code(v.held);
            put(1, 1, a, b);
        }
    }
    Tensor::new(vec![g, g, CHANNELS], px).expect("consistent render dims")
}

/// Recovers per-cell contents from a rendered image.
pub fn parse_render(image: &Tensor, side: usize, patch: usize) -> Result<Vec<CellView>> {
    let g = side * patch;
    if image.shape() != [g, g, CHANNELS] {
        return Err(Error::shape("parse_render", image.shape(), &[g, g, CHANNELS]));
    }
    let px = image.data();
    let read = |r: usize, c: usize, dy: usize, dx: usize| {
        let base = ((r * patch + dy) * g + c * patch + dx) * CHANNELS;
        (px[base], px[base + 1])
    };
    let decode = |(a, b): (f64, f64)| {
        let gl = (a * GLYPH_SCALE).round() as usize;
        let co = (b * COLOR_SCALE).round() as usize;
        (gl > 0).then_some((gl, co))
    };
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let (agent, holding) = read(r, c, 1, 0);
            out.push(CellView {
                board: decode(read(r, c, 0, 0)),
                object: decode(read(r, c, 0, 1)),
                agent: agent > 0.5,
                holding: holding > 0.5,
                held: decode(read(r, c, 1, 1)),
            });
        }
    }
    Ok(out)
}

/// Object teleport applied once when the world clock reaches `step`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reposition {
    pub step: u64,
    pub cell: Cell,
}

/// Scene plus episode bookkeeping.
#[derive(Clone, Debug)]
pub struct World {
    pub scene: Scene,
    pub success_cells: Vec<Cell>,
    pub reposition: Option<Reposition>,
    pub done: bool,
    pub steps: usize,
}

impl World {
    pub fn new(scene: Scene, success_cells: Vec<Cell>, reposition: Option<Reposition>) -> Self {
        let mut w = Self {
            scene,
            success_cells,
            reposition,
            done: false,
            steps: 0,
        };
        w.maybe_reposition();
        w
    }

    fn maybe_reposition(&mut self) {
        if let Some(rp) = self.reposition {
            if self.scene.tick == rp.step && !self.scene.holding {
                self.scene.object.cell = rp.cell;
            }
        }
    }

    pub fn step(&mut self, action: Action) {
        if self.done {
            return;
        }
        let s = &mut self.scene;
        let last = s.side - 1;
        match action {
            Action::Up => s.agent.row = s.agent.row.saturating_sub(1),
            Action::Down => s.agent.row = (s.agent.row + 1).min(last),
            Action::Left => s.agent.col = s.agent.col.saturating_sub(1),
            Action::Right => s.agent.col = (s.agent.col + 1).min(last),
            Action::Pick => {
                if !s.holding && s.agent == s.object.cell {
                    s.holding = true;
                }
            }
            Action::Place => {
                if s.holding {
                    s.holding = false;
                    s.object.cell = s.agent;
                }
                self.done = true;
            }
        }
        if s.holding {
            s.object.cell = s.agent;
        }
        s.tick += 1;
        self.steps += 1;
        self.maybe_reposition();
    }

    /// An invalid token advances the clock without moving anything.
    pub fn step_token(&mut self, token: usize) -> bool {
        match Action::from_token(token) {
            Some(a) => {
                self.step(a);
                true
            }
            None => {
                if !self.done {
                    self.scene.tick += 1;
                    self.steps += 1;
                    self.maybe_reposition();
                }
                false
            }
        }
    }

    pub fn success(&self) -> bool {
        self.done && !self.scene.holding && self.success_cells.contains(&self.scene.object.cell)
    }
}
