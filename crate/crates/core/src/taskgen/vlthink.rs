//! Board-selection tasks: one object, several boards, exactly one of which
//! matches the instructed concept.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Prng;
use crate::taskgen::scene::{Board, Cell, Glyph, Object, Scene};
use crate::taskgen::vocab::{COLORS, DIRECTIONS, OBJECTS, SHAPES};
use crate::taskgen::{build_episode, draw, instruction, permutation, Canvas, Episode, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Shape,
    Color,
    Arrow,
    Parity,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Shape, Category::Color, Category::Arrow, Category::Parity];

    pub fn name(self) -> &'static str {
        match self {
            Category::Shape => "shape",
            Category::Color => "color",
            Category::Arrow => "arrow",
            Category::Parity => "parity",
        }
    }

    pub fn parse(s: &str) -> Result<Category> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "category {s:?} cannot be rendered; choose shape, color, arrow or parity"
                ))
            })
    }
}

/// The instructed property a board must have.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Concept {
    Shape(u8),
    Color(u8),
    Arrow(u8),
    /// `true` for odd.
    Parity(bool),
}

impl Concept {
    pub fn matches(self, board: &Board) -> bool {
        match (self, board.glyph) {
            (Concept::Shape(s), Glyph::Shape(g)) => s == g,
            (Concept::Color(c), Glyph::Shape(_)) => c == board.color,
            (Concept::Arrow(d), Glyph::Arrow(g)) => d == g,
            (Concept::Parity(odd), Glyph::Numeral(n)) => (n % 2 == 1) == odd,
            _ => false,
        }
    }

    /// Words filling the target slot of the instruction.
    pub fn words(self) -> Vec<&'static str> {
        match self {
            Concept::Shape(s) => vec![SHAPES[s as usize]],
            Concept::Color(c) => vec![COLORS[c as usize], "shape"],
            Concept::Arrow(d) => vec![DIRECTIONS[d as usize], "arrow"],
            Concept::Parity(odd) => vec![if odd { "odd" } else { "even" }, "number"],
        }
    }

    /// Class label used by probes.
    pub fn label(self) -> usize {
        match self {
            Concept::Shape(v) | Concept::Color(v) | Concept::Arrow(v) => v as usize,
            Concept::Parity(odd) => usize::from(odd),
        }
    }
}

/// Distinct values from `0..n`, `k` of them, with fixed draw consumption.
fn distinct(rng: &mut Prng, n: usize, k: usize) -> Vec<u8> {
    permutation(rng, n)[..k].iter().map(|&v| v as u8).collect()
}

fn sample(rng: &mut Prng, category: Category, canvas: Canvas) -> Result<Task> {
    let n_boards = 2 + draw(rng, 3);
    let target = draw(rng, n_boards);
    let (glyphs, colors, concept): (Vec<Glyph>, Vec<u8>, Concept) = match category {
        Category::Shape => {
            let s = distinct(rng, SHAPES.len(), n_boards);
            let colors = (0..n_boards).map(|_| draw(rng, COLORS.len()) as u8).collect();
            let concept = Concept::Shape(s[target]);
            (s.into_iter().map(Glyph::Shape).collect(), colors, concept)
        }
        Category::Color => {
            let colors = distinct(rng, COLORS.len(), n_boards);
            let glyphs = (0..n_boards)
                .map(|_| Glyph::Shape(draw(rng, SHAPES.len()) as u8))
                .collect();
            let concept = Concept::Color(colors[target]);
            (glyphs, colors, concept)
        }
        Category::Arrow => {
            let d = distinct(rng, DIRECTIONS.len(), n_boards);
            let colors = (0..n_boards).map(|_| draw(rng, COLORS.len()) as u8).collect();
            let concept = Concept::Arrow(d[target]);
            (d.into_iter().map(Glyph::Arrow).collect(), colors, concept)
        }
        Category::Parity => {
            let odd = draw(rng, 2) == 1;
            let (same, other): (Vec<u8>, Vec<u8>) = (1..=9u8).partition(|n| (n % 2 == 1) == odd);
            let pick = same[draw(rng, same.len())];
            let rest = distinct(rng, other.len(), n_boards - 1);
            let mut nums: Vec<u8> = rest.iter().map(|&i| other[i as usize]).collect();
            nums.insert(target, pick);
            let colors = (0..n_boards).map(|_| draw(rng, COLORS.len()) as u8).collect();
            (nums.into_iter().map(Glyph::Numeral).collect(), colors, Concept::Parity(odd))
        }
    };
    let object = draw(rng, OBJECTS.len()) as u8;
    let object_color = draw(rng, COLORS.len()) as u8;
    let cells = permutation(rng, canvas.side * canvas.side);
    let cell = |i: usize| Cell::new(cells[i] / canvas.side, cells[i] % canvas.side);
    let agent = Cell::new(draw(rng, canvas.side), draw(rng, canvas.side));
    let boards: Vec<Board> = glyphs
        .into_iter()
        .zip(colors)
        .enumerate()
        .map(|(i, (glyph, color))| Board {
            cell: cell(i),
            glyph,
            color,
        })
        .collect();
    let goal = boards[target].cell;
    let scene = Scene {
        side: canvas.side,
        agent,
        holding: false,
        object: Object {
            cell: cell(n_boards),
            class: object,
            color: object_color,
        },
        boards,
        texture: 0,
        noise: 0.0,
        noise_seed: 0,
        tick: 0,
    };
    scene.validate()?;
    let mut tags = BTreeMap::new();
    tags.insert("environment".into(), "vlthink".into());
    tags.insert("category".into(), category.name().into());
    tags.insert(
        "concept".into(),
        serde_json::to_string(&concept).expect("concept serializes"),
    );
    tags.insert("label".into(), concept.label().to_string());
    tags.insert("object".into(), object.to_string());
    Ok(Task {
        instruction: instruction(0, OBJECTS[object as usize], &concept.words()),
        scene,
        goal,
        tags,
        reposition: None,
    })
}

/// `n` board-selection episodes of one category. Objects come from the full
/// pool since these tasks probe grounding, not object generalization.
pub fn make_vlthink_tasks(category: Category, n: usize, rng: &Prng, canvas: Canvas) -> Result<Vec<Episode>> {
    canvas.validate()?;
    if n == 0 {
        return Err(Error::Input("task count must be at least 1".into()));
    }
    (0..n)
        .map(|i| {
            let mut r = rng.split(i as u64);
            build_episode(&sample(&mut r, category, canvas)?, canvas)
        })
        .collect()
}

/// Recovers the concept stored in an episode's tags.
pub fn episode_concept(ep: &Episode) -> Result<Concept> {
    let raw = ep
        .tag("concept")
        .ok_or_else(|| Error::Lookup("episode has no concept tag".into()))?;
    serde_json::from_str(raw).map_err(|e| Error::Format(format!("concept tag: {e}")))
}
