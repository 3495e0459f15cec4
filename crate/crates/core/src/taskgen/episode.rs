//! Episodes and their JSON Lines file format.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MultimodalSequence;
use crate::numerics::Tensor;
use crate::taskgen::scene::{Cell, Reposition, Scene, World};
use crate::taskgen::vocab::PAD;

pub const EPISODE_HEADER: &str = "# vla-align episodes v1: instruction_tokens, frames (base64 VLAT), expert_actions, success_cells, tags, scene, reposition";

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub instruction_tokens: Vec<usize>,
    /// One rendered frame per expert decision.
    pub frames: Vec<Tensor>,
    pub expert_actions: Vec<usize>,
    pub success_cells: Vec<Cell>,
    pub tags: BTreeMap<String, String>,
    /// Initial state, enough to replay the episode in a fresh world.
    pub scene: Scene,
    pub reposition: Option<Reposition>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    instruction_tokens: Vec<usize>,
    frames: Vec<String>,
    expert_actions: Vec<usize>,
    success_cells: Vec<Cell>,
    tags: BTreeMap<String, String>,
    scene: Scene,
    reposition: Option<Reposition>,
}

impl Episode {
    /// Fresh world at the episode's initial state.
    pub fn world(&self) -> World {
        World::new(self.scene.clone(), self.success_cells.clone(), self.reposition)
    }

    pub fn tag(&self, key: &str) -> Option<&str> {
        self.tags.get(key).map(String::as_str)
    }

    /// Scene at each frame, obtained by replaying the expert.
    pub fn frame_scenes(&self) -> Vec<Scene> {
        let mut w = self.world();
        let mut out = Vec::with_capacity(self.expert_actions.len());
        for &a in &self.expert_actions {
            out.push(w.scene.clone());
            w.step_token(a);
        }
        out
    }

    /// Closed-loop imitation samples: each frame predicts the next `chunk`
    /// expert actions, padded and masked past the end of the episode.
    pub fn training_sequences(&self, chunk: usize) -> Result<Vec<MultimodalSequence>> {
        if chunk == 0 {
            return Err(Error::Input("action chunk must be at least 1".into()));
        }
        self.frames
            .iter()
            .enumerate()
            .map(|(t, frame)| {
                let mut targets = Vec::with_capacity(chunk);
                let mut mask = Vec::with_capacity(chunk);
                for j in 0..chunk {
                    match self.expert_actions.get(t + j) {
                        Some(&a) => {
                            targets.push(a);
                            mask.push(1);
                        }
                        None => {
                            targets.push(PAD);
                            mask.push(0);
                        }
                    }
                }
                MultimodalSequence::new(frame.clone(), self.instruction_tokens.clone(), targets, mask)
            })
            .collect()
    }

    pub fn to_json_line(&self) -> String {
        let rec = Record {
            instruction_tokens: self.instruction_tokens.clone(),
            frames: self.frames.iter().map(|f| B64.encode(f.to_vlat_bytes())).collect(),
            expert_actions: self.expert_actions.clone(),
            success_cells: self.success_cells.clone(),
            tags: self.tags.clone(),
            scene: self.scene.clone(),
            reposition: self.reposition,
        };
        serde_json::to_string(&rec).expect("episode serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Episode> {
        let rec: Record =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("episode record: {e}")))?;
        let frames = rec
            .frames
            .iter()
            .map(|s| {
                let bytes = B64
                    .decode(s)
                    .map_err(|e| Error::Format(format!("frame base64: {e}")))?;
                Tensor::from_vlat_bytes(&bytes)
            })
            .collect::<Result<Vec<_>>>()?;
        if frames.len() != rec.expert_actions.len() {
            return Err(Error::Format(format!(
                "{} frames for {} actions",
                frames.len(),
                rec.expert_actions.len()
            )));
        }
        Ok(Episode {
            instruction_tokens: rec.instruction_tokens,
            frames,
            expert_actions: rec.expert_actions,
            success_cells: rec.success_cells,
            tags: rec.tags,
            scene: rec.scene,
            reposition: rec.reposition,
        })
    }
}

pub fn episodes_to_string(episodes: &[Episode]) -> String {
    let mut s = String::from(EPISODE_HEADER);
    s.push('\n');
    for ep in episodes {
        s.push_str(&ep.to_json_line());
        s.push('\n');
    }
    s
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(episodes_to_string(episodes).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .unwrap_or_default();
    if header != EPISODE_HEADER {
        return Err(Error::Format(format!(
            "{}: unexpected episode header {header:?}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        out.push(Episode::from_json_line(&line)?);
    }
    Ok(out)
}
