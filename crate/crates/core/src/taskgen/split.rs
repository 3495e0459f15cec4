//! Factor pools for the in-distribution and held-out environments.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One variation factor: values seen in training and values held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Factor<T> {
    pub train: Vec<T>,
    pub held_out: Vec<T>,
}

impl<T: PartialEq + fmt::Debug> Factor<T> {
    fn new(train: Vec<T>, held_out: Vec<T>) -> Self {
        Self { train, held_out }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.train.is_empty() || self.held_out.is_empty() {
            return Err(Error::Config(format!("factor {name} has an empty pool")));
        }
        if let Some(v) = self.train.iter().find(|v| self.held_out.contains(v)) {
            return Err(Error::Config(format!(
                "factor {name}: value {v:?} is both in-distribution and held out"
            )));
        }
        Ok(())
    }

    pub fn pool(&self, held_out: bool) -> &[T] {
        if held_out {
            &self.held_out
        } else {
            &self.train
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Axis {
    Semantic,
    Vision,
    Execution,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Semantic, Axis::Vision, Axis::Execution];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Semantic => "semantic",
            Axis::Vision => "vision",
            Axis::Execution => "execution",
        }
    }

    pub fn environments(self) -> &'static [Environment] {
        match self {
            Axis::Semantic => &[Environment::Object, Environment::Receptacle, Environment::Instruction],
            Axis::Vision => &[Environment::Texture, Environment::Noise],
            Axis::Execution => &[Environment::Pose, Environment::Reposition],
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which factor, if any, is drawn from its held-out pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Environment {
    InDistribution,
    Object,
    Receptacle,
    Instruction,
    Texture,
    Noise,
    Pose,
    Reposition,
}

impl Environment {
    pub const ALL: [Environment; 8] = [
        Environment::InDistribution,
        Environment::Object,
        Environment::Receptacle,
        Environment::Instruction,
        Environment::Texture,
        Environment::Noise,
        Environment::Pose,
        Environment::Reposition,
    ];

    pub fn axis(self) -> Option<Axis> {
        match self {
            Environment::InDistribution => None,
            Environment::Object | Environment::Receptacle | Environment::Instruction => {
                Some(Axis::Semantic)
            }
            Environment::Texture | Environment::Noise => Some(Axis::Vision),
            Environment::Pose | Environment::Reposition => Some(Axis::Execution),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Environment::InDistribution => "id",
            Environment::Object => "object",
            Environment::Receptacle => "receptacle",
            Environment::Instruction => "instruction",
            Environment::Texture => "texture",
            Environment::Noise => "noise",
            Environment::Pose => "pose",
            Environment::Reposition => "reposition",
        }
    }

    pub fn parse(s: &str) -> Result<Environment> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown environment {s:?}")))
    }
}

impl fmt::Display for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-factor pools. Object/receptacle/template/texture entries are indices
/// into the vocabulary lists; start regions are 0 (top half) and 1 (bottom).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub objects: Factor<u8>,
    pub receptacles: Factor<u8>,
    pub templates: Factor<u8>,
    pub textures: Factor<u8>,
    pub noise: Factor<f64>,
    pub start_regions: Factor<u8>,
    pub reposition: Factor<bool>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            objects: Factor::new(vec![0, 1, 2, 3, 4, 5], vec![6, 7]),
            receptacles: Factor::new(vec![0, 1, 2, 3], vec![4, 5]),
            templates: Factor::new(vec![0, 1, 2], vec![3]),
            textures: Factor::new(vec![0, 1, 2, 3], vec![4, 5]),
            noise: Factor::new(vec![0.0], vec![0.3, 0.5]),
            start_regions: Factor::new(vec![0], vec![1]),
            reposition: Factor::new(vec![false], vec![true]),
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        use crate::taskgen::vocab::{OBJECTS, RECEPTACLES};
        use crate::taskgen::{scene::NUM_TEXTURES, TEMPLATES};
        self.objects.validate("objects")?;
        self.receptacles.validate("receptacles")?;
        self.templates.validate("templates")?;
        self.textures.validate("textures")?;
        self.noise.validate("noise")?;
        self.start_regions.validate("start_regions")?;
        self.reposition.validate("reposition")?;
        let bound = |f: &Factor<u8>, n: usize, name: &str| {
            if f.train.iter().chain(&f.held_out).any(|&v| v as usize >= n) {
                Err(Error::Config(format!("factor {name} values must be below {n}")))
            } else {
                Ok(())
            }
        };
        bound(&self.objects, OBJECTS.len(), "objects")?;
        bound(&self.receptacles, RECEPTACLES.len(), "receptacles")?;
        bound(&self.templates, TEMPLATES.len(), "templates")?;
        bound(&self.textures, NUM_TEXTURES, "textures")?;
        bound(&self.start_regions, 2, "start_regions")?;
        if self
            .noise
            .train
            .iter()
            .chain(&self.noise.held_out)
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Config("noise strengths must lie in [0, 1]".into()));
        }
        let min_receptacles = 3;
        if self.receptacles.train.len() < min_receptacles {
            return Err(Error::Config(format!(
                "need at least {min_receptacles} in-distribution receptacles for distractors"
            )));
        }
        Ok(())
    }
}
