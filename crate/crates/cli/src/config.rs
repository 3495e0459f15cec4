use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vla_align_core::alignment::{AlignConfig, Paradigm, ProjectorSpec, SimilarityKind};
use vla_align_core::model::{AdapterSpec, ModelConfig};
use vla_align_core::numerics::fnv1a;
use vla_align_core::probes::ProbeConfig;
use vla_align_core::taskgen::{Category, Environment, SplitSpec};
use vla_align_core::teacher::TeacherConfig;
use vla_align_core::trainer::{Mode, OptimizerKind, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: Mode,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub adapter: AdapterSpec,
    pub full_finetune: bool,
    pub clip_norm: f64,
    pub chunk: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: t.mode,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer,
            adapter: t.adapter,
            full_finetune: t.full_finetune,
            clip_norm: t.clip_norm,
            chunk: t.chunk,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub seed: u64,
    pub train_episodes: usize,
    /// In-distribution episodes added to the pretraining mix.
    pub pretrain_episodes: usize,
    /// Board-selection tasks per category in the pretraining mix.
    pub pretrain_vlthink: usize,
    pub eval_episodes: usize,
    pub split: SplitSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            seed: 0,
            train_episodes: 512,
            pretrain_episodes: 512,
            pretrain_vlthink: 128,
            eval_episodes: 128,
            split: SplitSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub environments: Vec<Environment>,
    /// Rollouts stop after this multiple of the expert length.
    pub max_steps_factor: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            environments: Environment::ALL.to_vec(),
            max_steps_factor: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Hidden-state index probed; defaults to the middle block.
    pub layer: Option<usize>,
    /// Block whose attention is scored and exported; defaults to the middle block.
    pub attention_layer: Option<usize>,
    pub categories: Vec<Category>,
    /// Board-selection tasks per category in each probe set.
    pub tasks_per_category: usize,
    /// In-distribution episodes whose first frame is scored for attention focus.
    pub attention_episodes: usize,
    pub linear: ProbeConfig,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            layer: None,
            attention_layer: None,
            categories: vec![Category::Shape, Category::Color, Category::Arrow, Category::Parity],
            tasks_per_category: 64,
            attention_episodes: 32,
            linear: ProbeConfig::default(),
        }
    }
}

impl ProbeSection {
    pub fn layer(&self, model: &ModelConfig) -> usize {
        self.layer.unwrap_or(model.layers.div_ceil(2))
    }

    /// Attention blocks are numbered from 0.
    pub fn attention_layer(&self, model: &ModelConfig) -> usize {
        self.attention_layer.unwrap_or(model.layers.div_ceil(2) - 1)
    }
}

/// Values swept by `ablate`. Empty axes keep the `align` section's value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationAxes {
    pub modes: Vec<Mode>,
    pub lambda: Vec<f64>,
    pub projector: Vec<ProjectorSpec>,
    pub teacher: Vec<TeacherConfig>,
    pub layer: Vec<usize>,
    pub loss: Vec<SimilarityKind>,
    pub paradigm: Vec<Paradigm>,
    pub combine: Combine,
}

/// How non-empty ablation axes combine into Align cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// Cartesian product of every axis.
    #[default]
    Product,
    /// Each axis varied alone around the `align` section, plus the base cell.
    Separate,
}

impl Default for AblationAxes {
    fn default() -> Self {
        Self {
            modes: vec![Mode::Default, Mode::Freeze, Mode::Align],
            lambda: Vec::new(),
            projector: Vec::new(),
            teacher: Vec::new(),
            layer: Vec::new(),
            loss: Vec::new(),
            paradigm: Vec::new(),
            combine: Combine::Product,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub align: AlignConfig,
    pub dataset: DatasetSection,
    pub eval: EvalSection,
    pub probe: ProbeSection,
    pub ablation: AblationAxes,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            teacher: TeacherConfig::default(),
            pretrain: PretrainSection::default(),
            train: TrainSection::default(),
            align: AlignConfig::default(),
            dataset: DatasetSection::default(),
            eval: EvalSection::default(),
            probe: ProbeSection::default(),
            ablation: AblationAxes::default(),
            seeds: (0..16).collect(),
            out: PathBuf::from("runs"),
            workers: 1,
        }
    }
}

/// One fine-tuning configuration of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub name: String,
    pub mode: Mode,
    pub align: AlignConfig,
    pub teacher: TeacherConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        let cfg: Self = serde_json::from_str(text).map_err(|e| anyhow::anyhow!("config error: {e}"))?;
        Ok(cfg)
    }

    /// Reads and validates a JSON config; an empty file yields the defaults.
    pub fn parse(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = Self::from_json(&text).with_context(|| format!("in {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Digest of everything that determines artifact contents; seeds, the
    /// output directory and the worker count are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.out = PathBuf::new();
        c.workers = 0;
        format!("{:016x}", fnv1a(serde_json::to_string(&c).expect("config serializes").as_bytes()))
    }

    pub fn train_config(&self, mode: Mode, align: &AlignConfig, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer,
            adapter: t.adapter,
            full_finetune: t.full_finetune,
            clip_norm: t.clip_norm,
            chunk: t.chunk,
            seed,
            align: align.clone(),
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        let p = &self.pretrain;
        TrainConfig {
            mode: Mode::Default,
            steps: p.steps,
            batch_size: p.batch_size,
            lr: p.lr,
            optimizer: p.optimizer,
            full_finetune: true,
            clip_norm: p.clip_norm,
            chunk: self.train.chunk,
            seed: p.seed,
            ..TrainConfig::default()
        }
    }

    /// The cell `finetune` trains: the configured mode with the `align` section.
    pub fn single_cell(&self) -> Cell {
        Cell {
            name: self.train.mode.name().to_string(),
            mode: self.train.mode,
            align: self.align.clone(),
            teacher: self.teacher.clone(),
        }
    }

    /// Expands the ablation axes. Alignment axes multiply only the Align cells.
    pub fn cells(&self) -> Vec<Cell> {
        let a = &self.ablation;
        let mut out = Vec::new();
        for &mode in &a.modes {
            if mode != Mode::Align {
                out.push(Cell {
                    name: mode.name().to_string(),
                    mode,
                    align: self.align.clone(),
                    teacher: self.teacher.clone(),
                });
                continue;
            }
            let base = vec![(String::from("align"), self.align.clone(), self.teacher.clone())];
            let mut cells = base.clone();
            let mut step = |values_empty: bool, f: &dyn Fn(Vec<Named>) -> Vec<Named>| {
                if values_empty {
                    return;
                }
                match a.combine {
                    Combine::Product => cells = f(std::mem::take(&mut cells)),
                    Combine::Separate => cells.extend(f(base.clone())),
                }
            };
            step(a.paradigm.is_empty(), &|c| {
                expand(c, &a.paradigm, |p| format!("paradigm={}", p.name()), |al, _, p| {
                    al.paradigm = *p;
                    if *p == Paradigm::Enc2Enc {
                        al.layer = Some(0);
                    }
                })
            });
            step(a.layer.is_empty(), &|c| expand(c, &a.layer, |l| format!("layer={l}"), |al, _, l| al.layer = Some(*l)));
            step(a.lambda.is_empty(), &|c| expand(c, &a.lambda, |l| format!("lambda={l}"), |al, _, l| al.lambda = *l));
            step(a.projector.is_empty(), &|c| {
                expand(c, &a.projector, |p| format!("projector={}", projector_label(p)), |al, _, p| {
                    al.projector = p.clone()
                })
            });
            step(a.loss.is_empty(), &|c| {
                expand(c, &a.loss, |s| format!("loss={}", s.name()), |al, _, s| al.similarity.kind = *s)
            });
            step(a.teacher.is_empty(), &|c| expand(c, &a.teacher, teacher_label, |_, te, t| *te = t.clone()));
            out.extend(cells.into_iter().map(|(name, align, teacher)| Cell {
                name,
                mode,
                align,
                teacher,
            }));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model")?;
        self.teacher.validate().context("teacher")?;
        self.teacher.check_student(&self.model).context("teacher")?;
        if self.seeds.is_empty() {
            bail!("config error: seeds must be non-empty");
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            bail!("config error: seeds must be distinct");
        }
        if self.workers == 0 {
            bail!("config error: workers must be at least 1");
        }
        let d = &self.dataset;
        if d.train_episodes == 0 || d.eval_episodes == 0 {
            bail!("config error: dataset.train_episodes and dataset.eval_episodes must be at least 1");
        }
        d.split.validate().context("dataset.split")?;
        if self.eval.environments.is_empty() || self.eval.max_steps_factor == 0 {
            bail!("config error: eval needs at least one environment and max_steps_factor >= 1");
        }
        let p = &self.probe;
        if p.layer(&self.model) > self.model.layers {
            bail!("config error: probe.layer must lie in 0..={}", self.model.layers);
        }
        if p.attention_layer(&self.model) >= self.model.layers {
            bail!("config error: probe.attention_layer must lie in 0..{}", self.model.layers);
        }
        if p.categories.is_empty() || p.tasks_per_category < 10 || p.attention_episodes == 0 {
            bail!("config error: probe needs categories, tasks_per_category >= 10 and attention_episodes >= 1");
        }
        p.linear.validate().context("probe.linear")?;
        self.pretrain_config().validate(&self.model).context("pretrain")?;
        self.train_config(self.train.mode, &self.align, 0)
            .validate(&self.model)
            .context("train")?;
        if self.align.lambda < 0.0 || !self.align.lambda.is_finite() {
            bail!("config error: align.lambda must be >= 0, got {}", self.align.lambda);
        }
        if self.ablation.modes.is_empty() {
            bail!("config error: ablation.modes must be non-empty");
        }
        for cell in self.cells() {
            let ctx = || format!("ablation cell {}", cell.name);
            self.train_config(cell.mode, &cell.align, 0)
                .validate(&self.model)
                .with_context(ctx)?;
            cell.align.validate(&self.model).with_context(ctx)?;
            cell.teacher.validate().with_context(ctx)?;
            cell.teacher.check_student(&self.model).with_context(ctx)?;
        }
        Ok(())
    }

    pub fn with_overrides(mut self, seeds: Option<Vec<u64>>, out: Option<PathBuf>, workers: Option<usize>) -> Result<Self> {
        if let Some(s) = seeds {
            self.seeds = s;
        }
        if let Some(o) = out {
            self.out = o;
        }
        if let Some(w) = workers {
            self.workers = w;
        }
        self.validate()?;
        Ok(self)
    }
}

fn projector_label(p: &ProjectorSpec) -> String {
    let mut s = p.kind.name().to_string();
    if !p.frozen {
        s.push_str("-learned");
    }
    s
}

fn teacher_label(t: &TeacherConfig) -> String {
    format!("teacher=d{}-depth{}-{:x}", t.d_t, t.depth, t.seed)
}

type Named = (String, AlignConfig, TeacherConfig);

fn expand<T>(cells: Vec<Named>, values: &[T], label: impl Fn(&T) -> String, apply: impl Fn(&mut AlignConfig, &mut TeacherConfig, &T)) -> Vec<Named> {
    let mut next = Vec::with_capacity(cells.len() * values.len());
    for (name, al, te) in &cells {
        for v in values {
            let (mut al, mut te) = (al.clone(), te.clone());
            apply(&mut al, &mut te, v);
            next.push((format!("{name}/{}", label(v)), al, te));
        }
    }
    next
}
