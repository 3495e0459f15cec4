use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vla_align_core::model::MultimodalSequence;
use vla_align_core::numerics::{ParamStore, Prng, Tensor};
use vla_align_core::probes::{
    action_attention, attention_focus, extract_features, linear_probe, pgm_bytes_with_comment,
    separability, Provenance,
};
use vla_align_core::taskgen::{
    episode_concept, make_dataset, make_vlthink_tasks, read_episodes, write_episodes, Canvas, Category,
    Environment, Episode, PAD,
};
use vla_align_core::teacher::{precompute_features, FeatureCache, Teacher, TeacherConfig};
use vla_align_core::trainer::{finetune, load_checkpoint, pretrain, samples_from_episodes, Sample};

use crate::config::{Cell, ExperimentConfig};
use crate::rollout::{max_steps, rollout};

const TRAIN_STREAM: u64 = 1;
const PRETRAIN_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 100;
const PRETRAIN_VLTHINK_STREAM: u64 = 200;
const PROBE_STREAM: u64 = 300;
const LINEAR_PROBE_STREAM: u64 = 400;
/// Episodes per cell and seed whose attention maps `attn-export` writes.
pub const EXPORT_EPISODES: usize = 4;
pub const PRETRAINED_CELL: &str = "pretrained";

/// A subcommand's input has not been produced yet.
#[derive(Debug)]
pub struct MissingArtifact {
    pub path: PathBuf,
    pub producer: &'static str,
}

impl fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "missing prerequisite artifact {}; run `vla-align {}` first",
            self.path.display(),
            self.producer
        )
    }
}

impl std::error::Error for MissingArtifact {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvRecord {
    pub environment: Environment,
    /// `None` for the in-distribution set.
    pub axis: Option<String>,
    pub episodes: usize,
    pub successes: usize,
    pub rate: f64,
    pub invalid_actions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub config_hash: String,
    pub cell: String,
    pub seed: u64,
    pub records: Vec<EnvRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryProbe {
    pub category: Category,
    /// `None` when the within-class scatter vanishes.
    pub separability: Option<f64>,
    pub linear_probe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutput {
    pub config_hash: String,
    pub cell: String,
    pub seed: u64,
    pub layer: usize,
    pub attention_layer: usize,
    pub categories: Vec<CategoryProbe>,
    /// Mean over categories with finite separability.
    pub separability: f64,
    pub linear_probe: f64,
    pub attention_focus: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub config_hash: String,
    pub cells: Vec<Cell>,
    pub seeds: Vec<u64>,
}

/// Datasets shared by every job, loaded on first use.
#[derive(Default)]
struct Loaded {
    train: OnceLock<Vec<Sample>>,
    eval: OnceLock<BTreeMap<Environment, Vec<Episode>>>,
    probe: OnceLock<BTreeMap<Category, Vec<(MultimodalSequence, usize)>>>,
    caches: std::sync::Mutex<BTreeMap<u64, std::sync::Arc<FeatureCache>>>,
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub hash: String,
    canvas: Canvas,
    loaded: Loaded,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_file(path, text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Directory name of a cell: path separators become `+`.
pub fn cell_dir_name(cell: &str) -> String {
    cell.replace('/', "+")
}

fn env_records_rate(successes: usize, episodes: usize) -> f64 {
    successes as f64 / episodes as f64
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let canvas = Canvas::for_model(&cfg.model)?;
        Ok(Self {
            hash: cfg.hash(),
            cfg,
            canvas,
            loaded: Loaded::default(),
        })
    }

    pub fn out(&self) -> &Path {
        &self.cfg.out
    }

    pub fn data_dir(&self) -> PathBuf {
        self.cfg.out.join("data")
    }

    pub fn train_path(&self) -> PathBuf {
        self.data_dir().join("train.jsonl")
    }

    pub fn pretrain_data_path(&self) -> PathBuf {
        self.data_dir().join("pretrain.jsonl")
    }

    pub fn eval_path(&self, env: Environment) -> PathBuf {
        self.data_dir().join(format!("eval_{}.jsonl", env.name()))
    }

    pub fn probe_path(&self, cat: Category) -> PathBuf {
        self.data_dir().join(format!("probe_{}.jsonl", cat.name()))
    }

    pub fn cache_path(&self, teacher: &TeacherConfig) -> PathBuf {
        self.data_dir().join(format!("teacher_{:016x}.vlaf", teacher.digest()))
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.cfg.out.join("pretrain")
    }

    pub fn pretrained_checkpoint(&self) -> PathBuf {
        self.pretrain_dir().join("model.ckpt")
    }

    pub fn run_dir(&self, cell: &str, seed: u64) -> PathBuf {
        self.cfg.out.join("cells").join(cell_dir_name(cell)).join(format!("seed_{seed}"))
    }

    fn require(&self, path: &Path, producer: &'static str) -> Result<()> {
        if !path.exists() {
            return Err(MissingArtifact {
                path: path.to_path_buf(),
                producer,
            }
            .into());
        }
        Ok(())
    }

    /// Checks a directory's stamp against this config.
    fn require_stamp(&self, dir: &Path, producer: &'static str) -> Result<()> {
        let stamp_path = dir.join("stamp.json");
        self.require(&stamp_path, producer)?;
        let stamp: Stamp = read_json(&stamp_path)?;
        if stamp.config_hash != self.hash {
            bail!(
                "{} was produced by config {} but the current config is {}; use a fresh --out",
                dir.display(),
                stamp.config_hash,
                self.hash
            );
        }
        Ok(())
    }

    fn teachers(&self) -> Vec<TeacherConfig> {
        let mut out: Vec<TeacherConfig> = Vec::new();
        let cells = self.cfg.cells();
        let needed = cells
            .iter()
            .filter(|c| c.mode == vla_align_core::trainer::Mode::Align)
            .map(|c| &c.teacher)
            .chain(std::iter::once(&self.cfg.teacher));
        for t in needed {
            if !out.contains(t) {
                out.push(t.clone());
            }
        }
        out
    }

    /// Writes every dataset and teacher feature cache.
    pub fn gen_data(&self) -> Result<()> {
        let c = &self.cfg;
        let d = &c.dataset;
        let dir = self.data_dir();
        let mut files = Vec::new();
        let base = Prng::new(d.seed, 0);

        let train = make_dataset(d.train_episodes, &d.split, Environment::InDistribution, &base.split(TRAIN_STREAM), self.canvas)?;
        write_episodes(&self.train_path(), &train)?;
        files.push("train.jsonl".to_string());

        let mut pre = Vec::new();
        if d.pretrain_episodes > 0 {
            pre = make_dataset(d.pretrain_episodes, &d.split, Environment::InDistribution, &base.split(PRETRAIN_STREAM), self.canvas)?;
        }
        if d.pretrain_vlthink > 0 {
            for (i, &cat) in c.probe.categories.iter().enumerate() {
                let rng = base.split(PRETRAIN_VLTHINK_STREAM + i as u64);
                pre.extend(make_vlthink_tasks(cat, d.pretrain_vlthink, &rng, self.canvas)?);
            }
        }
        if pre.is_empty() {
            pre = train.clone();
        }
        write_episodes(&self.pretrain_data_path(), &pre)?;
        files.push("pretrain.jsonl".to_string());

        for (i, &env) in Environment::ALL.iter().enumerate() {
            if !c.eval.environments.contains(&env) {
                continue;
            }
            let rng = base.split(EVAL_STREAM + i as u64);
            let eps = make_dataset(d.eval_episodes, &d.split, env, &rng, self.canvas)?;
            write_episodes(&self.eval_path(env), &eps)?;
            files.push(format!("eval_{}.jsonl", env.name()));
        }
        for (i, &cat) in c.probe.categories.iter().enumerate() {
            let rng = base.split(PROBE_STREAM + i as u64);
            let eps = make_vlthink_tasks(cat, c.probe.tasks_per_category, &rng, self.canvas)?;
            write_episodes(&self.probe_path(cat), &eps)?;
            files.push(format!("probe_{}.jsonl", cat.name()));
        }
        for t in self.teachers() {
            let teacher = Teacher::new(t.clone())?;
            let path = self.cache_path(&t);
            precompute_features(&self.train_path(), &teacher, &path)?;
            files.push(path.file_name().expect("file").to_string_lossy().into_owned());
        }
        write_json(
            &dir.join("stamp.json"),
            &Stamp {
                config_hash: self.hash.clone(),
                files,
            },
        )
    }

    pub fn run_pretrain(&self) -> Result<()> {
        self.require_stamp(&self.data_dir(), "gen-data")?;
        let eps = read_episodes(&self.pretrain_data_path())?;
        let samples = samples_from_episodes(&eps, self.cfg.train.chunk)?;
        let dir = self.pretrain_dir();
        let ckpt = self.pretrained_checkpoint();
        fs::create_dir_all(&dir)?;
        let start = Instant::now();
        let (_, mut record) = pretrain(&self.cfg.model, &samples, &self.cfg.pretrain_config(), Some(&ckpt))?;
        record.config_hash = self.hash.clone();
        record.write(&dir.join("run.json"), &dir.join("losses.csv"))?;
        write_json(&dir.join("timing.json"), &serde_json::json!({ "wall_seconds": start.elapsed().as_secs_f64() }))?;
        write_json(
            &dir.join("stamp.json"),
            &Stamp {
                config_hash: self.hash.clone(),
                files: vec!["model.ckpt".into(), "run.json".into(), "losses.csv".into()],
            },
        )
    }

    fn train_samples(&self) -> Result<&Vec<Sample>> {
        if let Some(s) = self.loaded.train.get() {
            return Ok(s);
        }
        let eps = read_episodes(&self.train_path())?;
        let samples = samples_from_episodes(&eps, self.cfg.train.chunk)?;
        Ok(self.loaded.train.get_or_init(|| samples))
    }

    fn eval_sets(&self) -> Result<&BTreeMap<Environment, Vec<Episode>>> {
        if let Some(s) = self.loaded.eval.get() {
            return Ok(s);
        }
        let mut sets = BTreeMap::new();
        for &env in &self.cfg.eval.environments {
            sets.insert(env, read_episodes(&self.eval_path(env))?);
        }
        Ok(self.loaded.eval.get_or_init(|| sets))
    }

    fn probe_sets(&self) -> Result<&BTreeMap<Category, Vec<(MultimodalSequence, usize)>>> {
        if let Some(s) = self.loaded.probe.get() {
            return Ok(s);
        }
        let mut sets = BTreeMap::new();
        for &cat in &self.cfg.probe.categories {
            let eps = read_episodes(&self.probe_path(cat))?;
            let mut data = Vec::with_capacity(eps.len());
            for ep in &eps {
                let label = episode_concept(ep)?.label();
                data.push((first_frame(ep)?, label));
            }
            sets.insert(cat, data);
        }
        Ok(self.loaded.probe.get_or_init(|| sets))
    }

    fn cache(&self, teacher: &TeacherConfig) -> Result<std::sync::Arc<FeatureCache>> {
        let key = teacher.digest();
        let mut caches = self.loaded.caches.lock().expect("cache lock");
        if let Some(c) = caches.get(&key) {
            return Ok(c.clone());
        }
        let path = self.cache_path(teacher);
        self.require(&path, "gen-data")?;
        let c = std::sync::Arc::new(FeatureCache::read(&path)?);
        caches.insert(key, c.clone());
        Ok(c)
    }

    fn pretrained(&self) -> Result<ParamStore> {
        self.require_stamp(&self.pretrain_dir(), "pretrain")?;
        Ok(vla_align_core::model::read_checkpoint(
            &self.pretrained_checkpoint(),
            Some(self.cfg.model.digest()),
        )?)
    }

    /// Fine-tunes one cell for one seed from the pretrained checkpoint.
    pub fn finetune_cell(&self, cell: &Cell, seed: u64) -> Result<()> {
        self.require_stamp(&self.data_dir(), "gen-data")?;
        let base = self.pretrained()?;
        let samples = self.train_samples()?;
        let cfg = self.cfg.train_config(cell.mode, &cell.align, seed);
        let cache = match cell.mode {
            vla_align_core::trainer::Mode::Align => Some(self.cache(&cell.teacher)?),
            _ => None,
        };
        let dir = self.run_dir(&cell.name, seed);
        fs::create_dir_all(&dir)?;
        let start = Instant::now();
        let (_, mut record) = finetune(&self.cfg.model, &base, samples, cache.as_deref(), &cfg, Some(&dir.join("model.ckpt")))?;
        record.config_hash = self.hash.clone();
        record.write(&dir.join("run.json"), &dir.join("losses.csv"))?;
        write_json(&dir.join("timing.json"), &serde_json::json!({ "wall_seconds": start.elapsed().as_secs_f64() }))?;
        write_json(
            &dir.join("stamp.json"),
            &Stamp {
                config_hash: self.hash.clone(),
                files: vec!["model.ckpt".into()],
            },
        )
    }

    fn cell_params(&self, cell: &str, seed: u64) -> Result<ParamStore> {
        if cell == PRETRAINED_CELL {
            return self.pretrained();
        }
        let dir = self.run_dir(cell, seed);
        self.require_stamp(&dir, "finetune")?;
        Ok(load_checkpoint(&dir.join("model.ckpt"), &self.cfg.model, self.cfg.train.adapter)?)
    }

    /// Rolls out a fine-tuned checkpoint on every evaluation set.
    pub fn eval_cell(&self, cell: &str, seed: u64) -> Result<EvalOutput> {
        let params = self.cell_params(cell, seed)?;
        let sets = self.eval_sets()?;
        let mut records = Vec::new();
        for (&env, eps) in sets {
            let mut successes = 0;
            let mut invalid = 0;
            for ep in eps {
                let r = rollout(&self.cfg.model, &params, ep, max_steps(ep, self.cfg.eval.max_steps_factor))?;
                successes += usize::from(r.success);
                invalid += r.invalid;
            }
            records.push(EnvRecord {
                environment: env,
                axis: env.axis().map(|a| a.name().to_string()),
                episodes: eps.len(),
                successes,
                rate: env_records_rate(successes, eps.len()),
                invalid_actions: invalid,
            });
        }
        let out = EvalOutput {
            config_hash: self.hash.clone(),
            cell: cell.to_string(),
            seed,
            records,
        };
        write_json(&self.run_dir(cell, seed).join("eval.json"), &out)?;
        Ok(out)
    }

    /// Expert replay on the evaluation sets.
    pub fn expert_records(&self) -> Result<Vec<EnvRecord>> {
        let sets = self.eval_sets()?;
        Ok(sets
            .iter()
            .map(|(&env, eps)| {
                let successes = eps.iter().filter(|ep| crate::rollout::replay(ep, &ep.expert_actions)).count();
                EnvRecord {
                    environment: env,
                    axis: env.axis().map(|a| a.name().to_string()),
                    episodes: eps.len(),
                    successes,
                    rate: env_records_rate(successes, eps.len()),
                    invalid_actions: 0,
                }
            })
            .collect())
    }

    /// Separability, linear-probe accuracy and attention focus of a checkpoint.
    pub fn probe_cell(&self, cell: &str, seed: u64) -> Result<ProbeOutput> {
        let params = self.cell_params(cell, seed)?;
        let model = &self.cfg.model;
        let layer = self.cfg.probe.layer(model);
        let attention_layer = self.cfg.probe.attention_layer(model);
        let mut categories = Vec::new();
        for (i, (&cat, data)) in self.probe_sets()?.iter().enumerate() {
            let prov = Provenance {
                model: cell.to_string(),
                layer,
                dataset: format!("probe_{}", cat.name()),
            };
            let f = extract_features(model, &params, data, layer, prov)?;
            let sep = separability(&f)?;
            let mut rng = Prng::new(self.cfg.dataset.seed, LINEAR_PROBE_STREAM + i as u64);
            let acc = linear_probe(&f, &self.cfg.probe.linear, &mut rng)?;
            categories.push(CategoryProbe {
                category: cat,
                separability: (!sep.degenerate).then_some(sep.ratio),
                linear_probe: acc,
            });
        }
        let finite: Vec<f64> = categories.iter().filter_map(|c| c.separability).collect();
        let separability_mean = if finite.is_empty() { 0.0 } else { finite.iter().sum::<f64>() / finite.len() as f64 };
        let linear_mean = categories.iter().map(|c| c.linear_probe).sum::<f64>() / categories.len() as f64;

        let id = self.attention_set()?;
        let mut focus = 0.0;
        for ep in id {
            let map = action_attention(model, &params, &first_frame(ep)?, attention_layer)?;
            focus += attention_focus(&map, &self.target_mask(ep))?;
        }
        let out = ProbeOutput {
            config_hash: self.hash.clone(),
            cell: cell.to_string(),
            seed,
            layer,
            attention_layer,
            categories,
            separability: separability_mean,
            linear_probe: linear_mean,
            attention_focus: focus / id.len() as f64,
        };
        let path = if cell == PRETRAINED_CELL {
            self.pretrain_dir().join("probe.json")
        } else {
            self.run_dir(cell, seed).join("probe.json")
        };
        write_json(&path, &out)?;
        Ok(out)
    }

    fn attention_set(&self) -> Result<&[Episode]> {
        let sets = self.eval_sets()?;
        let env = if sets.contains_key(&Environment::InDistribution) {
            Environment::InDistribution
        } else {
            *sets.keys().next().expect("validated non-empty")
        };
        let eps = &sets[&env];
        Ok(&eps[..self.cfg.probe.attention_episodes.min(eps.len())])
    }

    /// Patches holding the object or a success cell.
    pub fn target_mask(&self, ep: &Episode) -> Vec<bool> {
        let side = self.canvas.side;
        let mut mask = vec![false; side * side];
        mask[ep.scene.object.cell.index(side)] = true;
        for c in &ep.success_cells {
            mask[c.index(side)] = true;
        }
        mask
    }

    /// Writes head-averaged action attention maps as PGM and raw tensors.
    pub fn attn_export(&self, cell: &str, seed: u64) -> Result<Vec<PathBuf>> {
        let params = self.cell_params(cell, seed)?;
        let model = &self.cfg.model;
        let side = self.canvas.side;
        let layers: Vec<usize> = (0..model.layers).collect();
        let dir = if cell == PRETRAINED_CELL {
            self.cfg.out.join("attn").join(PRETRAINED_CELL)
        } else {
            self.cfg.out.join("attn").join(cell_dir_name(cell)).join(format!("seed_{seed}"))
        };
        let mut written = Vec::new();
        let eps = self.attention_set()?;
        for (i, ep) in eps.iter().take(EXPORT_EPISODES).enumerate() {
            let seq = first_frame(ep)?;
            for &l in &layers {
                let map = action_attention(model, &params, &seq, l)?;
                let grid = map.clone().reshape(vec![side, side])?;
                let stem = dir.join(format!("ep{i}_layer{l}"));
                let pgm = stem.with_extension("pgm");
                write_file(&pgm, &pgm_bytes_with_comment(&grid, Some(&format!("config_hash={}", self.hash)))?)?;
                write_file(&stem.with_extension("vlat"), &grid.to_vlat_bytes())?;
                written.push(pgm);
            }
        }
        write_json(
            &dir.join("stamp.json"),
            &Stamp {
                config_hash: self.hash.clone(),
                files: written
                    .iter()
                    .map(|p| p.file_name().expect("file").to_string_lossy().into_owned())
                    .collect(),
            },
        )?;
        Ok(written)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.cfg.workers).build()?)
    }

    /// Runs `job` for every (cell, seed) pair on the worker pool.
    fn for_each_run(&self, cells: &[Cell], job: impl Fn(&Cell, u64) -> Result<()> + Sync) -> Result<()> {
        let jobs: Vec<(&Cell, u64)> = cells
            .iter()
            .flat_map(|c| self.cfg.seeds.iter().map(move |&s| (c, s)))
            .collect();
        let pool = self.pool()?;
        pool.install(|| {
            jobs.par_iter()
                .map(|(c, s)| job(c, *s).with_context(|| format!("cell {} seed {s}", c.name)))
                .collect::<Result<Vec<()>>>()
        })?;
        Ok(())
    }

    pub fn run_finetune(&self) -> Result<()> {
        let cell = self.cfg.single_cell();
        self.for_each_run(std::slice::from_ref(&cell), |c, s| {
            self.finetune_cell(c, s)?;
            eprintln!("finetuned {} seed {s}", c.name);
            Ok(())
        })
    }

    pub fn run_eval(&self) -> Result<()> {
        let cell = self.cfg.single_cell();
        self.for_each_run(std::slice::from_ref(&cell), |c, s| {
            self.eval_cell(&c.name, s)?;
            Ok(())
        })
    }

    pub fn run_probe(&self) -> Result<()> {
        self.probe_cell(PRETRAINED_CELL, 0)?;
        let cell = self.cfg.single_cell();
        self.for_each_run(std::slice::from_ref(&cell), |c, s| {
            self.probe_cell(&c.name, s)?;
            Ok(())
        })
    }

    pub fn run_attn_export(&self) -> Result<usize> {
        let mut n = self.attn_export(PRETRAINED_CELL, 0)?.len();
        let cell = self.cfg.single_cell();
        for &s in &self.cfg.seeds {
            n += self.attn_export(&cell.name, s)?.len();
        }
        Ok(n)
    }

    /// Fine-tunes, evaluates and probes every grid cell for every seed.
    pub fn run_ablate(&self) -> Result<Grid> {
        self.require_stamp(&self.data_dir(), "gen-data")?;
        self.require_stamp(&self.pretrain_dir(), "pretrain")?;
        let cells = self.cfg.cells();
        eprintln!(
            "ablation grid: {} cells x {} seeds = {} runs",
            cells.len(),
            self.cfg.seeds.len(),
            cells.len() * self.cfg.seeds.len()
        );
        let grid = Grid {
            config_hash: self.hash.clone(),
            cells: cells.clone(),
            seeds: self.cfg.seeds.clone(),
        };
        write_json(&self.cfg.out.join("grid.json"), &grid)?;
        self.probe_cell(PRETRAINED_CELL, 0)?;
        self.for_each_run(&cells, |c, s| {
            self.finetune_cell(c, s)?;
            self.eval_cell(&c.name, s)?;
            self.probe_cell(&c.name, s)?;
            eprintln!("done {} seed {s}", c.name);
            Ok(())
        })?;
        Ok(grid)
    }
}

fn first_frame(ep: &Episode) -> Result<MultimodalSequence> {
    let image: Tensor = ep
        .frames
        .first()
        .cloned()
        .ok_or_else(|| anyhow::anyhow!("episode without frames"))?;
    Ok(MultimodalSequence::new(image, ep.instruction_tokens.clone(), vec![PAD], vec![0])?)
}

impl Experiment {
    /// Aggregates every evaluated cell into `report.{csv,json}`,
    /// `ablation.csv` and `probes.csv`.
    pub fn run_report(&self) -> Result<crate::report::ReportTable> {
        let (evals, probes) = crate::report::collect_outputs(&self.cfg.out.join("cells"))?;
        if evals.is_empty() {
            return Err(MissingArtifact {
                path: self.cfg.out.join("cells"),
                producer: "eval",
            }
            .into());
        }
        let mut seeds: Vec<u64> = evals.iter().map(|e| e.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let expert = if self.data_dir().join("stamp.json").exists() {
            self.require_stamp(&self.data_dir(), "gen-data")?;
            Some((seeds, self.expert_records()?))
        } else {
            None
        };
        let table = crate::report::build_report(&self.hash, evals, probes, expert)?;
        table.write(&self.cfg.out)?;
        Ok(table)
    }
}
