//! Pretraining and the three fine-tuning modes: `Default` (adapters on every
//! linear layer), `Freeze` (visual encoder untouched) and `Align` (adds the
//! weighted alignment term).

mod optim;

#[cfg(test)]
mod tests;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use optim::{clip_global_norm, OptimizerKind, Optimizer};

use crate::alignment::{
    alignment_term, student_features, total_loss_on_tape, AlignConfig, Projector, ProjectorKind,
};
use crate::error::{Error, Result};
use crate::model::{
    apply_adapters, forward_on_tape, init_adapters, init_params, read_checkpoint, vla_loss_on_tape,
    write_checkpoint, AdapterSpec, ModelConfig, MultimodalSequence, ADAPTER_PREFIX,
    IMAGE_ENCODER_PREFIX,
};
use crate::numerics::{fnv1a, GradTape, ParamStore, Prng, Tensor, Var};
use crate::taskgen::Episode;
use crate::teacher::FeatureCache;

const INIT_STREAM: u64 = 0x1417;
const ADAPTER_STREAM: u64 = 0xada9;
const BATCH_STREAM: u64 = 0xba7c;
pub const PROJECTOR_PREFIX: &str = "proj.";
/// Rows of student features used to fit a whitening projector.
const WHITENING_FIT_SAMPLES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Default,
    Freeze,
    Align,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Default => "default",
            Mode::Freeze => "freeze",
            Mode::Align => "align",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub adapter: AdapterSpec,
    /// Train the base weights directly instead of adapters.
    pub full_finetune: bool,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    /// Expert actions predicted per frame.
    pub chunk: usize,
    pub seed: u64,
    pub align: AlignConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Default,
            steps: 6000,
            batch_size: 8,
            lr: 5e-4,
            optimizer: OptimizerKind::Sgd,
            adapter: AdapterSpec::default(),
            full_finetune: false,
            clip_norm: 1.0,
            chunk: 3,
            seed: 0,
            align: AlignConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.chunk == 0 {
            return Err(Error::Config("batch_size and chunk must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be >= 0".into()));
        }
        if !self.full_finetune && self.adapter.rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        if self.mode == Mode::Align {
            self.align.validate(model)?;
        }
        Ok(())
    }

    pub fn digest(&self, model: &ModelConfig) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a(&[json.as_bytes(), &model.digest().to_le_bytes()].concat())
    }
}

/// One closed-loop training example and its global frame number, the key
/// into the teacher feature cache.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seq: MultimodalSequence,
    pub frame: u64,
}

/// Samples for every frame, numbered in the order the feature cache uses.
pub fn samples_from_episodes(episodes: &[Episode], chunk: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    let mut frame = 0u64;
    for ep in episodes {
        for seq in ep.training_sequences(chunk)? {
            out.push(Sample { seq, frame });
            frame += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_vla: f64,
    pub l_align: f64,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub mode: Mode,
    pub lambda: f64,
    pub clip_norm: f64,
    pub steps: Vec<StepRecord>,
    pub final_checkpoint: Option<String>,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn losses_csv(&self) -> String {
        let mut s = format!("# config_hash={}\nstep,l_vla,l_align,total\n", self.config_hash);
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.l_vla, r.l_align, r.total);
        }
        s
    }

    pub fn write(&self, json: &Path, csv: &Path) -> Result<()> {
        for (path, body) in [(json, self.to_json()), (csv, self.losses_csv())] {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(path, body).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Parameters and optimizer state of one training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelConfig,
    pub base: ParamStore,
    pub adapters: Option<(AdapterSpec, ParamStore)>,
    pub projector: Option<Projector>,
    optimizer: Optimizer,
    pub step: usize,
}

impl TrainState {
    /// Starts a run from `base`. Align mode needs the teacher width `d_t`.
    pub fn new(model: ModelConfig, base: ParamStore, cfg: &TrainConfig, d_t: Option<usize>) -> Result<Self> {
        cfg.validate(&model)?;
        let adapters = if cfg.full_finetune {
            None
        } else {
            let mut rng = Prng::new(cfg.seed, ADAPTER_STREAM);
            Some((cfg.adapter, init_adapters(&model, &base, cfg.adapter, &mut rng)?))
        };
        let projector = if cfg.mode == Mode::Align {
            let d_t = d_t.ok_or_else(|| Error::Config("align mode needs teacher features".into()))?;
            Some(Projector::new(cfg.align.projector.clone(), model.width, d_t, model.width)?)
        } else {
            None
        };
        Ok(Self {
            model,
            base,
            adapters,
            projector,
            optimizer: Optimizer::new(cfg.optimizer, cfg.lr),
            step: 0,
        })
    }

    fn base_tracked(&self, cfg: &TrainConfig, name: &str) -> bool {
        cfg.full_finetune && !(cfg.mode == Mode::Freeze && name.starts_with(IMAGE_ENCODER_PREFIX))
    }

    fn adapter_tracked(cfg: &TrainConfig, name: &str) -> bool {
        let img = format!("{ADAPTER_PREFIX}{IMAGE_ENCODER_PREFIX}");
        !(cfg.mode == Mode::Freeze && name.starts_with(&img))
    }

    /// Base weights with adapters merged in, for inference.
    pub fn merged(&self) -> Result<ParamStore> {
        match &self.adapters {
            Some((spec, ad)) => apply_adapters(&self.base, ad, *spec),
            None => Ok(self.base.clone()),
        }
    }

    /// Everything a checkpoint stores: base, `lora.*` and `proj.*` entries.
    pub fn params(&self) -> ParamStore {
        let mut p = self.base.clone();
        if let Some((_, ad)) = &self.adapters {
            p.extend(ad);
        }
        if let Some(proj) = &self.projector {
            p.extend(proj.params());
        }
        p
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, self.model.digest(), &self.params())
    }

    /// Fits a whitening projector on student features of up to 32 samples.
    pub fn fit_projector(&mut self, cfg: &TrainConfig, samples: &[Sample]) -> Result<()> {
        let Some(proj) = &self.projector else { return Ok(()) };
        if proj.spec().kind != ProjectorKind::Whitening || proj.is_fitted() {
            return Ok(());
        }
        let merged = self.merged()?;
        let mut rows = Vec::new();
        for s in samples.iter().take(WHITENING_FIT_SAMPLES) {
            let mut tape = GradTape::new();
            let b = merged.bind(&mut tape, |_| false);
            let vars = forward_on_tape(&mut tape, &b, &self.model, &s.seq, None)?;
            let h = student_features(&mut tape, &vars, &self.model, &cfg.align)?;
            let h = tape.value(h);
            rows.extend((0..h.rows()).map(|r| h.row(r).to_vec()));
        }
        let batch = Tensor::from_rows(&rows)?;
        self.projector.as_mut().expect("checked above").fit_whitening(&batch)
    }

    /// One optimizer update on `batch`.
    pub fn train_step(
        &mut self,
        cfg: &TrainConfig,
        batch: &[&Sample],
        features: Option<&FeatureCache>,
    ) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let align = cfg.mode == Mode::Align;
        let features = match (align, features) {
            (true, None) => return Err(Error::Config("align mode needs a teacher feature cache".into())),
            (_, f) => f,
        };
        let mut tape = GradTape::new();
        let mut b = self.base.bind(&mut tape, |n| self.base_tracked(cfg, n));
        let spec = match &self.adapters {
            Some((spec, ad)) => {
                b.extend(ad.bind(&mut tape, |n| Self::adapter_tracked(cfg, n)));
                Some(*spec)
            }
            None => None,
        };
        let pb = self.projector.as_ref().map(|p| p.bind(&mut tape));

        let mut vla = Vec::with_capacity(batch.len());
        let mut al = Vec::with_capacity(batch.len());
        for s in batch {
            let vars = forward_on_tape(&mut tape, &b, &self.model, &s.seq, spec)?;
            vla.push(vla_loss_on_tape(&mut tape, &self.model, &vars, &s.seq)?);
            if align {
                let z = &features.expect("checked above").get(s.frame)?.z;
                let proj = self.projector.as_ref().expect("align state has a projector");
                let pb = pb.as_ref().expect("bound with projector");
                al.push(alignment_term(&mut tape, &vars, &self.model, s.seq.text.len(), &cfg.align, proj, pb, z)?);
            }
        }
        let l_vla = mean_of(&mut tape, &vla);
        let (l_align, total) = if align {
            let la = mean_of(&mut tape, &al);
            (Some(la), total_loss_on_tape(&mut tape, l_vla, la, cfg.align.lambda)?)
        } else {
            (None, l_vla)
        };
        let record = StepRecord {
            step: self.step,
            l_vla: tape.value(l_vla).item()?,
            l_align: l_align.map_or(Ok(0.0), |v| tape.value(v).item())?,
            total: tape.value(total).item()?,
            grad_norm: 0.0,
        };
        let diverged = |reason: String| Error::Training {
            step: self.step,
            reason,
            last_good: None,
        };
        if !(record.l_vla.is_finite() && record.l_align.is_finite() && record.total.is_finite()) {
            return Err(diverged(format!(
                "non-finite loss (vla {}, align {}, total {})",
                record.l_vla, record.l_align, record.total
            )));
        }
        let mut grads = tape.backward(total)?;
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(diverged(format!("non-finite gradient for {name}")));
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);

        self.optimizer.begin_step();
        for (name, g) in &grads {
            if name.starts_with(PROJECTOR_PREFIX) {
                let proj = self.projector.as_mut().ok_or_else(|| Error::State(format!("stray gradient {name}")))?;
                let next = self.optimizer.apply(name, proj.params().get(name)?, g);
                proj.update(name, next)?;
            } else if name.starts_with(ADAPTER_PREFIX) {
                let (_, ad) = self.adapters.as_mut().ok_or_else(|| Error::State(format!("stray gradient {name}")))?;
                let next = self.optimizer.apply(name, ad.get(name)?, g);
                *ad.get_mut(name)? = next;
            } else {
                let next = self.optimizer.apply(name, self.base.get(name)?, g);
                *self.base.get_mut(name)? = next;
            }
        }
        if let Some(p) = self.projector.as_mut() {
            p.enforce()?;
        }
        self.step += 1;
        Ok(StepRecord { grad_norm, ..record })
    }
}

fn mean_of(tape: &mut GradTape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t).expect("scalar terms");
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Epoch-wise shuffled batches from a dedicated stream.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Prng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng: Prng::new(seed, BATCH_STREAM),
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Path of the last-good checkpoint written when a run diverges.
pub fn last_good_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".last_good");
    PathBuf::from(s)
}

/// Runs `cfg.steps` updates. When `checkpoint` is set the final state is
/// written there; a diverging run writes its last good state next to it.
pub fn run_training(
    state: &mut TrainState,
    samples: &[Sample],
    features: Option<&FeatureCache>,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<RunRecord> {
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    if cfg.mode == Mode::Align && features.is_none() {
        return Err(Error::Config("align mode needs a teacher feature cache".into()));
    }
    state.fit_projector(cfg, samples)?;
    let mut sampler = BatchSampler::new(samples.len(), cfg.seed);
    let mut steps = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch: Vec<&Sample> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| &samples[i])
            .collect();
        match state.train_step(cfg, &batch, features) {
            Ok(r) => steps.push(r),
            Err(Error::Training { step, reason, .. }) => {
                let last_good = match checkpoint {
                    Some(p) => {
                        let lg = last_good_path(p);
                        state.save_checkpoint(&lg)?;
                        Some(lg)
                    }
                    None => None,
                };
                return Err(Error::Training { step, reason, last_good });
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(p) = checkpoint {
        state.save_checkpoint(p)?;
    }
    Ok(RunRecord {
        config_hash: format!("{:016x}", cfg.digest(&state.model)),
        mode: cfg.mode,
        lambda: if cfg.mode == Mode::Align { cfg.align.lambda } else { 0.0 },
        clip_norm: cfg.clip_norm,
        steps,
        final_checkpoint: checkpoint.and_then(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()),
    })
}

/// Trains every base weight from a fresh initialization.
pub fn pretrain(
    model: &ModelConfig,
    samples: &[Sample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(TrainState, RunRecord)> {
    let cfg = TrainConfig {
        mode: Mode::Default,
        full_finetune: true,
        ..cfg.clone()
    };
    let base = init_params(model, &mut Prng::new(cfg.seed, INIT_STREAM))?;
    let mut state = TrainState::new(model.clone(), base, &cfg, None)?;
    let record = run_training(&mut state, samples, None, &cfg, checkpoint)?;
    Ok((state, record))
}

/// Fine-tunes from pretrained `base` in the configured mode.
pub fn finetune(
    model: &ModelConfig,
    base: &ParamStore,
    samples: &[Sample],
    features: Option<&FeatureCache>,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(TrainState, RunRecord)> {
    if cfg.mode == Mode::Align && features.is_none() {
        return Err(Error::Config("align mode needs a teacher feature cache".into()));
    }
    let d_t = features.and_then(|f| f.iter().next()).map(|(_, f)| f.z.cols());
    let d_t = match (cfg.mode, d_t) {
        (Mode::Align, None) => return Err(Error::Config("teacher feature cache is empty".into())),
        (_, d) => d,
    };
    let mut state = TrainState::new(model.clone(), base.clone(), cfg, d_t)?;
    let record = run_training(&mut state, samples, features, cfg, checkpoint)?;
    Ok((state, record))
}

/// Splits a checkpoint table into base, adapter and projector parts.
pub fn split_params(params: &ParamStore) -> (ParamStore, ParamStore, ParamStore) {
    let mut base = ParamStore::new();
    let mut ad = ParamStore::new();
    let mut proj = ParamStore::new();
    for (name, t) in params.iter() {
        let dst = if name.starts_with(ADAPTER_PREFIX) {
            &mut ad
        } else if name.starts_with(PROJECTOR_PREFIX) {
            &mut proj
        } else {
            &mut base
        };
        dst.insert(name.clone(), t.clone());
    }
    (base, ad, proj)
}

/// Loads a checkpoint written for `model`, returning inference weights with
/// any adapters merged in.
pub fn load_checkpoint(path: &Path, model: &ModelConfig, adapter: AdapterSpec) -> Result<ParamStore> {
    let params = read_checkpoint(path, Some(model.digest()))?;
    let (base, ad, _) = split_params(&params);
    if ad.is_empty() {
        Ok(base)
    } else {
        apply_adapters(&base, &ad, adapter)
    }
}

/// Mean masked next-token loss over `samples` without tracking gradients.
pub fn evaluate_loss(model: &ModelConfig, params: &ParamStore, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("no evaluation samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let mut tape = GradTape::new();
        let b = params.bind(&mut tape, |_| false);
        let vars = forward_on_tape(&mut tape, &b, model, &s.seq, None)?;
        let l = vla_loss_on_tape(&mut tape, model, &vars, &s.seq)?;
        total += tape.value(l).item()?;
    }
    Ok(total / samples.len() as f64)
}
