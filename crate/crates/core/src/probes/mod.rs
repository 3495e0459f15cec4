//! Diagnostics on frozen features: linear probing, class separability,
//! attention focus, and the paired statistics used to compare methods.

mod stats;


use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use stats::{
    average_ranks, summarize, wilcoxon_one_sided, PairedSamples, Summary, WilcoxonResult,
    EXACT_MAX_N, TIE_TOLERANCE,
};

use crate::error::{Error, Result};
use crate::model::{attention_map, extract_vision_tokens, forward, ModelConfig, MultimodalSequence};
use crate::numerics::{ParamStore, Prng, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub layer: usize,
    pub dataset: String,
}

/// One feature row per example with its class id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Tensor,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

impl FeatureMatrix {
    pub fn new(rows: Tensor, labels: Vec<usize>, provenance: Provenance) -> Result<Self> {
        if rows.rank() != 2 || rows.rows() != labels.len() {
            return Err(Error::Input(format!(
                "{} labels for feature matrix of shape {:?}",
                labels.len(),
                rows.shape()
            )));
        }
        Ok(Self { rows, labels, provenance })
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    fn require_classes(&self) -> Result<Vec<usize>> {
        let c = self.classes();
        if c.len() < 2 {
            return Err(Error::Input(format!("need at least 2 classes, got {}", c.len())));
        }
        Ok(c)
    }
}

/// Mean visual-token embedding of hidden state `layer` for each sequence.
pub fn extract_features(
    model: &ModelConfig,
    params: &ParamStore,
    data: &[(MultimodalSequence, usize)],
    layer: usize,
    provenance: Provenance,
) -> Result<FeatureMatrix> {
    if data.is_empty() {
        return Err(Error::Input("no examples to extract features from".into()));
    }
    if layer > model.layers {
        return Err(Error::Input(format!("layer {layer} outside 0..={}", model.layers)));
    }
    let mut rows = Vec::with_capacity(data.len());
    for (seq, _) in data {
        let trace = forward(model, params, seq, None)?;
        rows.push(extract_vision_tokens(&trace, layer)?.mean_rows().into_data());
    }
    let labels = data.iter().map(|(_, l)| *l).collect();
    FeatureMatrix::new(Tensor::from_rows(&rows)?, labels, Provenance { layer, ..provenance })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Capped at the training-split size.
    pub batch: usize,
    /// Fraction of each class held out for testing.
    pub test_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 40,
            batch: 128,
            test_fraction: 0.2,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("probe epochs and batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && (0.0..1.0).contains(&self.momentum) && self.weight_decay >= 0.0) {
            return Err(Error::Config("probe needs lr > 0, momentum in [0, 1), weight_decay >= 0".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Stratified split: per class, at least one row goes to each side.
pub fn stratified_split(labels: &[usize], test_fraction: f64, rng: &mut Prng) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::Input(format!("class {class} has fewer than 2 samples")));
        }
        rng.shuffle(&mut idx);
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    Ok((train, test))
}

/// Trains a softmax-linear classifier with momentum SGD on a stratified
/// split and returns held-out accuracy.
pub fn linear_probe(f: &FeatureMatrix, cfg: &ProbeConfig, rng: &mut Prng) -> Result<f64> {
    Ok(linear_probe_report(f, cfg, rng)?.test_accuracy)
}

/// As `linear_probe`, also reporting accuracy on the training split.
/// Features are standardized with training-split statistics.
pub fn linear_probe_report(f: &FeatureMatrix, cfg: &ProbeConfig, rng: &mut Prng) -> Result<ProbeReport> {
    cfg.validate()?;
    let classes = f.require_classes()?;
    let (train, test) = stratified_split(&f.labels, cfg.test_fraction, rng)?;
    let class_of: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let y: Vec<usize> = f.labels.iter().map(|l| class_of[l]).collect();
    let d = f.rows.cols();
    let c = classes.len();

    let mut mean = vec![0.0; d];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(f.rows.row(i)) {
            *m += v / train.len() as f64;
        }
    }
    let mut sd = vec![0.0; d];
    for &i in &train {
        for ((s, v), m) in sd.iter_mut().zip(f.rows.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / train.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    let x = |i: usize| -> Vec<f64> {
        f.rows.row(i).iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect()
    };

    // Weights [c x (d + 1)], bias in the last column.
    let width = d + 1;
    let mut w = vec![0.0; c * width];
    let mut vel = vec![0.0; c * width];
    let batch = cfg.batch.min(train.len());
    let mut order = train.clone();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let mut grad = vec![0.0; c * width];
            for &i in chunk {
                let xi = x(i);
                let p = softmax(&scores(&w, &xi, c));
                for k in 0..c {
                    let g = (p[k] - if k == y[i] { 1.0 } else { 0.0 }) / chunk.len() as f64;
                    let row = &mut grad[k * width..(k + 1) * width];
                    for (gj, xj) in row.iter_mut().zip(&xi) {
                        *gj += g * xj;
                    }
                    row[d] += g;
                }
            }
            for ((wi, vi), gi) in w.iter_mut().zip(&mut vel).zip(&grad) {
                *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *wi;
                *wi -= cfg.lr * *vi;
            }
        }
    }
    let accuracy = |idx: &[usize]| {
        let hits = idx
            .iter()
            .filter(|&&i| argmax(&scores(&w, &x(i), c)) == y[i])
            .count();
        hits as f64 / idx.len() as f64
    };
    Ok(ProbeReport {
        train_accuracy: accuracy(&train),
        test_accuracy: accuracy(&test),
    })
}

fn scores(w: &[f64], x: &[f64], c: usize) -> Vec<f64> {
    let width = x.len() + 1;
    (0..c)
        .map(|k| {
            let row = &w[k * width..(k + 1) * width];
            row[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[x.len()]
        })
        .collect()
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn argmax(s: &[f64]) -> usize {
    s.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    /// `tr(S_B) / tr(S_W)`; infinite when the within-class scatter vanishes.
    pub ratio: f64,
    pub between: f64,
    pub within: f64,
    /// Set when the within-class scatter is zero.
    pub degenerate: bool,
}

/// Fisher ratio of between-class to within-class scatter traces.
pub fn separability(f: &FeatureMatrix) -> Result<Separability> {
    let classes = f.require_classes()?;
    let d = f.rows.cols();
    let m = f.rows.rows() as f64;
    let mut global = vec![0.0; d];
    let mut means: BTreeMap<usize, (usize, Vec<f64>)> =
        classes.iter().map(|&c| (c, (0, vec![0.0; d]))).collect();
    for (i, l) in f.labels.iter().enumerate() {
        let e = means.get_mut(l).expect("class listed");
        e.0 += 1;
        for ((a, g), v) in e.1.iter_mut().zip(&mut global).zip(f.rows.row(i)) {
            *a += v;
            *g += v / m;
        }
    }
    for (n, mu) in means.values_mut() {
        mu.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let between: f64 = means
        .values()
        .map(|(n, mu)| *n as f64 * mu.iter().zip(&global).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    let within: f64 = f
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mu = &means[l].1;
            f.rows.row(i).iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum();
    let degenerate = within <= 0.0;
    Ok(Separability {
        ratio: if degenerate { f64::INFINITY } else { between / within },
        between,
        within,
        degenerate,
    })
}

/// Attention mass on the target patches of a normalized map.
pub fn attention_focus(map: &Tensor, target: &[bool]) -> Result<f64> {
    if map.len() != target.len() {
        return Err(Error::Input(format!(
            "mask of {} entries for a map of {}",
            target.len(),
            map.len()
        )));
    }
    if !target.iter().any(|&t| t) {
        return Err(Error::Input("empty target mask".into()));
    }
    if map.data().iter().any(|v| *v < 0.0 || !v.is_finite()) || (map.sum() - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("attention map must be a distribution, sums to {}", map.sum())));
    }
    let s: f64 = map.data().iter().zip(target).filter(|(_, t)| **t).map(|(v, _)| v).sum();
    Ok(s.clamp(0.0, 1.0))
}

/// Head-averaged attention from the first action-prediction position onto
/// the visual tokens of block `layer`.
pub fn action_attention(model: &ModelConfig, params: &ParamStore, seq: &MultimodalSequence, layer: usize) -> Result<Tensor> {
    let trace = forward(model, params, seq, None)?;
    let query = seq.prediction_position(model, 0);
    let k = model.visual_tokens();
    let mut acc = vec![0.0; k];
    for h in 0..model.heads {
        let m = attention_map(&trace, layer, h, query)?;
        acc.iter_mut().zip(m.data()).for_each(|(a, v)| *a += v / model.heads as f64);
    }
    Ok(Tensor::vector(acc))
}

/// 8-bit binary PGM of a 2-D map, linearly rescaled to 0..=255.
pub fn pgm_bytes(map: &Tensor) -> Result<Vec<u8>> {
    pgm_bytes_with_comment(map, None)
}

/// As `pgm_bytes`, with an optional `#` comment line in the header.
pub fn pgm_bytes_with_comment(map: &Tensor, comment: Option<&str>) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(Error::Input(format!("PGM export needs a 2-D map, got {:?}", map.shape())));
    }
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let comment = comment.map(|c| format!("# {}\n", c.replace('\n', " "))).unwrap_or_default();
    let mut out = format!("P5\n{comment}{} {}\n255\n", map.cols(), map.rows()).into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let bytes = pgm_bytes(map)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub model: String,
    pub layer: usize,
    pub metric: String,
    pub value: f64,
}

pub fn probe_csv(rows: &[ProbeRow], config_hash: &str) -> String {
    let mut s = format!("# config_hash={config_hash}\nmodel,layer,metric,value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.model, r.layer, r.metric, r.value);
    }
    s
}
