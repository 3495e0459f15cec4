//! Frozen teacher encoder and its precomputed patch-feature cache.
//!
//! The teacher is a seeded random patch perceptron: each patch vector passes
//! through `depth` orthogonally initialised layers `z <- tanh(gain (W z + b))`.
//! Its parameters live outside every gradient tape.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{patchify, ModelConfig};
use crate::numerics::{fnv1a, linalg, matmul, ParamStore, Prng, Tensor};
use crate::taskgen::read_episodes;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Feature width.
    pub d_t: usize,
    pub seed: u64,
    pub depth: usize,
    pub grid: usize,
    pub patch: usize,
    pub channels: usize,
    /// Pre-activation scale.
    pub gain: f64,
    /// Biases are drawn from `U(-bias_scale, bias_scale)`.
    pub bias_scale: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            d_t: 32,
            seed: 0x7eac4e12,
            depth: 2,
            grid: 8,
            patch: 2,
            channels: 3,
            gain: 2.0,
            bias_scale: 0.1,
        }
    }
}

impl TeacherConfig {
    pub fn visual_tokens(&self) -> usize {
        let side = self.grid / self.patch.max(1);
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_t == 0 || self.depth == 0 {
            return Err(Error::Config("teacher d_t and depth must be positive".into()));
        }
        if self.patch == 0 || self.grid % self.patch != 0 || self.channels == 0 {
            return Err(Error::Config(format!(
                "teacher patch {} must divide grid {}",
                self.patch, self.grid
            )));
        }
        if !(self.gain.is_finite() && self.gain > 0.0) || !(self.bias_scale >= 0.0) {
            return Err(Error::Config("teacher gain must be positive and bias_scale non-negative".into()));
        }
        Ok(())
    }

    /// The teacher must cut images into the same patches as the student.
    pub fn check_student(&self, student: &ModelConfig) -> Result<()> {
        if (self.grid, self.patch, self.channels) != (student.grid, student.patch, student.channels) {
            return Err(Error::Config(format!(
                "teacher patching {}px/{}px/{}ch differs from student {}px/{}px/{}ch",
                self.grid, self.patch, self.channels, student.grid, student.patch, student.channels
            )));
        }
        Ok(())
    }

    pub fn digest(&self) -> u64 {
        fnv1a(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Patch features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherFeatures {
    /// `[k x d_t]`
    pub z: Tensor,
    pub image_hash: u64,
}

pub fn image_hash(image: &Tensor) -> u64 {
    fnv1a(&image.to_vlat_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    cfg: TeacherConfig,
    params: ParamStore,
}

impl Teacher {
    pub fn new(cfg: TeacherConfig) -> Result<Teacher> {
        cfg.validate()?;
        let mut rng = Prng::new(cfg.seed, 0x7eac);
        let mut params = ParamStore::new();
        let mut d_in = cfg.patch * cfg.patch * cfg.channels;
        for l in 0..cfg.depth {
            params.insert(format!("teacher.{l}.w"), linalg::orthogonal(cfg.d_t, d_in, &mut rng));
            let b = Tensor::uniform(&[cfg.d_t], -cfg.bias_scale, cfg.bias_scale, &mut rng);
            params.insert(format!("teacher.{l}.b"), b);
            d_in = cfg.d_t;
        }
        Ok(Teacher { cfg, params })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.cfg
    }

    /// Read-only view of the weights.
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Identifies the teacher by configuration and weights.
    pub fn digest(&self) -> u64 {
        fnv1a(&[self.cfg.digest().to_le_bytes(), self.params.digest().to_le_bytes()].concat())
    }

    /// Features rounded to `f32` precision, the precision of the cache.
    pub fn encode(&self, image: &Tensor) -> Result<TeacherFeatures> {
        let c = &self.cfg;
        let mut h = patchify(image, c.grid, c.patch, c.channels)?;
        for l in 0..c.depth {
            let w = self.params.get(&format!("teacher.{l}.w"))?;
            let b = self.params.get(&format!("teacher.{l}.b"))?;
            h = matmul(&h, &w.transpose())?;
            for r in 0..h.rows() {
                for (v, bias) in h.row_mut(r).iter_mut().zip(b.data()) {
                    *v = (c.gain * (*v + bias)).tanh();
                }
            }
        }
        Ok(TeacherFeatures {
            z: h.map(|v| v as f32 as f64),
            image_hash: image_hash(image),
        })
    }
}

const MAGIC: &[u8; 4] = b"VLAF";
const VERSION: u32 = 1;

/// Decoded feature cache, indexed by global frame number.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureCache {
    records: Vec<(u64, TeacherFeatures)>,
}

impl FeatureCache {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, frame: u64) -> Result<&TeacherFeatures> {
        self.records
            .binary_search_by_key(&frame, |(i, _)| *i)
            .map(|pos| &self.records[pos].1)
            .map_err(|_| Error::Lookup(format!("no cached features for frame {frame}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &TeacherFeatures)> {
        self.records.iter().map(|(i, f)| (*i, f))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (idx, f) in &self.records {
            buf.extend_from_slice(&idx.to_le_bytes());
            buf.extend_from_slice(&f.image_hash.to_le_bytes());
            buf.extend_from_slice(&(f.z.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(f.z.cols() as u32).to_le_bytes());
            for &v in f.z.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FeatureCache> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad feature cache magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported feature cache version {version}")));
        }
        let count = r.u64()?;
        let mut records = Vec::new();
        let mut last = None;
        for _ in 0..count {
            let idx = r.u64()?;
            if last.is_some_and(|l| idx <= l) {
                return Err(Error::Format("feature cache indices are not increasing".into()));
            }
            last = Some(idx);
            let image_hash = r.u64()?;
            let k = r.u32()? as usize;
            let d = r.u32()? as usize;
            let payload = r.take(k * d * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            records.push((idx, TeacherFeatures { z: Tensor::matrix(k, d, data)?, image_hash }));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in feature cache".into()));
        }
        Ok(FeatureCache { records })
    }

    pub fn read(path: &Path) -> Result<FeatureCache> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("feature cache is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Encodes every frame of `images`, numbering frames consecutively.
pub fn build_cache<'a>(
    teacher: &Teacher,
    images: impl IntoIterator<Item = &'a Tensor>,
) -> Result<FeatureCache> {
    let records = images
        .into_iter()
        .enumerate()
        .map(|(i, img)| Ok((i as u64, teacher.encode(img)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureCache { records })
}

/// Writes one record per frame of the episode file at `dataset`, frames
/// numbered in file order. An existing cache must agree on every image hash.
pub fn precompute_features(dataset: &Path, teacher: &Teacher, out: &Path) -> Result<usize> {
    let episodes = read_episodes(dataset)?;
    let cache = build_cache(teacher, episodes.iter().flat_map(|e| &e.frames))?;
    if out.exists() {
        let old = FeatureCache::read(out)?;
        if old.len() != cache.len() {
            return Err(Error::Stale(format!(
                "{} holds {} records but the dataset has {} frames",
                out.display(),
                old.len(),
                cache.len()
            )));
        }
        for ((i, a), (_, b)) in old.iter().zip(cache.iter()) {
            if a.image_hash != b.image_hash {
                return Err(Error::Stale(format!(
                    "{}: frame {i} hash {:016x} does not match the dataset ({:016x})",
                    out.display(),
                    a.image_hash,
                    b.image_hash
                )));
            }
        }
    }
    cache.write(out)?;
    Ok(cache.len())
}

pub fn load_features(path: &Path, frame: u64) -> Result<TeacherFeatures> {
    FeatureCache::read(path)?.get(frame).cloned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{make_dataset, write_episodes, Canvas, Environment, SplitSpec};

    fn image(seed: u64) -> Tensor {
        Tensor::uniform(&[8, 8, 3], 0.0, 1.0, &mut Prng::new(seed, 0))
    }

    #[test]
    fn encode_is_deterministic_and_seeded() {
        let t = Teacher::new(TeacherConfig::default()).unwrap();
        let img = image(1);
        let a = t.encode(&img).unwrap();
        assert_eq!(a.z.shape(), &[16, 32]);
        assert_eq!(a, t.encode(&img).unwrap());
        let other = Teacher::new(TeacherConfig { seed: 1, ..TeacherConfig::default() }).unwrap();
        assert_ne!(a.z, other.encode(&img).unwrap().z);
        assert!(matches!(t.encode(&Tensor::zeros(&[4, 4, 3])), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_image_without_bias_gives_zero_features() {
        let t = Teacher::new(TeacherConfig { bias_scale: 0.0, ..TeacherConfig::default() }).unwrap();
        let z = t.encode(&Tensor::zeros(&[8, 8, 3])).unwrap().z;
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_layer_has_orthonormal_columns() {
        let t = Teacher::new(TeacherConfig::default()).unwrap();
        let w = t.params().get("teacher.0.w").unwrap();
        let g = matmul(&w.transpose(), w).unwrap();
        assert!(g.max_abs_diff(&Tensor::identity(12)).unwrap() < 1e-12);
    }

    #[test]
    fn cache_round_trip_and_errors() {
        let t = Teacher::new(TeacherConfig::default()).unwrap();
        let imgs: Vec<Tensor> = (0..4).map(image).collect();
        let cache = build_cache(&t, &imgs).unwrap();
        let bytes = cache.to_bytes();
        let back = FeatureCache::from_bytes(&bytes).unwrap();
        assert_eq!(back, cache);
        assert_eq!(back.get(2).unwrap().z, t.encode(&imgs[2]).unwrap().z);
        assert!(matches!(back.get(4), Err(Error::Lookup(_))));
        assert!(matches!(FeatureCache::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FeatureCache::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(FeatureCache::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn precompute_is_idempotent_and_detects_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("eps.jsonl");
        let out = dir.path().join("feat.vlaf");
        let t = Teacher::new(TeacherConfig::default()).unwrap();

        write_episodes(&data, &[]).unwrap();
        assert_eq!(precompute_features(&data, &t, &out).unwrap(), 0);
        assert!(FeatureCache::read(&out).unwrap().is_empty());
        fs::remove_file(&out).unwrap();

        let eps = make_dataset(3, &SplitSpec::default(), Environment::InDistribution, &Prng::new(1, 0), Canvas::default()).unwrap();
        write_episodes(&data, &eps).unwrap();
        let n = precompute_features(&data, &t, &out).unwrap();
        assert_eq!(n, eps.iter().map(|e| e.frames.len()).sum::<usize>());
        let first = fs::read(&out).unwrap();
        assert_eq!(precompute_features(&data, &t, &out).unwrap(), n);
        assert_eq!(fs::read(&out).unwrap(), first);
        let last = load_features(&out, n as u64 - 1).unwrap();
        assert_eq!(last.image_hash, image_hash(eps[2].frames.last().unwrap()));
        assert!(matches!(load_features(&out, n as u64), Err(Error::Lookup(_))));

        let other = make_dataset(3, &SplitSpec::default(), Environment::InDistribution, &Prng::new(2, 0), Canvas::default()).unwrap();
        write_episodes(&data, &other).unwrap();
        assert!(matches!(precompute_features(&data, &t, &out), Err(Error::Stale(_))));
        assert!(matches!(
            precompute_features(&dir.path().join("missing.jsonl"), &t, &out),
            Err(Error::Io { .. })
        ));
    }
}
