//! Projectors from student width `d_in` to teacher width `d_out`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{linalg, matmul, Bindings, GradTape, ParamStore, Prng, Tensor, Var, LAYER_NORM_EPS};

/// Regularizer added to covariance eigenvalues before whitening.
pub const WHITENING_EPS: f64 = 1e-6;
/// Minimum power iterations per spectral enforcement.
pub const POWER_ITERATIONS: usize = 20;
const POWER_TOL: f64 = 1e-13;
const POWER_MAX: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    Mlp,
    Cosine,
    Orthogonal,
    Rff,
    Whitening,
    SpectralNorm,
    Film,
}

impl ProjectorKind {
    pub const ALL: [ProjectorKind; 7] = [
        ProjectorKind::Mlp,
        ProjectorKind::Cosine,
        ProjectorKind::Orthogonal,
        ProjectorKind::Rff,
        ProjectorKind::Whitening,
        ProjectorKind::SpectralNorm,
        ProjectorKind::Film,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProjectorKind::Mlp => "mlp",
            ProjectorKind::Cosine => "cosine",
            ProjectorKind::Orthogonal => "orthogonal",
            ProjectorKind::Rff => "rff",
            ProjectorKind::Whitening => "whitening",
            ProjectorKind::SpectralNorm => "spectral_norm",
            ProjectorKind::Film => "film",
        }
    }

    /// Variants whose weights are fixed by construction.
    pub fn fixed(self) -> bool {
        matches!(self, ProjectorKind::Orthogonal | ProjectorKind::Rff)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorSpec {
    pub kind: ProjectorKind,
    pub frozen: bool,
    /// MLP hidden width.
    pub hidden: usize,
    /// RFF bandwidth; `None` means `sqrt(d_in)`.
    pub gamma: Option<f64>,
    pub seed: u64,
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        Self {
            kind: ProjectorKind::Mlp,
            frozen: true,
            hidden: 128,
            gamma: None,
            seed: 0x9e0c,
        }
    }
}

impl ProjectorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind.fixed() && !self.frozen {
            return Err(Error::Config(format!(
                "the {} projector has fixed weights and must be frozen",
                self.kind.name()
            )));
        }
        if self.kind == ProjectorKind::Mlp && self.hidden == 0 {
            return Err(Error::Config("mlp projector hidden width must be positive".into()));
        }
        if let Some(g) = self.gamma {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::Config(format!("rff gamma must be positive, got {g}")));
            }
        }
        Ok(())
    }
}

/// A projector instance: its spec, dimensions and `proj.*` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    spec: ProjectorSpec,
    d_in: usize,
    d_out: usize,
    params: ParamStore,
}

fn n(s: &str) -> String {
    format!("proj.{s}")
}

impl Projector {
    /// `cond_width` is the FiLM conditioning width; other variants ignore it.
    pub fn new(spec: ProjectorSpec, d_in: usize, d_out: usize, cond_width: usize) -> Result<Projector> {
        spec.validate()?;
        if d_in == 0 || d_out == 0 {
            return Err(Error::Config("projector dimensions must be positive".into()));
        }
        let mut rng = Prng::new(spec.seed, 0x960f);
        let mut p = ParamStore::new();
        match spec.kind {
            ProjectorKind::Mlp => {
                p.insert(n("ln.g"), Tensor::filled(&[d_in], 1.0));
                p.insert(n("ln.b"), Tensor::zeros(&[d_in]));
                p.insert(n("w1"), linalg::orthogonal(spec.hidden, d_in, &mut rng));
                p.insert(n("b1"), Tensor::zeros(&[spec.hidden]));
                p.insert(n("w2"), linalg::orthogonal(d_out, spec.hidden, &mut rng));
                p.insert(n("b2"), Tensor::zeros(&[d_out]));
            }
            ProjectorKind::Cosine | ProjectorKind::Orthogonal => {
                if spec.kind == ProjectorKind::Orthogonal && d_out > d_in {
                    return Err(Error::Config(format!(
                        "orthonormal rows need d_out <= d_in, got {d_out} > {d_in}"
                    )));
                }
                p.insert(n("w"), linalg::orthogonal(d_out, d_in, &mut rng));
            }
            ProjectorKind::Rff => {
                let gamma = spec.gamma.unwrap_or((d_in as f64).sqrt());
                p.insert(n("w"), Tensor::randn(&[d_out, d_in], 1.0 / gamma, &mut rng));
                p.insert(n("b"), Tensor::uniform(&[d_out], 0.0, 2.0 * PI, &mut rng));
            }
            ProjectorKind::Whitening => {
                if d_out > d_in {
                    return Err(Error::Config(format!(
                        "whitening keeps at most d_in components, got d_out {d_out} > {d_in}"
                    )));
                }
                p.insert(n("b"), Tensor::zeros(&[d_out]));
            }
            ProjectorKind::SpectralNorm => {
                p.insert(n("w"), Tensor::randn(&[d_out, d_in], (1.0 / d_in as f64).sqrt(), &mut rng));
                let mut v = Tensor::randn(&[d_in], 1.0, &mut rng);
                let nv = v.norm();
                v = v.scale(1.0 / nv);
                p.insert(n("sn_v"), v);
            }
            ProjectorKind::Film => {
                if cond_width == 0 {
                    return Err(Error::Config("film projector needs a conditioning width".into()));
                }
                let s = 0.1 / (cond_width as f64).sqrt();
                p.insert(n("w"), linalg::orthogonal(d_out, d_in, &mut rng));
                p.insert(n("film.gw"), Tensor::randn(&[d_out, cond_width], s, &mut rng));
                p.insert(n("film.gb"), Tensor::filled(&[d_out], 1.0));
                p.insert(n("film.bw"), Tensor::randn(&[d_out, cond_width], s, &mut rng));
                p.insert(n("film.bb"), Tensor::zeros(&[d_out]));
            }
        }
        let mut proj = Projector {
            spec,
            d_in,
            d_out,
            params: p,
        };
        if proj.spec.kind == ProjectorKind::SpectralNorm {
            proj.enforce_with(POWER_MAX)?;
        }
        Ok(proj)
    }

    /// Rebuilds a projector from stored parameters.
    pub fn from_params(spec: ProjectorSpec, d_in: usize, d_out: usize, cond_width: usize, params: ParamStore) -> Result<Projector> {
        let fresh = Projector::new(spec, d_in, d_out, cond_width)?;
        let mut proj = fresh.clone();
        for (name, t) in params.iter() {
            match fresh.params.get(name) {
                Ok(old) if old.shape() != t.shape() => {
                    return Err(Error::Compatibility(format!(
                        "{name}: stored shape {:?} differs from {:?}",
                        t.shape(),
                        old.shape()
                    )))
                }
                Err(_) if !(proj.spec.kind == ProjectorKind::Whitening && (name == &n("w") || name == &n("mu"))) => {
                    return Err(Error::Compatibility(format!("unexpected projector parameter {name}")))
                }
                _ => proj.params.insert(name.clone(), t.clone()),
            }
        }
        Ok(proj)
    }

    pub fn spec(&self) -> &ProjectorSpec {
        &self.spec
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Parameters an optimizer may update; empty when frozen.
    pub fn learnable(&self) -> Vec<String> {
        if self.spec.frozen {
            return Vec::new();
        }
        match self.spec.kind {
            ProjectorKind::Whitening => vec![n("b")],
            ProjectorKind::SpectralNorm => vec![n("w")],
            _ => self.params.names().cloned().collect(),
        }
    }

    /// Overwrites learnable parameters, then re-applies the spectral bound.
    pub fn update(&mut self, name: &str, value: Tensor) -> Result<()> {
        if !self.learnable().iter().any(|l| l == name) {
            return Err(Error::Contract(format!("{name} is not a learnable projector parameter")));
        }
        let slot = self.params.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("projector update", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn is_fitted(&self) -> bool {
        self.spec.kind != ProjectorKind::Whitening || self.params.contains(&n("w"))
    }

    /// PCA whitening onto the top `d_out` covariance directions of `batch`:
    /// `z = diag(lambda + eps)^(-1/2) U^T (h - mu) + b`.
    pub fn fit_whitening(&mut self, batch: &Tensor) -> Result<()> {
        if self.spec.kind != ProjectorKind::Whitening {
            return Err(Error::Config(format!("{} projector cannot be fitted", self.spec.kind.name())));
        }
        if self.is_fitted() {
            return Err(Error::State("whitening statistics are already fitted".into()));
        }
        if batch.rank() != 2 || batch.cols() != self.d_in {
            return Err(Error::shape("fit_whitening", batch.shape(), &[batch.rows(), self.d_in]));
        }
        let m = batch.rows();
        if m < 2 {
            return Err(Error::Input(format!("whitening needs at least 2 rows, got {m}")));
        }
        batch.ensure_finite("whitening batch")?;
        let mu = batch.mean_rows();
        let mut centered = batch.clone();
        for r in 0..m {
            for (v, c) in centered.row_mut(r).iter_mut().zip(mu.data()) {
                *v -= c;
            }
        }
        let cov = matmul(&centered.transpose(), &centered)?.scale(1.0 / m as f64);
        let (values, vectors) = linalg::symmetric_eigen(&cov)?;
        let d = self.d_in;
        let mut w = Vec::with_capacity(self.d_out * d);
        for (i, &lambda) in values.iter().take(self.d_out).enumerate() {
            let s = 1.0 / (lambda.max(0.0) + WHITENING_EPS).sqrt();
            w.extend((0..d).map(|j| s * vectors.at(j, i)));
        }
        self.params.insert(n("w"), Tensor::matrix(self.d_out, d, w)?);
        self.params.insert(n("mu"), mu);
        Ok(())
    }

    /// Power-iteration estimate of the largest singular value of `proj.w`,
    /// warm-started from and updating the stored right singular vector.
    pub fn spectral_estimate(&mut self, min_iters: usize) -> Result<f64> {
        let w = self.params.get(&n("w"))?.clone();
        let v = self.params.get_mut(&n("sn_v"))?;
        let (sigma, nv) = power_iteration(&w, v, min_iters)?;
        *v = nv;
        Ok(sigma)
    }

    /// Rescales `proj.w` to spectral norm at most 1. No-op for frozen
    /// projectors, which were enforced at construction, and for variants
    /// without a spectral constraint.
    pub fn enforce(&mut self) -> Result<()> {
        if self.spec.frozen {
            return Ok(());
        }
        self.enforce_with(POWER_ITERATIONS)
    }

    fn enforce_with(&mut self, iters: usize) -> Result<()> {
        if self.spec.kind != ProjectorKind::SpectralNorm {
            return Ok(());
        }
        let sigma = self.spectral_estimate(iters)?;
        if sigma > 1.0 {
            let w = self.params.get_mut(&n("w"))?;
            *w = w.scale(1.0 / sigma);
        }
        Ok(())
    }

    /// Binds the projector's parameters; learnable ones are tracked unless
    /// the projector is frozen.
    pub fn bind(&self, tape: &mut GradTape) -> Bindings {
        let learn = self.learnable();
        self.params.bind(tape, |name| learn.iter().any(|l| l == name))
    }

    /// Records `P(h)` on the tape. `cond` is the `[1 x cond_width]` FiLM
    /// conditioning vector.
    pub fn project_on_tape(&self, tape: &mut GradTape, b: &Bindings, h: Var, cond: Option<Var>) -> Result<Var> {
        let hs = tape.shape(h);
        if hs.len() != 2 || hs[1] != self.d_in {
            return Err(Error::shape("project", hs, &[hs.first().copied().unwrap_or(0), self.d_in]));
        }
        let p = |s: &str| b.get(&n(s));
        match self.spec.kind {
            ProjectorKind::Mlp => {
                let x = tape.layer_norm(h, p("ln.g")?, p("ln.b")?, LAYER_NORM_EPS)?;
                let x = tape.matmul_t(x, p("w1")?)?;
                let x = tape.add_row(x, p("b1")?)?;
                let x = tape.gelu(x);
                let x = tape.matmul_t(x, p("w2")?)?;
                tape.add_row(x, p("b2")?)
            }
            ProjectorKind::Cosine => {
                let x = tape.matmul_t(h, p("w")?)?;
                Ok(tape.normalize_rows(x, super::COSINE_EPS))
            }
            ProjectorKind::Orthogonal | ProjectorKind::SpectralNorm => tape.matmul_t(h, p("w")?),
            ProjectorKind::Rff => {
                let x = tape.matmul_t(h, p("w")?)?;
                let x = tape.add_row(x, p("b")?)?;
                let x = tape.cos(x);
                Ok(tape.scale(x, (2.0 / self.d_out as f64).sqrt()))
            }
            ProjectorKind::Whitening => {
                if !self.is_fitted() {
                    return Err(Error::State("whitening projector used before fit".into()));
                }
                let w = p("w")?;
                let x = tape.matmul_t(h, w)?;
                let mu = tape.value(p("mu")?).clone().reshape(vec![1, self.d_in])?;
                let mu = tape.constant(mu);
                let shift = tape.matmul_t(mu, w)?;
                let shift = tape.scale(shift, -1.0);
                let x = tape.add_row(x, shift)?;
                tape.add_row(x, p("b")?)
            }
            ProjectorKind::Film => {
                let cond = cond.ok_or_else(|| Error::Input("film projector needs conditioning".into()))?;
                let x = tape.matmul_t(h, p("w")?)?;
                let g = tape.matmul_t(cond, p("film.gw")?)?;
                let g = tape.add_row(g, p("film.gb")?)?;
                let be = tape.matmul_t(cond, p("film.bw")?)?;
                let be = tape.add_row(be, p("film.bb")?)?;
                let x = tape.mul_row(x, g)?;
                tape.add_row(x, be)
            }
        }
    }

    /// Value-level projection.
    pub fn project(&self, h: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let b = self.params.bind(&mut tape, |_| false);
        let hv = tape.constant(h.clone());
        let cv = match cond {
            Some(c) => Some(tape.constant(c.clone().reshape(vec![1, c.len()])?)),
            None => None,
        };
        let out = self.project_on_tape(&mut tape, &b, hv, cv)?;
        Ok(tape.value(out).clone())
    }
}

/// Power iteration on `W^T W` from `v`. Runs at least `min_iters` steps and
/// keeps going until the estimate settles.
pub fn power_iteration(w: &Tensor, v: &Tensor, min_iters: usize) -> Result<(f64, Tensor)> {
    if w.rank() != 2 || v.len() != w.cols() {
        return Err(Error::shape("power_iteration", w.shape(), v.shape()));
    }
    let wt = w.transpose();
    let mut v = v.clone().reshape(vec![w.cols(), 1])?;
    let mut sigma = 0.0;
    for it in 0..POWER_MAX {
        let u = matmul(w, &v)?;
        let s = u.norm();
        if s == 0.0 {
            return Ok((0.0, v.reshape(vec![w.cols()])?));
        }
        let nv = matmul(&wt, &u)?;
        let nn = nv.norm();
        v = nv.scale(1.0 / nn);
        let done = it + 1 >= min_iters && (s - sigma).abs() <= POWER_TOL * s;
        sigma = s;
        if done {
            break;
        }
    }
    let sigma = matmul(w, &v)?.norm();
    Ok((sigma, v.reshape(vec![w.cols()])?))
}
