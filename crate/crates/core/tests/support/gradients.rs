//! Finite-difference checks for every differentiable tape operation and for
//! the full training objective. Shared with the acceptance suite.

use vla_align_core::alignment::{
    align_loss_on_tape, alignment_term, total_loss_on_tape, AlignConfig, Paradigm, Projector, ProjectorKind,
    ProjectorSpec, SimilarityKind, SimilaritySpec,
};
use vla_align_core::model::{
    forward_on_tape, init_adapters, init_params, vla_loss_on_tape, AdapterSpec, ModelConfig, MultimodalSequence,
};
use vla_align_core::numerics::{finite_diff_check_params, Bindings, GradTape, ParamStore, Prng, Tensor, Var};
use vla_align_core::taskgen::vocab::vocab_size;
use vla_align_core::teacher::{Teacher, TeacherConfig};
use vla_align_core::Result;

pub const STEP: f64 = 1e-5;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Prng::new(seed, 0x9c))
}

/// Reduces `out` to a scalar through fixed random weights so that every
/// output entry carries a distinct cotangent.
fn contract(tape: &mut GradTape, out: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(randn(tape.shape(out), seed));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

type Body = Box<dyn Fn(&mut GradTape, &Bindings) -> Result<Var>>;

fn case(inputs: &[(&str, Tensor)], body: Body) -> (ParamStore, Vec<String>, Body) {
    let mut p = ParamStore::new();
    for (name, t) in inputs {
        p.insert(*name, t.clone());
    }
    let names = inputs.iter().map(|(n, _)| n.to_string()).collect();
    (p, names, body)
}

/// Worst relative error per operation.
pub fn op_checks() -> Result<Vec<(String, f64)>> {
    let a = randn(&[4, 3], 1);
    let b = randn(&[3, 5], 2);
    let c = randn(&[4, 3], 3);
    let row = randn(&[3], 4);
    let sq = randn(&[6, 8], 5);
    let table = randn(&[7, 3], 6);
    let logits = randn(&[5, 6], 7);

    let mut cases: Vec<(&str, (ParamStore, Vec<String>, Body))> = vec![
        ("matmul", case(&[("a", a.clone()), ("b", b.clone())], Box::new(|t, v| {
            let o = t.matmul(v.get("a")?, v.get("b")?)?;
            contract(t, o, 10)
        }))),
        ("matmul_t", case(&[("a", a.clone()), ("c", c.clone())], Box::new(|t, v| {
            let o = t.matmul_t(v.get("a")?, v.get("c")?)?;
            contract(t, o, 11)
        }))),
        ("transpose", case(&[("a", a.clone())], Box::new(|t, v| {
            let o = t.transpose(v.get("a")?);
            contract(t, o, 12)
        }))),
        ("add", case(&[("a", a.clone()), ("c", c.clone())], Box::new(|t, v| {
            let o = t.add(v.get("a")?, v.get("c")?)?;
            contract(t, o, 13)
        }))),
        ("sub", case(&[("a", a.clone()), ("c", c.clone())], Box::new(|t, v| {
            let o = t.sub(v.get("a")?, v.get("c")?)?;
            contract(t, o, 14)
        }))),
        ("mul", case(&[("a", a.clone()), ("c", c.clone())], Box::new(|t, v| {
            let o = t.mul(v.get("a")?, v.get("c")?)?;
            contract(t, o, 15)
        }))),
        ("scale", case(&[("a", a.clone())], Box::new(|t, v| {
            let o = t.scale(v.get("a")?, -2.5);
            contract(t, o, 16)
        }))),
        ("add_row", case(&[("a", a.clone()), ("r", row.clone())], Box::new(|t, v| {
            let o = t.add_row(v.get("a")?, v.get("r")?)?;
            contract(t, o, 17)
        }))),
        ("mul_row", case(&[("a", a.clone()), ("r", row.clone())], Box::new(|t, v| {
            let o = t.mul_row(v.get("a")?, v.get("r")?)?;
            contract(t, o, 18)
        }))),
        ("tanh", case(&[("a", a.clone())], Box::new(|t, v| {
            let o = t.tanh(v.get("a")?);
            contract(t, o, 19)
        }))),
        ("gelu", case(&[("a", a.clone())], Box::new(|t, v| {
            let o = t.gelu(v.get("a")?);
            contract(t, o, 20)
        }))),
        ("cos", case(&[("a", a.clone())], Box::new(|t, v| {
            let o = t.cos(v.get("a")?);
            contract(t, o, 21)
        }))),
        ("layer_norm", case(&[("a", a.clone()), ("g", row.clone()), ("bias", randn(&[3], 22))], Box::new(|t, v| {
            let o = t.layer_norm(v.get("a")?, v.get("g")?, v.get("bias")?, 1e-5)?;
            contract(t, o, 23)
        }))),
        ("causal_attention", case(
            &[("q", sq.clone()), ("k", randn(&[6, 8], 24)), ("v", randn(&[6, 8], 25))],
            Box::new(|t, v| {
                let o = t.causal_attention(v.get("q")?, v.get("k")?, v.get("v")?, 2)?;
                contract(t, o, 26)
            }),
        )),
        ("slice_rows", case(&[("x", sq.clone())], Box::new(|t, v| {
            let o = t.slice_rows(v.get("x")?, 2, 3)?;
            contract(t, o, 27)
        }))),
        ("concat_rows", case(&[("a", a.clone()), ("c", randn(&[2, 3], 28))], Box::new(|t, v| {
            let o = t.concat_rows(&[v.get("a")?, v.get("c")?])?;
            contract(t, o, 29)
        }))),
        ("gather_rows", case(&[("table", table.clone())], Box::new(|t, v| {
            let o = t.gather_rows(v.get("table")?, &[3, 0, 3, 6])?;
            contract(t, o, 30)
        }))),
        ("mean_rows", case(&[("a", a.clone())], Box::new(|t, v| {
            let o = t.mean_rows(v.get("a")?)?;
            contract(t, o, 31)
        }))),
        ("normalize_rows", case(&[("a", a.clone())], Box::new(|t, v| {
            let o = t.normalize_rows(v.get("a")?, 1e-12);
            contract(t, o, 32)
        }))),
        ("sum", case(&[("a", a.clone())], Box::new(|t, v| {
            let o = t.tanh(v.get("a")?);
            Ok(t.sum(o))
        }))),
        ("mean", case(&[("a", a.clone())], Box::new(|t, v| {
            let o = t.tanh(v.get("a")?);
            Ok(t.mean(o))
        }))),
        ("cross_entropy", case(&[("logits", logits.clone())], Box::new(|t, v| {
            t.cross_entropy(v.get("logits")?, &[0, 2, 2, 4], &[5, 1, 3, 0], &[1.0, 0.5, 1.0, 0.0])
        }))),
    ];

    let z = randn(&[5, 4], 33);
    for kind in [SimilarityKind::Cosine, SimilarityKind::NegativeL2, SimilarityKind::NtXent] {
        let z = z.clone();
        let sim = SimilaritySpec { kind, temperature: 0.5 };
        let name: &'static str = match kind {
            SimilarityKind::Cosine => "align_loss/cosine",
            SimilarityKind::NegativeL2 => "align_loss/negative_l2",
            SimilarityKind::NtXent => "align_loss/nt_xent",
        };
        cases.push((name, case(&[("u", randn(&[5, 4], 34))], Box::new(move |t, v| {
            align_loss_on_tape(t, v.get("u")?, &z, &sim)
        }))));
    }

    let mut out = Vec::new();
    for (name, (params, check, body)) in cases {
        let err = finite_diff_check_params(|t, b| body(t, b), &params, &check, STEP, None)?;
        out.push((name.to_string(), err));
    }
    out.extend(projector_checks()?);
    Ok(out)
}

/// Gradients through every projector, with respect to its input, its
/// learnable weights and the conditioning vector.
fn projector_checks() -> Result<Vec<(String, f64)>> {
    let h = randn(&[5, 8], 40);
    let cond = randn(&[1, 8], 41);
    let z = randn(&[5, 4], 42);
    let mut out = Vec::new();
    for kind in ProjectorKind::ALL {
        let spec = ProjectorSpec {
            kind,
            frozen: kind.fixed(),
            hidden: 6,
            gamma: Some(1.0),
            ..ProjectorSpec::default()
        };
        let mut proj = Projector::new(spec, 8, 4, 8)?;
        if kind == ProjectorKind::Whitening {
            proj.fit_whitening(&randn(&[30, 8], 43))?;
        }
        let mut params = proj.params().clone();
        params.insert("h", h.clone());
        params.insert("cond", cond.clone());
        let mut check = vec!["h".to_string()];
        if kind == ProjectorKind::Film {
            check.push("cond".to_string());
        }
        check.extend(proj.learnable());
        let err = finite_diff_check_params(
            |t, b| {
                let u = proj.project_on_tape(t, b, b.get("h")?, Some(b.get("cond")?))?;
                align_loss_on_tape(t, u, &z, &SimilaritySpec::default())
            },
            &params,
            &check,
            STEP,
            None,
        )?;
        out.push((format!("projector/{}", kind.name()), err));
    }
    Ok(out)
}

/// The two-layer, width-16 student used for the objective check.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        layers: 2,
        width: 16,
        heads: 2,
        vocab: vocab_size(),
        max_len: 32,
        ..ModelConfig::default()
    }
}

fn samples(model: &ModelConfig, teacher: &Teacher) -> Result<Vec<(MultimodalSequence, Tensor)>> {
    let mut rng = Prng::new(50, 0);
    let mut out = Vec::new();
    for (text, targets, mask) in [
        (vec![10, 11, 12, 13], vec![1, 2, 3], vec![1u8, 1, 1]),
        (vec![14, 15], vec![4, 0, 6], vec![1u8, 1, 0]),
    ] {
        let image = Tensor::uniform(&[model.grid, model.grid, model.channels], 0.0, 1.0, &mut rng);
        let z = teacher.encode(&image)?.z;
        out.push((MultimodalSequence::new(image, text, targets, mask)?, z));
    }
    Ok(out)
}

/// `mean l_vla + lambda * mean l_align` over two samples, differentiated
/// with respect to every trainable entry of several training setups.
pub fn objective_checks() -> Result<Vec<(String, f64)>> {
    let model = small_model();
    let teacher = Teacher::new(TeacherConfig { d_t: 8, ..TeacherConfig::default() })?;
    let data = samples(&model, &teacher)?;
    let base = init_params(&model, &mut Prng::new(51, 0))?;

    struct Setup {
        name: &'static str,
        align: AlignConfig,
        adapters: bool,
    }
    let setups = [
        Setup {
            name: "full/backbone2enc/mlp/cosine",
            align: AlignConfig {
                lambda: 0.7,
                projector: ProjectorSpec { frozen: false, hidden: 12, ..ProjectorSpec::default() },
                ..AlignConfig::default()
            },
            adapters: false,
        },
        Setup {
            name: "adapters/enc2enc/film/nt_xent",
            align: AlignConfig {
                lambda: 1.3,
                paradigm: Paradigm::Enc2Enc,
                projector: ProjectorSpec { kind: ProjectorKind::Film, frozen: false, ..ProjectorSpec::default() },
                similarity: SimilaritySpec { kind: SimilarityKind::NtXent, temperature: 0.5 },
                ..AlignConfig::default()
            },
            adapters: true,
        },
        Setup {
            name: "adapters/backbone2enc/spectral_norm/negative_l2",
            align: AlignConfig {
                lambda: 0.2,
                layer: Some(1),
                projector: ProjectorSpec {
                    kind: ProjectorKind::SpectralNorm,
                    frozen: false,
                    ..ProjectorSpec::default()
                },
                similarity: SimilaritySpec { kind: SimilarityKind::NegativeL2, temperature: 0.1 },
                ..AlignConfig::default()
            },
            adapters: true,
        },
    ];

    let mut out = Vec::new();
    for s in setups {
        let proj = Projector::new(s.align.projector.clone(), model.width, 8, model.width)?;
        let spec = AdapterSpec::default();
        let mut params = base.clone();
        let mut check: Vec<String> = Vec::new();
        if s.adapters {
            let mut ad = init_adapters(&model, &base, spec, &mut Prng::new(52, 0))?;
            // Nonzero B so that A receives gradient as well.
            let names: Vec<String> = ad.iter().map(|(n, _)| n.to_string()).collect();
            for (i, n) in names.iter().enumerate() {
                let shape = ad.get(n)?.shape().to_vec();
                *ad.get_mut(n)? = Tensor::randn(&shape, 0.1, &mut Prng::new(53, i as u64));
            }
            check.extend(names);
            params.extend(&ad);
        } else {
            check.extend(base.iter().map(|(n, _)| n.to_string()));
        }
        check.extend(proj.learnable());
        params.extend(proj.params());
        let adapters = s.adapters.then_some(spec);
        let align = s.align.clone();
        let err = finite_diff_check_params(
            |t, b| {
                let mut vla = Vec::new();
                let mut al = Vec::new();
                for (seq, z) in &data {
                    let vars = forward_on_tape(t, b, &model, seq, adapters)?;
                    vla.push(vla_loss_on_tape(t, &model, &vars, seq)?);
                    al.push(alignment_term(t, &vars, &model, seq.text.len(), &align, &proj, b, z)?);
                }
                let lv = t.add(vla[0], vla[1])?;
                let lv = t.scale(lv, 0.5);
                let la = t.add(al[0], al[1])?;
                let la = t.scale(la, 0.5);
                total_loss_on_tape(t, lv, la, align.lambda)
            },
            &params,
            &check,
            STEP,
            None,
        )?;
        out.push((format!("objective/{}", s.name), err));
    }
    Ok(out)
}
