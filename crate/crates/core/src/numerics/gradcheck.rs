//! Central finite differences as an independent check on the tape.

use crate::error::{Error, Result};
use crate::numerics::{Bindings, GradTape, ParamStore, Tensor, Var};

/// Largest `|g - g_fd| / max(1, |g|)` between the tape gradient of `f` at `x`
/// and central differences with step `h`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut GradTape, Var) -> Result<Var>,
{
    let mut params = ParamStore::new();
    params.insert("x", x.clone());
    finite_diff_check_params(
        |tape, b| f(tape, b.get("x")?),
        &params,
        &["x".to_string()],
        h,
        None,
    )
}

/// Multi-parameter variant. Every name in `check` is tracked and perturbed;
/// other entries of `params` are bound as constants. `max_entries` thins each
/// parameter to evenly spaced coordinates when set.
pub fn finite_diff_check_params<F>(
    f: F,
    params: &ParamStore,
    check: &[String],
    h: f64,
    max_entries: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut GradTape, &Bindings) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Input(format!("finite difference step must be positive, got {h}")));
    }
    let tracked = |name: &str| check.iter().any(|c| c == name);
    let mut tape = GradTape::new();
    let b = params.bind(&mut tape, tracked);
    let loss = f(&mut tape, &b)?;
    let grads = tape.backward(loss)?;

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = GradTape::new();
        let b = p.bind(&mut tape, |_| false);
        let out = f(&mut tape, &b)?;
        let v = tape.value(out).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("objective evaluated to {v}")))
        }
    };

    let mut worst: f64 = 0.0;
    let mut work = params.clone();
    for name in check {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no gradient for {name}")))?;
        let n = analytic.len();
        let stride = match max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = analytic.data()[i];
            worst = worst.max((g - fd).abs() / g.abs().max(1.0));
        }
    }
    Ok(worst)
}
