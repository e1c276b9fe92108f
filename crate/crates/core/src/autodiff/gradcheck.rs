use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::{Bindings, ParamStore};
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Denominator floor for relative errors, so that vanishing gradients are
/// compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// Worst coordinate per parameter tensor.
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let root = f(&mut g, &b)?;
    let v = g.value(root);
    if v.len() != 1 {
        return Err(Error::Shape {
            op: "grad_check (function must be scalar)",
            lhs: v.shape().to_vec(),
            rhs: vec![1],
        });
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` with central differences of step `h`
/// at every coordinate of every parameter.
pub fn grad_check<F>(store: &ParamStore, h: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    check_coords(store, h, tol, &f, |_, n| (0..n).collect())
}

/// Like [`grad_check`] but only at `per_param` randomly chosen coordinates of
/// each parameter tensor.
pub fn grad_check_sampled<F>(
    store: &ParamStore,
    h: f64,
    tol: f64,
    per_param: usize,
    rng: &mut RngState,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let mut rng = rng.clone();
    check_coords(store, h, tol, &f, move |_, n| {
        if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.below(n)).collect()
        }
    })
}

fn check_coords<F, S>(
    store: &ParamStore,
    h: f64,
    tol: f64,
    f: &F,
    mut select: S,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
    S: FnMut(usize, usize) -> Vec<usize>,
{
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let root = f(&mut g, &b)?;
    if !g.value(root).is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = g.backward(root)?;
    let analytic = store.flat_grads(&g, &grads);

    let base = store.flatten();
    let mut work = store.clone();
    let mut params = Vec::new();
    let mut offset = 0;
    let mut max_rel: f64 = 0.0;
    for (pi, name) in store.names().iter().enumerate() {
        let n = store.get(super::ParamId(pi)).len();
        let mut worst: Option<ParamCheck> = None;
        for j in select(pi, n) {
            let idx = offset + j;
            let mut flat = base.clone();
            flat[idx] = base[idx] + h;
            work.unflatten(&flat)?;
            let fp = eval(&work, f)?;
            flat[idx] = base[idx] - h;
            work.unflatten(&flat)?;
            let fm = eval(&work, f)?;
            let numeric = (fp - fm) / (2.0 * h);
            let e = rel_error(analytic[idx], numeric);
            if worst.as_ref().is_none_or(|w| e > w.rel_error) {
                worst = Some(ParamCheck {
                    name: name.clone(),
                    index: j,
                    analytic: analytic[idx],
                    numeric,
                    rel_error: e,
                });
            }
        }
        if let Some(w) = worst {
            max_rel = max_rel.max(w.rel_error);
            params.push(w);
        }
        offset += n;
    }
    Ok(GradCheckReport {
        params,
        max_rel_error: max_rel,
        tol,
        passed: max_rel < tol,
    })
}
