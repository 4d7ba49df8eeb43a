//! Central finite-difference Jacobian-vector products of gradient maps.

use crate::error::Result;
use crate::params::{GradMap, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct Fda {
    pub jvp: GradMap,
    /// Step actually used; `0` when the direction was zero.
    pub eps: f64,
}

/// `[g(base + ε·dir) − g(base − ε·dir)] / 2ε` with `ε = eps_scale / ‖dir‖₂`.
///
/// `g` maps parameters shaped like `base` to a gradient shaped like
/// `out_like`. A zero direction returns zeros without evaluating `g`. `base`
/// itself is never modified; the perturbed points are copies.
pub fn fda_jvp<F>(
    mut grad_fn: F,
    base: &ParamSet,
    dir: &GradMap,
    eps_scale: f64,
    out_like: &ParamSet,
) -> Result<Fda>
where
    F: FnMut(&ParamSet) -> Result<GradMap>,
{
    base.check_layout(dir)?;
    let norm = dir.l2_norm();
    if norm == 0.0 {
        return Ok(Fda {
            jvp: GradMap::zeros_like(out_like),
            eps: 0.0,
        });
    }
    let eps = eps_scale / norm;
    let plus = grad_fn(&base.perturbed(dir, eps)?)?;
    let minus = grad_fn(&base.perturbed(dir, -eps)?)?;
    let mut jvp = plus;
    jvp.axpy(-1.0, &minus);
    jvp.scale(1.0 / (2.0 * eps));
    Ok(Fda { jvp, eps })
}
