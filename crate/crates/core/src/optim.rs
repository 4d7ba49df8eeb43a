//! AdamW with decoupled weight decay, plain SGD, and the cosine schedule.

use std::f64::consts::PI;

use crate::error::Result;
use crate::params::{GradMap, ParamSet};
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
}

/// First/second moments for every tensor of one parameter set, plus the
/// shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl OptState {
    pub fn for_params(p: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW update of a single tensor. `t` is the 1-based step count after
/// this update (used for bias correction).
pub fn adamw_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    hp: &AdamW,
) {
    let (b1, b2) = hp.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let decay = hp.lr * hp.weight_decay;
    for (((p, &g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *p -= decay * *p;
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p -= hp.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// AdamW update of a whole parameter set.
pub fn adamw_update(
    params: &mut ParamSet,
    grads: &GradMap,
    state: &mut OptState,
    hp: &AdamW,
) -> Result<()> {
    params.check_layout(grads)?;
    state.t += 1;
    let t = state.t;
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        adamw_step(p, g, m, v, t, hp);
    }
    Ok(())
}

/// `params ← params − lr · grads`
pub fn sgd_update(params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
    params.check_layout(grads)?;
    for (p, g) in params.tensors_mut().iter_mut().zip(grads.tensors()) {
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    Ok(())
}

/// Cosine annealing from `base_lr` at step 0 to `min_lr` at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * frac).cos())
}
