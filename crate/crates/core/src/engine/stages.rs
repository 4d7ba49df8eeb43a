//! The three optimisation stages, their retained contexts and the BLO
//! reduction.
//!
//! Hypergradients differentiate through the last inner step of each stage
//! only. Earlier unrolled steps are treated as constants.

use crate::engine::config::{FdaPoint, MloConfig};
use crate::engine::fda::fda_jvp;
use crate::engine::losses::{cls_batch, recon_batch, LabeledBatch, Masks, Models};
use crate::error::{Error, Result};
use crate::masking::MaskSelection;
use crate::nn::{ModelDims, PatchGrid};
use crate::optim::{adamw_update, sgd_update, OptState};
use crate::params::{GradMap, ParamSet, Role};

/// Optimizer state for each parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Optims {
    pub e: OptState,
    pub d: OptState,
    pub c: OptState,
    pub t: OptState,
}

impl Optims {
    pub fn new(m: &Models) -> Self {
        Optims {
            e: OptState::for_params(&m.e),
            d: OptState::for_params(&m.d),
            c: OptState::for_params(&m.c),
            t: OptState::for_params(&m.t),
        }
    }
}

pub(crate) fn apply(
    cfg: &MloConfig,
    params: &mut ParamSet,
    grads: &GradMap,
    state: &mut OptState,
    lr: f64,
) -> Result<()> {
    if cfg.oracle_mode {
        sgd_update(params, grads, lr)
    } else {
        adamw_update(params, grads, state, &cfg.adamw(lr))
    }
}

/// What Stage III needs from the last Stage-I step.
#[derive(Clone, Debug)]
pub struct Stage1Ctx {
    pub grids: Vec<PatchGrid>,
    pub selections: Vec<MaskSelection>,
    pub e_pre: ParamSet,
    pub d_pre: ParamSet,
    /// Learning rate of the last step.
    pub lr: f64,
    /// Loss of the last step, before its update.
    pub loss: f64,
}

/// What Stage III needs from the last Stage-II step.
#[derive(Clone, Debug)]
pub struct Stage2Ctx {
    pub batch: LabeledBatch,
    pub c_pre: ParamSet,
    pub lr: f64,
    pub loss: f64,
}

/// Pretraining: one update of E and D per batch on the weighted
/// reconstruction loss, masks chosen by the frozen masking network.
#[allow(clippy::too_many_arguments)]
pub fn stage1_update(
    models: &mut Models,
    opt: &mut Optims,
    dims: &ModelDims,
    batches: &[Vec<PatchGrid>],
    ratio: f64,
    lr: f64,
    cfg: &MloConfig,
) -> Result<Stage1Ctx> {
    let mut ctx = None;
    for grids in batches {
        let r = recon_batch(
            &models.e,
            &models.d,
            &models.t,
            dims,
            grids,
            Masks::Select(ratio),
            &[Role::Encoder, Role::Decoder],
        )?;
        let e_pre = models.e.clone();
        let d_pre = models.d.clone();
        apply(cfg, &mut models.e, r.grad_e.as_ref().expect("requested"), &mut opt.e, lr)?;
        apply(cfg, &mut models.d, r.grad_d.as_ref().expect("requested"), &mut opt.d, lr)?;
        ctx = Some(Stage1Ctx {
            grids: grids.clone(),
            selections: r.selections,
            e_pre,
            d_pre,
            lr,
            loss: r.loss,
        });
    }
    ctx.ok_or_else(|| Error::config("stage 1 needs at least one batch"))
}

/// Head training on the frozen encoder, every patch visible.
pub fn stage2_update(
    models: &mut Models,
    opt: &mut Optims,
    dims: &ModelDims,
    batches: &[LabeledBatch],
    lr: f64,
    cfg: &MloConfig,
) -> Result<Stage2Ctx> {
    let mut ctx = None;
    for batch in batches {
        let r = cls_batch(&models.e, &models.c, dims, batch, &[Role::Head])?;
        let c_pre = models.c.clone();
        apply(cfg, &mut models.c, r.grad_c.as_ref().expect("requested"), &mut opt.c, lr)?;
        ctx = Some(Stage2Ctx {
            batch: batch.clone(),
            c_pre,
            lr,
            loss: r.loss,
        });
    }
    ctx.ok_or_else(|| Error::config("stage 2 needs at least one batch"))
}

/// Fault injection for oracle self-tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Hooks {
    pub flip_c_path_sign: bool,
}

#[derive(Clone, Debug)]
pub struct HypergradReport {
    pub grad_t: GradMap,
    /// Always zero: the validation loss does not read T.
    pub direct_term: GradMap,
    /// Contribution of `∂L_val/∂E′` through the last encoder step.
    pub e_path_term: GradMap,
    /// Contribution of `∂L_val/∂C′` through the last head step and then the
    /// last encoder step.
    pub c_path_term: GradMap,
    /// ε of the finite difference along `∂L_val/∂E′`.
    pub fda_eps_used: f64,
    /// ε of the finite difference over C along `∂L_val/∂C′`.
    pub fda_eps_c_pullback: f64,
    /// ε of the finite difference over E along the pulled-back C cotangent.
    pub fda_eps_c_path: f64,
    pub val_loss: f64,
    pub val_correct: usize,
    pub val_count: usize,
}

/// `−η · ∂/∂E ⟨∇_T L_rec(E, D, T), dir⟩`, on the retained batch and masks.
fn e_pullback(
    models: &Models,
    dims: &ModelDims,
    s1: &Stage1Ctx,
    point: FdaPoint,
    dir: &GradMap,
    scale: f64,
    cfg: &MloConfig,
) -> Result<(GradMap, f64)> {
    let (e, d) = match point {
        FdaPoint::PostUpdate => (&models.e, &models.d),
        FdaPoint::PreUpdate => (&s1.e_pre, &s1.d_pre),
    };
    let grad_t = |e_pert: &ParamSet| {
        let r = recon_batch(
            e_pert,
            d,
            &models.t,
            dims,
            &s1.grids,
            Masks::Fixed(&s1.selections),
            &[Role::Masker],
        )?;
        Ok(r.grad_t.expect("requested"))
    };
    let f = fda_jvp(grad_t, e, dir, cfg.fda_eps_scale, &models.t)?;
    Ok((f.jvp.scaled(-scale), f.eps))
}

/// Hypergradient of the validation loss with respect to the masking network.
pub fn stage3_hypergrad(
    models: &Models,
    dims: &ModelDims,
    val: &LabeledBatch,
    s1: Option<&Stage1Ctx>,
    s2: Option<&Stage2Ctx>,
    cfg: &MloConfig,
    hooks: Hooks,
) -> Result<HypergradReport> {
    let s1 = s1.ok_or(Error::MissingContext("stage 1"))?;
    let s2 = s2.ok_or(Error::MissingContext("stage 2"))?;
    let v = cls_batch(&models.e, &models.c, dims, val, &[Role::Encoder, Role::Head])?;
    let v_e = v.grad_e.expect("requested");
    let w_c = v.grad_c.expect("requested");

    // u = (∂C′/∂E′)ᵀ w_C with C′ = C − η_C ∇_C L_tr(E′, C)
    let grad_e_tr = |c_pert: &ParamSet| {
        let r = cls_batch(&models.e, c_pert, dims, &s2.batch, &[Role::Encoder])?;
        Ok(r.grad_e.expect("requested"))
    };
    let pull = fda_jvp(grad_e_tr, &s2.c_pre, &w_c, cfg.fda_eps_scale, &models.e)?;
    let sign = if hooks.flip_c_path_sign { 1.0 } else { -1.0 };
    let u = pull.jvp.scaled(sign * s2.lr);

    let (e_path_term, eps_e) = e_pullback(models, dims, s1, cfg.fda_point, &v_e, s1.lr, cfg)?;
    let (c_path_term, eps_c) = e_pullback(models, dims, s1, cfg.fda_point, &u, s1.lr, cfg)?;
    let direct_term = GradMap::zeros_like(&models.t);
    let mut grad_t = direct_term.clone();
    grad_t.axpy(1.0, &e_path_term);
    grad_t.axpy(1.0, &c_path_term);
    Ok(HypergradReport {
        grad_t,
        direct_term,
        e_path_term,
        c_path_term,
        fda_eps_used: eps_e,
        fda_eps_c_pullback: pull.eps,
        fda_eps_c_path: eps_c,
        val_loss: v.loss,
        val_correct: v.correct,
        val_count: v.count,
    })
}

/// What the BLO upper level needs from the last joint lower-level step.
#[derive(Clone, Debug)]
pub struct BloCtx {
    pub stage1: Stage1Ctx,
    pub gamma: f64,
    pub cls_loss: f64,
}

/// Joint update of E, D and C on `L_cls + γ·L_rec`, one step per pair of
/// batches. `γ = 0` is allowed here and reduces to supervised training.
#[allow(clippy::too_many_arguments)]
pub fn blo_lower_update(
    models: &mut Models,
    opt: &mut Optims,
    dims: &ModelDims,
    u_batches: &[Vec<PatchGrid>],
    tr_batches: &[LabeledBatch],
    ratio: f64,
    gamma: f64,
    (lr_e, lr_c): (f64, f64),
    cfg: &MloConfig,
) -> Result<BloCtx> {
    if !(gamma >= 0.0) {
        return Err(Error::config(format!("gamma must be >= 0, got {gamma}")));
    }
    if u_batches.len() != tr_batches.len() {
        return Err(Error::shape("blo_lower_update", &[u_batches.len()], &[tr_batches.len()]));
    }
    let mut ctx = None;
    for (grids, batch) in u_batches.iter().zip(tr_batches) {
        let rec = recon_batch(
            &models.e,
            &models.d,
            &models.t,
            dims,
            grids,
            Masks::Select(ratio),
            &[Role::Encoder, Role::Decoder],
        )?;
        let cls = cls_batch(&models.e, &models.c, dims, batch, &[Role::Encoder, Role::Head])?;
        let mut g_e = cls.grad_e.expect("requested");
        g_e.axpy(gamma, rec.grad_e.as_ref().expect("requested"));
        let g_d = rec.grad_d.expect("requested").scaled(gamma);
        let e_pre = models.e.clone();
        let d_pre = models.d.clone();
        apply(cfg, &mut models.e, &g_e, &mut opt.e, lr_e)?;
        apply(cfg, &mut models.d, &g_d, &mut opt.d, lr_e)?;
        apply(cfg, &mut models.c, cls.grad_c.as_ref().expect("requested"), &mut opt.c, lr_c)?;
        ctx = Some(BloCtx {
            stage1: Stage1Ctx {
                grids: grids.clone(),
                selections: rec.selections,
                e_pre,
                d_pre,
                lr: lr_e,
                loss: rec.loss,
            },
            gamma,
            cls_loss: cls.loss,
        });
    }
    ctx.ok_or_else(|| Error::config("BLO lower level needs at least one batch"))
}

/// BLO upper level: only the encoder path exists (C′ does not depend on T),
/// scaled by γ.
pub fn blo_hypergrad(
    models: &Models,
    dims: &ModelDims,
    val: &LabeledBatch,
    ctx: Option<&BloCtx>,
    cfg: &MloConfig,
) -> Result<HypergradReport> {
    let ctx = ctx.ok_or(Error::MissingContext("BLO lower level"))?;
    let v = cls_batch(&models.e, &models.c, dims, val, &[Role::Encoder])?;
    let v_e = v.grad_e.expect("requested");
    let (e_path_term, eps) = e_pullback(
        models,
        dims,
        &ctx.stage1,
        cfg.fda_point,
        &v_e,
        ctx.stage1.lr * ctx.gamma,
        cfg,
    )?;
    let direct_term = GradMap::zeros_like(&models.t);
    let c_path_term = GradMap::zeros_like(&models.t);
    let mut grad_t = direct_term.clone();
    grad_t.axpy(1.0, &e_path_term);
    grad_t.axpy(1.0, &c_path_term);
    Ok(HypergradReport {
        grad_t,
        direct_term,
        e_path_term,
        c_path_term,
        fda_eps_used: eps,
        fda_eps_c_pullback: 0.0,
        fda_eps_c_path: 0.0,
        val_loss: v.loss,
        val_correct: v.correct,
        val_count: v.count,
    })
}

/// Masking-network update from a hypergradient report.
pub fn update_masker(
    models: &mut Models,
    opt: &mut Optims,
    report: &HypergradReport,
    lr: f64,
    cfg: &MloConfig,
) -> Result<()> {
    apply(cfg, &mut models.t, &report.grad_t, &mut opt.t, lr)
}
