//! The outer training loop.
//!
//! One epoch is one pass of Stage I over `d_u`: each outer step consumes
//! `unroll_e` batches from the unlabeled stream, so an epoch has
//! `ceil(ceil(|d_u| / batch_size) / unroll_e)` outer steps. The labeled
//! train and validation streams cycle independently. Every batch is a pure
//! function of `(seed, stream, cursor)`, so the three cursors and the step
//! counter are all the loop state besides parameters and optimizer moments.

use std::time::Instant;

use crate::data::{augment, batches_on, AugmentPolicy, DatasetBundle, Image};
use crate::engine::config::{MloConfig, Mode};
use crate::engine::losses::{evaluate, LabeledBatch, Models};
use crate::engine::stages::{
    blo_hypergrad, blo_lower_update, stage1_update, stage2_update, stage3_hypergrad,
    update_masker, Hooks, Optims,
};
use crate::error::{Error, Result};
use crate::masking::mask_ratio_at;
use crate::nn::{patchify, ModelDims, PatchGrid};
use crate::optim::cosine_lr;
use crate::rng::{rng_for, stream};

/// A dataset bundle patchified once for a given model.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dims: ModelDims,
    u_images: Vec<Image>,
    u_grids: Vec<PatchGrid>,
    tr_images: Vec<Image>,
    pub train: LabeledBatch,
    pub val: LabeledBatch,
}

impl Prepared {
    pub fn new(bundle: &DatasetBundle, dims: &ModelDims) -> Result<Self> {
        dims.validate()?;
        if bundle.d_u.is_empty() || bundle.d_tr.is_empty() || bundle.d_val.is_empty() {
            return Err(Error::config("every dataset split must be nonempty"));
        }
        let grids = |imgs: &mut dyn Iterator<Item = &Image>| -> Result<Vec<PatchGrid>> {
            imgs.map(|i| patchify(i, dims)).collect()
        };
        let labeled = |items: &[crate::data::LabeledImage]| -> Result<LabeledBatch> {
            for x in items {
                if x.label >= dims.num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: x.label,
                        classes: dims.num_classes,
                    });
                }
            }
            Ok(LabeledBatch {
                grids: grids(&mut items.iter().map(|x| &x.image))?,
                labels: items.iter().map(|x| x.label).collect(),
            })
        };
        Ok(Prepared {
            dims: dims.clone(),
            u_grids: grids(&mut bundle.d_u.iter())?,
            u_images: bundle.d_u.clone(),
            tr_images: bundle.d_tr.iter().map(|x| x.image.clone()).collect(),
            train: labeled(&bundle.d_tr)?,
            val: labeled(&bundle.d_val)?,
        })
    }
}

/// Number of batches drawn so far from each data stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cursors {
    pub u: u64,
    pub tr: u64,
    pub val: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub models: Models,
    pub opt: Optims,
    /// Completed outer steps.
    pub step: u64,
    pub cursors: Cursors,
}

impl TrainState {
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let models = Models::init(dims, seed);
        TrainState {
            opt: Optims::new(&models),
            models,
            step: 0,
            cursors: Cursors::default(),
        }
    }
}

/// One row of the metrics log. Validation columns are measured on the
/// validation batch of that step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub recon_loss: f64,
    pub train_cls_loss: f64,
    pub val_cls_loss: f64,
    pub val_accuracy: f64,
    pub mask_ratio: f64,
    pub lr_e: f64,
    pub lr_c: f64,
    pub lr_t: f64,
    pub wallclock_ms: u64,
}

fn check_finite(step: u64, quantity: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, quantity })
    }
}

pub struct Trainer<'d> {
    cfg: MloConfig,
    data: &'d Prepared,
    state: TrainState,
    hooks: Hooks,
    started: Instant,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: MloConfig, data: &'d Prepared, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            cfg,
            data,
            state,
            hooks: Hooks::default(),
            started: Instant::now(),
        })
    }

    pub fn with_hooks(mut self, hooks: Hooks) -> Self {
        self.hooks = hooks;
        self
    }

    pub fn config(&self) -> &MloConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    fn batches_per_pass(&self, n: usize) -> u64 {
        n.div_ceil(self.cfg.batch_size) as u64
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.batches_per_pass(self.data.u_grids.len())
            .div_ceil(self.cfg.unroll_e as u64)
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.total_epochs * self.steps_per_epoch()
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// Indices of batch number `cursor` of a stream over `n` items.
    fn indices(&self, family: u64, n: usize, cursor: u64) -> Result<Vec<usize>> {
        let per_pass = self.batches_per_pass(n);
        let epoch = cursor / per_pass;
        let mut all = batches_on(family, n, self.cfg.batch_size, self.cfg.seed, epoch)?;
        Ok(all.swap_remove((cursor % per_pass) as usize))
    }

    fn grids_for(
        &self,
        idx: &[usize],
        images: &[Image],
        grids: &[PatchGrid],
        aug_stream: u64,
    ) -> Result<Vec<PatchGrid>> {
        if self.cfg.augment == AugmentPolicy::None {
            return Ok(idx.iter().map(|&i| grids[i].clone()).collect());
        }
        let mut rng = rng_for(self.cfg.seed, stream::AUGMENT + (aug_stream & 0xffff_ffff));
        idx.iter()
            .map(|&i| patchify(&augment(&images[i], &mut rng, self.cfg.augment), &self.data.dims))
            .collect()
    }

    fn next_u(&mut self) -> Result<Vec<PatchGrid>> {
        let c = self.state.cursors.u;
        let idx = self.indices(stream::BATCH_U, self.data.u_grids.len(), c)?;
        self.state.cursors.u += 1;
        self.grids_for(&idx, &self.data.u_images, &self.data.u_grids, 2 * c)
    }

    fn next_tr(&mut self) -> Result<LabeledBatch> {
        let c = self.state.cursors.tr;
        let idx = self.indices(stream::BATCH_TR, self.data.train.len(), c)?;
        self.state.cursors.tr += 1;
        Ok(LabeledBatch {
            grids: self.grids_for(&idx, &self.data.tr_images, &self.data.train.grids, 2 * c + 1)?,
            labels: idx.iter().map(|&i| self.data.train.labels[i]).collect(),
        })
    }

    fn next_val(&mut self) -> Result<LabeledBatch> {
        let c = self.state.cursors.val;
        let idx = self.indices(stream::BATCH_VAL, self.data.val.len(), c)?;
        self.state.cursors.val += 1;
        Ok(LabeledBatch {
            grids: idx.iter().map(|&i| self.data.val.grids[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.data.val.labels[i]).collect(),
        })
    }

    /// Runs one outer step and returns its metrics row.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let s = self.state.step;
        let total = self.total_steps();
        let cfg = self.cfg.clone();
        let dims = &self.data.dims;
        let lr = |base: f64| cosine_lr(s, total, base, cfg.min_lr);
        let (lr_e, lr_c, lr_t) = (lr(cfg.lr_e), lr(cfg.lr_c), lr(cfg.lr_t));
        let ratio = mask_ratio_at(s, &cfg.ratio_schedule)?;
        let update_t = cfg.t_update_every.is_some_and(|k| s.is_multiple_of(k));

        let u: Vec<_> = (0..cfg.unroll_e).map(|_| self.next_u()).collect::<Result<_>>()?;
        let (recon_loss, train_cls_loss, val_cls_loss, val_accuracy) = match cfg.mode {
            Mode::Mlo => {
                let tr: Vec<_> = (0..cfg.unroll_c).map(|_| self.next_tr()).collect::<Result<_>>()?;
                let st = &mut self.state;
                let s1 = stage1_update(&mut st.models, &mut st.opt, dims, &u, ratio, lr_e, &cfg)?;
                check_finite(s + 1, "reconstruction loss", s1.loss)?;
                let s2 = stage2_update(&mut st.models, &mut st.opt, dims, &tr, lr_c, &cfg)?;
                check_finite(s + 1, "train classification loss", s2.loss)?;
                let val = self.next_val()?;
                let st = &mut self.state;
                let (vl, va) = if update_t {
                    let rep = stage3_hypergrad(&st.models, dims, &val, Some(&s1), Some(&s2), &cfg, self.hooks)?;
                    if !rep.grad_t.is_finite() {
                        return Err(Error::NonFinite {
                            step: s + 1,
                            quantity: "masking-network hypergradient",
                        });
                    }
                    update_masker(&mut st.models, &mut st.opt, &rep, lr_t, &cfg)?;
                    (rep.val_loss, rep.val_correct as f64 / rep.val_count as f64)
                } else {
                    evaluate(&st.models.e, &st.models.c, dims, &val)?
                };
                (s1.loss, s2.loss, vl, va)
            }
            Mode::Blo => {
                let tr: Vec<_> = (0..cfg.unroll_e).map(|_| self.next_tr()).collect::<Result<_>>()?;
                let st = &mut self.state;
                let ctx = blo_lower_update(
                    &mut st.models,
                    &mut st.opt,
                    dims,
                    &u,
                    &tr,
                    ratio,
                    cfg.gamma,
                    (lr_e, lr_c),
                    &cfg,
                )?;
                check_finite(s + 1, "reconstruction loss", ctx.stage1.loss)?;
                check_finite(s + 1, "train classification loss", ctx.cls_loss)?;
                let val = self.next_val()?;
                let st = &mut self.state;
                let (vl, va) = if update_t {
                    let rep = blo_hypergrad(&st.models, dims, &val, Some(&ctx), &cfg)?;
                    if !rep.grad_t.is_finite() {
                        return Err(Error::NonFinite {
                            step: s + 1,
                            quantity: "masking-network hypergradient",
                        });
                    }
                    update_masker(&mut st.models, &mut st.opt, &rep, lr_t, &cfg)?;
                    (rep.val_loss, rep.val_correct as f64 / rep.val_count as f64)
                } else {
                    evaluate(&st.models.e, &st.models.c, dims, &val)?
                };
                (ctx.stage1.loss, ctx.cls_loss, vl, va)
            }
        };
        check_finite(s + 1, "validation loss", val_cls_loss)?;
        if !self.state.models.is_finite() {
            return Err(Error::NonFinite {
                step: s + 1,
                quantity: "parameters",
            });
        }
        self.state.step += 1;
        Ok(MetricsRow {
            step: s + 1,
            epoch: s / self.steps_per_epoch().max(1),
            recon_loss,
            train_cls_loss,
            val_cls_loss,
            val_accuracy,
            mask_ratio: ratio,
            lr_e,
            lr_c,
            lr_t,
            wallclock_ms: self.started.elapsed().as_millis() as u64,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    pub history: Vec<MetricsRow>,
    /// Loss and accuracy of the final `(E, C)` on the whole validation split.
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Trains from initialisation for `cfg.total_epochs` epochs.
pub fn mlo_train(bundle: &DatasetBundle, dims: &ModelDims, cfg: &MloConfig) -> Result<TrainOutput> {
    let data = Prepared::new(bundle, dims)?;
    let mut trainer = Trainer::new(cfg.clone(), &data, TrainState::init(dims, cfg.seed))?;
    let mut history = Vec::new();
    while !trainer.is_done() {
        history.push(trainer.step()?);
    }
    let state = trainer.into_state();
    let (val_loss, val_accuracy) = evaluate(&state.models.e, &state.models.c, dims, &data.val)?;
    Ok(TrainOutput {
        state,
        history,
        val_loss,
        val_accuracy,
    })
}
