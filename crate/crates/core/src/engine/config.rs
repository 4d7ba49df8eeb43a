use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::masking::RatioSchedule;
use crate::optim::AdamW;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Three levels: pretraining, head training, masking-network update.
    Mlo,
    /// Pretraining and head training merged into one weighted lower level.
    Blo,
}

/// Where the encoder is perturbed when differentiating the reconstruction
/// gradient of the masking network along the encoder cotangent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdaPoint {
    /// Around the encoder after the last Stage-I step.
    PostUpdate,
    /// Around the encoder the last Stage-I step started from.
    PreUpdate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MloConfig {
    pub lr_e: f64,
    pub lr_c: f64,
    pub lr_t: f64,
    /// Floor of the cosine schedule, shared by all three learning rates.
    pub min_lr: f64,
    pub unroll_e: usize,
    pub unroll_c: usize,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub ratio_schedule: RatioSchedule,
    pub fda_eps_scale: f64,
    pub fda_point: FdaPoint,
    /// The masking network is updated on outer steps divisible by this.
    /// `None` freezes it.
    pub t_update_every: Option<u64>,
    pub mode: Mode,
    pub gamma: f64,
    pub total_epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Plain SGD instead of AdamW for every inner and outer update.
    pub oracle_mode: bool,
    pub augment: AugmentPolicy,
}

impl Default for MloConfig {
    fn default() -> Self {
        MloConfig {
            lr_e: 1e-3,
            lr_c: 3e-2,
            lr_t: 1e-3,
            min_lr: 0.0,
            unroll_e: 2,
            unroll_c: 1,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            ratio_schedule: RatioSchedule::Fixed(0.75),
            fda_eps_scale: 0.01,
            fda_point: FdaPoint::PreUpdate,
            t_update_every: Some(1),
            mode: Mode::Mlo,
            gamma: 1.0,
            total_epochs: 20,
            batch_size: 32,
            seed: 0,
            oracle_mode: false,
            augment: AugmentPolicy::None,
        }
    }
}

impl MloConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::config(format!("{field}: {why}")));
        for (name, lr) in [("lr_e", self.lr_e), ("lr_c", self.lr_c), ("lr_t", self.lr_t)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(name, "learning rates must be positive and finite");
            }
        }
        if !(self.min_lr >= 0.0 && self.min_lr.is_finite()) {
            return bad("min_lr", "must be finite and >= 0");
        }
        if self.unroll_e == 0 || self.unroll_c == 0 {
            return bad("unroll_e/unroll_c", "must be at least 1");
        }
        let beta_ok = |b: f64| b > 0.0 && b < 1.0;
        if !beta_ok(self.betas.0) || !beta_ok(self.betas.1) {
            return bad("betas", "both must lie in (0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be finite and >= 0");
        }
        self.ratio_schedule.validate()?;
        if !(self.fda_eps_scale > 0.0 && self.fda_eps_scale.is_finite()) {
            return bad("fda_eps_scale", "must be positive and finite");
        }
        if self.t_update_every == Some(0) {
            return bad("t_update_every", "must be at least 1");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma", "must be finite and >= 0");
        }
        if self.mode == Mode::Blo && !(self.gamma > 0.0) {
            return bad("gamma", "BLO mode needs gamma > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        Ok(())
    }

    pub(crate) fn adamw(&self, lr: f64) -> AdamW {
        AdamW {
            lr,
            betas: self.betas,
            weight_decay: self.weight_decay,
        }
    }
}
