//! The three-level training loop: pretraining of the encoder/decoder, head
//! training on the frozen encoder, and the masking-network update from
//! finite-difference hypergradients of the validation loss.

mod config;
mod fda;
mod losses;
mod probe;
pub mod oracle;
mod stages;
mod train;

pub use config::{FdaPoint, MloConfig, Mode};
pub use fda::{fda_jvp, Fda};
pub use losses::{argmax, cls_batch, evaluate, masking_probs, recon_batch, subset_prob_gap, ClsEval, LabeledBatch, Masks, Models, ReconEval};
pub use stages::{
    blo_hypergrad, blo_lower_update, stage1_update, stage2_update, stage3_hypergrad,
    update_masker, BloCtx, Hooks, HypergradReport, Optims, Stage1Ctx, Stage2Ctx,
};
pub use train::{mlo_train, Cursors, MetricsRow, Prepared, TrainOutput, TrainState, Trainer};
pub use probe::{encode_features, linear_probe, ProbeConfig, ProbeReport};
