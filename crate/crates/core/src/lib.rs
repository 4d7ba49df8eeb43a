//! Masked-autoencoder pretraining in which a small masking network is trained
//! by hypergradients of a downstream validation loss.
//!
//! The crate is organised bottom-up: [`tape`] provides first-order reverse-mode
//! differentiation over [`tensor::Tensor`]s, [`nn`] builds the four models on top
//! of it, [`masking`] turns masking probabilities into a hard mask and a
//! weighted reconstruction loss, and [`engine`] runs the three-level training
//! loop. [`data`] and [`io`] handle datasets, configs, checkpoints and metrics.

pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod data;
pub mod engine;
pub mod io;
pub mod run;

pub use error::{Error, Result};
pub use params::{GradMap, ParamSet, Role};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
