//! Files: run configs, checkpoints, dataset bundles, metrics logs, PGM
//! images and the output-directory lock.

mod bundle;
mod checkpoint;
mod config;
pub mod container;
mod lock;
mod metrics;
mod pgm;

pub use bundle::{bundle_from_bytes, bundle_to_bytes};
pub use checkpoint::Checkpoint;
pub use config::{DatasetSel, RunConfig};
pub use lock::{RunLock, LOCK_NAME};
pub use metrics::{format_row, MetricsWriter, HEADER};
pub use pgm::Pgm;
