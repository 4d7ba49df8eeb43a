//! Metrics log: CSV, one row per outer step, flushed as it is written.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::engine::MetricsRow;
use crate::error::Result;

pub const HEADER: &str =
    "step,epoch,recon_loss,train_cls_loss,val_cls_loss,val_accuracy,mask_ratio,lr_E,lr_C,lr_T,wallclock_ms";

pub fn format_row(r: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.step,
        r.epoch,
        r.recon_loss,
        r.train_cls_loss,
        r.val_cls_loss,
        r.val_accuracy,
        r.mask_ratio,
        r.lr_e,
        r.lr_c,
        r.lr_t,
        r.wallclock_ms
    )
}

pub struct MetricsWriter {
    file: File,
    /// Write 0 in the wallclock column so reruns are byte-identical.
    zero_wallclock: bool,
}

impl MetricsWriter {
    /// Creates (or truncates) `path` and writes the header.
    pub fn create(path: &Path, zero_wallclock: bool) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{HEADER}")?;
        file.flush()?;
        Ok(MetricsWriter { file, zero_wallclock })
    }

    /// Appends to an existing log, e.g. when resuming.
    pub fn append(path: &Path, zero_wallclock: bool) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(MetricsWriter { file, zero_wallclock })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        let mut row = row.clone();
        if self.zero_wallclock {
            row.wallclock_ms = 0;
        }
        writeln!(self.file, "{}", format_row(&row))?;
        self.file.flush()?;
        Ok(())
    }
}
