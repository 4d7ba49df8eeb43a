//! A training run on disk: dataset construction, the output directory,
//! metrics, checkpoints and mask visualisations.
//!
//! Output directory layout:
//!
//! ```text
//! config.txt           effective configuration (seed override applied)
//! metrics.csv          one row per outer step
//! data.mlom            the synthetic bundle (synthetic runs only)
//! step_<n>.mlom        checkpoints at the configured cadence
//! final.mlom           checkpoint after the last step
//! run.lock             present while a run owns the directory
//! ```

use std::path::{Path, PathBuf};

use crate::data::{cifar10_read, synth_generate, DatasetBundle};
use crate::engine::{evaluate, masking_probs, Hooks, Prepared, TrainState, Trainer};
use crate::error::{Error, Result};
use crate::io::{bundle_to_bytes, Checkpoint, DatasetSel, MetricsWriter, Pgm, RunConfig, RunLock};
use crate::masking::select_mask;
use crate::nn::{ModelDims, PatchGrid};
use crate::params::ParamSet;

pub const SEED_ENV: &str = "MLOMAE_SEED";

/// Reads the seed override from the environment, if set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Builds the configured dataset; the split (and synthetic draw) use the run seed.
pub fn load_dataset(rc: &RunConfig) -> Result<DatasetBundle> {
    match &rc.dataset {
        DatasetSel::Synthetic => synth_generate(&rc.synth_spec(), rc.train.seed),
        DatasetSel::Cifar10 { path, limit } => {
            DatasetBundle::from_labeled(cifar10_read(path, *limit)?, rc.train.seed)
        }
    }
}

/// Fails unless every image matches the model's channels and side.
pub fn check_dims(bundle: &DatasetBundle, dims: &ModelDims) -> Result<()> {
    let imgs = bundle
        .d_u
        .iter()
        .chain(bundle.d_tr.iter().chain(&bundle.d_val).map(|x| &x.image));
    for img in imgs {
        if img.channels != dims.channels || img.side != dims.image_side {
            return Err(Error::config(format!(
                "dataset images are {}×{}×{} but the model expects {}×{}×{}",
                img.channels, img.side, img.side, dims.channels, dims.image_side, dims.image_side
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Zero the wallclock column so reruns produce identical metrics files.
    pub strict: bool,
    /// Continue from this checkpoint, appending to the metrics log.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed outer steps (the schedule still spans
    /// the full configured run).
    pub stop_after: Option<u64>,
    pub hooks: Hooks,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: u64,
    pub finished: bool,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub final_checkpoint: PathBuf,
}

pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.csv")
}

pub fn final_checkpoint_path(out: &Path) -> PathBuf {
    out.join("final.mlom")
}

pub fn run_training(rc: &RunConfig, opts: &RunOptions) -> Result<RunSummary> {
    rc.validate()?;
    let bundle = load_dataset(rc)?;
    check_dims(&bundle, &rc.dims)?;
    let data = Prepared::new(&bundle, &rc.dims)?;

    let out = &rc.out_dir;
    std::fs::create_dir_all(out)?;
    let _lock = RunLock::acquire(out)?;
    std::fs::write(out.join("config.txt"), rc.serialize())?;
    if rc.dataset == DatasetSel::Synthetic {
        std::fs::write(out.join("data.mlom"), bundle_to_bytes(&bundle)?)?;
    }

    let (state, mut metrics) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.dims != rc.dims || ck.seed != rc.train.seed {
                return Err(Error::config(format!(
                    "checkpoint {} was written by a run with different dims or seed",
                    path.display()
                )));
            }
            let m = metrics_path(out);
            let w = if m.exists() {
                MetricsWriter::append(&m, opts.strict)?
            } else {
                MetricsWriter::create(&m, opts.strict)?
            };
            (ck.state, w)
        }
        None => (
            TrainState::init(&rc.dims, rc.train.seed),
            MetricsWriter::create(&metrics_path(out), opts.strict)?,
        ),
    };
    let mut trainer = Trainer::new(rc.train.clone(), &data, state)?.with_hooks(opts.hooks);
    let save = |state: &TrainState, path: &Path| {
        Checkpoint {
            seed: rc.train.seed,
            dims: rc.dims.clone(),
            state: state.clone(),
        }
        .save(path)
    };
    while !trainer.is_done() && opts.stop_after.is_none_or(|n| trainer.state().step < n) {
        let row = trainer.step()?;
        metrics.write(&row)?;
        if rc.checkpoint_every > 0 && row.step % rc.checkpoint_every == 0 {
            save(trainer.state(), &out.join(format!("step_{}.mlom", row.step)))?;
        }
    }
    let finished = trainer.is_done();
    let state = trainer.into_state();
    let final_checkpoint = final_checkpoint_path(out);
    save(&state, &final_checkpoint)?;
    let (val_loss, val_accuracy) = evaluate(&state.models.e, &state.models.c, &rc.dims, &data.val)?;
    Ok(RunSummary {
        steps: state.step,
        finished,
        val_loss,
        val_accuracy,
        final_checkpoint,
    })
}

/// The masking-probability map (`round(255·σ)` per patch block) and the
/// mask overlay at ratio `r` (masked blocks 0, visible blocks 255) of one
/// image, both `image_side` square.
pub fn mask_maps(t: &ParamSet, dims: &ModelDims, grid: &PatchGrid, r: f64) -> Result<(Pgm, Pgm)> {
    let probs = masking_probs(t, dims, grid)?;
    let sel = select_mask(&probs, r)?;
    let side = dims.image_side;
    let (ps, gs) = (dims.patch_size, dims.grid_side());
    let block = |value: &dyn Fn(usize) -> u8| {
        let mut px = vec![0u8; side * side];
        for (i, v) in px.iter_mut().enumerate() {
            let (y, x) = (i / side, i % side);
            *v = value((y / ps) * gs + x / ps);
        }
        Pgm {
            width: side,
            height: side,
            pixels: px,
        }
    };
    let map = block(&|p| (255.0 * probs.data()[p]).round() as u8);
    let overlay = block(&|p| if sel.masked_idx.contains(&p) { 0 } else { 255 });
    Ok((map, overlay))
}

/// Writes `sigma_<i>.pgm` and `mask_<i>.pgm` for each grid and returns the paths.
pub fn write_mask_maps(t: &ParamSet, dims: &ModelDims, grids: &[PatchGrid], r: f64, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut paths = Vec::with_capacity(2 * grids.len());
    for (i, g) in grids.iter().enumerate() {
        let (map, overlay) = mask_maps(t, dims, g, r)?;
        for (name, img) in [("sigma", map), ("mask", overlay)] {
            let p = out.join(format!("{name}_{i:03}.pgm"));
            std::fs::write(&p, img.to_bytes())?;
            paths.push(p);
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::oracle::toy_dims;
    use crate::engine::Models;
    use crate::masking::visible_count;
    use crate::tensor::Tensor;

    fn tiny_config(out: &Path) -> RunConfig {
        let mut rc = RunConfig::default();
        rc.dims = toy_dims();
        rc.synth_informative = vec![0, 3];
        rc.synth_per_class = 10;
        rc.train.batch_size = 4;
        rc.train.total_epochs = 2;
        rc.out_dir = out.to_path_buf();
        rc
    }

    #[test]
    fn zero_epochs_write_header_and_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut rc = tiny_config(dir.path());
        rc.train.total_epochs = 0;
        let s = run_training(&rc, &RunOptions::default()).unwrap();
        assert_eq!(s.steps, 0);
        let text = std::fs::read_to_string(metrics_path(dir.path())).unwrap();
        assert_eq!(text, format!("{}\n", crate::io::HEADER));
        let ck = Checkpoint::load(&s.final_checkpoint).unwrap();
        assert_eq!(ck.state, TrainState::init(&rc.dims, rc.train.seed));
        assert!(!dir.path().join(crate::io::LOCK_NAME).exists());
    }

    #[test]
    fn strict_reruns_and_resume_are_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let strict = RunOptions {
            strict: true,
            ..RunOptions::default()
        };
        run_training(&tiny_config(a.path()), &strict).unwrap();
        run_training(&tiny_config(b.path()), &strict).unwrap();
        let read = |d: &Path| std::fs::read(metrics_path(d)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));

        let c = tempfile::tempdir().unwrap();
        let rc = tiny_config(c.path());
        let half = run_training(
            &rc,
            &RunOptions {
                stop_after: Some(2),
                ..strict.clone()
            },
        )
        .unwrap();
        assert!(!half.finished);
        let resumed = run_training(
            &rc,
            &RunOptions {
                resume: Some(half.final_checkpoint),
                ..strict
            },
        )
        .unwrap();
        assert!(resumed.finished);
        assert_eq!(read(a.path()), read(c.path()));
        assert_eq!(
            std::fs::read(final_checkpoint_path(a.path())).unwrap(),
            std::fs::read(final_checkpoint_path(c.path())).unwrap()
        );
    }

    #[test]
    fn checkpoint_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let mut rc = tiny_config(dir.path());
        rc.checkpoint_every = 2;
        run_training(&rc, &RunOptions::default()).unwrap();
        assert!(dir.path().join("step_2.mlom").exists());
        assert!(dir.path().join("step_4.mlom").exists());
        assert!(!dir.path().join("step_1.mlom").exists());
    }

    #[test]
    fn held_lock_refuses_a_second_run() {
        let dir = tempfile::tempdir().unwrap();
        let _held = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(
            run_training(&tiny_config(dir.path()), &RunOptions::default()),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn overlay_has_the_masked_count_of_dark_blocks() {
        let dims = ModelDims::default();
        let m = Models::init(&dims, 0);
        let grid = PatchGrid::new(Tensor::full(&[dims.num_patches(), dims.patch_pixels()], 0.3)).unwrap();
        for r in [0.1, 0.75, 0.9] {
            let (map, overlay) = mask_maps(&m.t, &dims, &grid, r).unwrap();
            let block = dims.patch_size * dims.patch_size;
            let dark = overlay.pixels.iter().filter(|&&p| p == 0).count() / block;
            assert_eq!(dark, dims.num_patches() - visible_count(dims.num_patches(), r));
            assert_eq!(Pgm::parse(&map.to_bytes()).unwrap(), map);
        }
    }

    #[test]
    fn uniform_half_probability_is_mid_gray() {
        let dims = ModelDims::default();
        let mut t = Models::init(&dims, 0).t;
        for (name, x) in t.names().to_vec().into_iter().zip(t.tensors_mut()) {
            if name.starts_with("fc2") {
                x.data_mut().fill(0.0);
            }
        }
        let grid = PatchGrid::new(Tensor::full(&[dims.num_patches(), dims.patch_pixels()], 0.7)).unwrap();
        let (map, _) = mask_maps(&t, &dims, &grid, 0.75).unwrap();
        assert!(map.pixels.iter().all(|&p| p == 128));
    }
}
