//! Command-line entry point.
//!
//! Exit codes: 0 ok, 1 configuration error, 2 I/O error, 3 oracle or
//! tolerance failure, 4 numeric abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mlomae::data::{synth_generate, DatasetBundle, SynthSpec};
use mlomae::engine::oracle::{fda_vs_dense, pipeline_oracle, scalar_bilevel_toy};
use mlomae::engine::{linear_probe, FdaPoint, Hooks, Prepared, ProbeConfig};
use mlomae::gradcheck::{op_suite, OP_TOLERANCE};
use mlomae::io::{bundle_from_bytes, Checkpoint, DatasetSel, RunConfig};
use mlomae::nn::{patchify, ModelDims};
use mlomae::run::{check_dims, load_dataset, run_training, seed_override, write_mask_maps, RunOptions};
use mlomae::Error;

#[derive(Parser)]
#[command(name = "mlomae", version, about = "Masked-autoencoder pretraining with a learned masking network")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Write 0 in the wallclock column so reruns give identical metrics.
        #[arg(long)]
        strict: bool,
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many outer steps without shortening the schedule.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Run the gradient and hypergradient oracles.
    Gradcheck {
        #[arg(long, hide = true)]
        flip_c_path_sign: bool,
    },
    /// Linear-probe a checkpoint's encoder.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        /// `synthetic`, `cifar10:<path>` or `bundle:<path>`.
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = ProbeConfig::default().steps)]
        steps: usize,
    },
    /// Write masking-probability maps and mask overlays as PGM files.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0.75)]
        ratio: f64,
    },
}

enum Failure {
    Err(Error),
    Tolerance(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Err(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format { .. } | Error::Decode { .. } => 2,
        Error::NonFinite { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Tolerance(failed)) => {
            eprintln!("tolerance exceeded: {}", failed.join(", "));
            ExitCode::from(3)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Train {
            config,
            strict,
            resume,
            stop_after,
        } => train(&config, strict, resume, stop_after),
        Cmd::Gradcheck { flip_c_path_sign } => gradcheck(Hooks { flip_c_path_sign }),
        Cmd::Probe { ckpt, data, steps } => probe(&ckpt, &data, steps),
        Cmd::Visualize {
            ckpt,
            out,
            data,
            count,
            ratio,
        } => visualize(&ckpt, &out, &data, count, ratio),
    }
}

fn train(config: &Path, strict: bool, resume: Option<PathBuf>, stop_after: Option<u64>) -> Result<(), Failure> {
    let text = std::fs::read_to_string(config).map_err(Error::from)?;
    let mut rc = RunConfig::parse(&text).map_err(|e| match e {
        Error::Parse { line, key, reason } => {
            Error::Config(format!("{}:{line}: {key}: {reason}", config.display()))
        }
        other => other,
    })?;
    if let Some(seed) = seed_override()? {
        rc.train.seed = seed;
    }
    let opts = RunOptions {
        strict,
        resume,
        stop_after,
        ..RunOptions::default()
    };
    let s = run_training(&rc, &opts)?;
    println!(
        "steps {} val_loss {:.6} val_accuracy {:.4} checkpoint {}",
        s.steps,
        s.val_loss,
        s.val_accuracy,
        s.final_checkpoint.display()
    );
    Ok(())
}

fn gradcheck(hooks: Hooks) -> Result<(), Failure> {
    let mut failed = Vec::new();
    for c in op_suite(0)? {
        let ok = c.passes();
        println!("op {:<22} max_rel_error {:.3e} {}", c.op, c.report.max_rel_error, verdict(ok));
        if !ok {
            failed.push(format!("op {}", c.op));
        }
    }
    for t in [-0.5, 0.3, 1.0] {
        let r = scalar_bilevel_toy(t)?;
        let ok = (r.hypergradient - r.closed_form).abs() <= 1e-6;
        println!(
            "bilevel_toy t={t} hypergradient {:.9} closed_form {} {}",
            r.hypergradient,
            r.closed_form,
            verdict(ok)
        );
        if !ok {
            failed.push(format!("bilevel toy t={t}"));
        }
    }
    let j = fda_vs_dense(0)?;
    let ok = j.rel_error <= 1e-3;
    println!("fda_vs_dense params {} rel_error {:.3e} {}", j.parameters, j.rel_error, verdict(ok));
    if !ok {
        failed.push("fda vs dense".into());
    }
    for seed in 0..3 {
        let p = pipeline_oracle(seed, FdaPoint::PreUpdate, hooks)?;
        let ok = p.passes();
        println!(
            "pipeline_oracle seed {seed} cosine {:.6} rel_l2 {:.3e} {}",
            p.cosine,
            p.rel_l2,
            verdict(ok)
        );
        if !ok {
            failed.push(format!("pipeline oracle seed {seed}"));
        }
    }
    println!("op tolerance {OP_TOLERANCE:e}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Tolerance(failed))
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

/// Resolves a data selector against the checkpoint's dims.
fn dataset(sel: &str, dims: &ModelDims, seed: u64) -> Result<DatasetBundle, Error> {
    let bundle = if sel == "synthetic" {
        let spec = SynthSpec {
            side: dims.image_side,
            channels: dims.channels,
            patch_size: dims.patch_size,
            num_classes: dims.num_classes,
            ..SynthSpec::default()
        };
        synth_generate(&spec, seed)?
    } else if let Some(path) = sel.strip_prefix("bundle:") {
        bundle_from_bytes(&std::fs::read(path)?)?
    } else if let Some(path) = sel.strip_prefix("cifar10:") {
        let mut rc = RunConfig::default();
        rc.train.seed = seed;
        rc.dataset = DatasetSel::Cifar10 {
            path: path.into(),
            limit: None,
        };
        load_dataset(&rc)?
    } else {
        return Err(Error::Config(format!(
            "unknown data selector {sel:?}; expected synthetic, cifar10:<path> or bundle:<path>"
        )));
    };
    check_dims(&bundle, dims)?;
    Ok(bundle)
}

fn probe(ckpt: &Path, sel: &str, steps: usize) -> Result<(), Failure> {
    let ck = Checkpoint::load(ckpt)?;
    let seed = seed_override()?.unwrap_or(ck.seed);
    let bundle = dataset(sel, &ck.dims, seed)?;
    let data = Prepared::new(&bundle, &ck.dims)?;
    let cfg = ProbeConfig {
        steps,
        seed,
        ..ProbeConfig::default()
    };
    let r = linear_probe(&ck.state.models.e, &ck.dims, &data.train, &data.val, &cfg)?;
    println!(
        "probe train_accuracy {:.4} val_accuracy {:.4} val_loss {:.6}",
        r.train_accuracy, r.val_accuracy, r.val_loss
    );
    Ok(())
}

fn visualize(ckpt: &Path, out: &Path, sel: &str, count: usize, ratio: f64) -> Result<(), Failure> {
    let ck = Checkpoint::load(ckpt)?;
    let seed = seed_override()?.unwrap_or(ck.seed);
    let bundle = dataset(sel, &ck.dims, seed)?;
    let grids = bundle
        .d_val
        .iter()
        .take(count)
        .map(|x| patchify(&x.image, &ck.dims))
        .collect::<Result<Vec<_>, _>>()?;
    let paths = write_mask_maps(&ck.state.models.t, &ck.dims, &grids, ratio, out)?;
    println!("wrote {} files to {}", paths.len(), out.display());
    Ok(())
}
