//! Run configuration files: one `key = value` per line, `#` starts a comment
//! line, blank lines are ignored. Keys are the field names of [`MloConfig`]
//! and [`ModelDims`] plus the run-level keys below. Missing keys take their
//! defaults; unknown and repeated keys are errors.
//!
//! Value syntax for the non-scalar keys:
//!
//! ```text
//! betas            = 0.9, 0.95
//! ratio_schedule   = fixed 0.75            | linear <start> <end> <steps>
//! fda_point        = pre                   | post
//! t_update_every   = 1                     | never
//! mode             = mlo                   | blo
//! augment          = none | flip           | flip_crop <pad>
//! dataset          = synthetic             | cifar10:<path>
//! cifar_limit      = all                   | <records>
//! synth_informative = 5, 6, 9, 10
//! ```

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{AugmentPolicy, SynthSpec};
use crate::engine::{FdaPoint, MloConfig, Mode};
use crate::error::{Error, Result};
use crate::masking::RatioSchedule;
use crate::nn::ModelDims;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSel {
    Synthetic,
    Cifar10 { path: PathBuf, limit: Option<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: MloConfig,
    pub dims: ModelDims,
    pub dataset: DatasetSel,
    /// Synthetic-task knobs not implied by `dims`.
    pub synth_informative: Vec<usize>,
    pub synth_amplitude: f64,
    pub synth_noise: f64,
    pub synth_per_class: usize,
    pub synth_class_fraction: f64,
    pub out_dir: PathBuf,
    /// Write a checkpoint every this many outer steps; 0 writes only the
    /// final one.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        RunConfig {
            train: MloConfig::default(),
            dims: ModelDims::default(),
            dataset: DatasetSel::Synthetic,
            synth_informative: s.informative,
            synth_amplitude: s.amplitude,
            synth_noise: s.noise,
            synth_per_class: s.per_class,
            synth_class_fraction: s.class_fraction,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
        }
    }
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|x| num(x.trim())).collect()
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn ratio_schedule(v: &str) -> Result<RatioSchedule, String> {
    let w: Vec<&str> = v.split_whitespace().collect();
    match w.as_slice() {
        ["fixed", r] => Ok(RatioSchedule::Fixed(num(r)?)),
        ["linear", a, b, n] => Ok(RatioSchedule::Linear {
            start: num(a)?,
            end: num(b)?,
            total_steps: num(n)?,
        }),
        _ => Err(format!("expected `fixed <r>` or `linear <start> <end> <steps>`, got {v:?}")),
    }
}

fn augment(v: &str) -> Result<AugmentPolicy, String> {
    let w: Vec<&str> = v.split_whitespace().collect();
    match w.as_slice() {
        ["none"] => Ok(AugmentPolicy::None),
        ["flip"] => Ok(AugmentPolicy::Flip),
        ["flip_crop", pad] => Ok(AugmentPolicy::FlipCrop { pad: num(pad)? }),
        _ => Err(format!("expected none, flip or `flip_crop <pad>`, got {v:?}")),
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let t = &mut self.train;
        let d = &mut self.dims;
        match key {
            "seed" => t.seed = num(v)?,
            "mode" => {
                t.mode = match v {
                    "mlo" => Mode::Mlo,
                    "blo" => Mode::Blo,
                    _ => return Err(format!("expected mlo or blo, got {v:?}")),
                }
            }
            "total_epochs" => t.total_epochs = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "lr_e" => t.lr_e = num(v)?,
            "lr_c" => t.lr_c = num(v)?,
            "lr_t" => t.lr_t = num(v)?,
            "min_lr" => t.min_lr = num(v)?,
            "unroll_e" => t.unroll_e = num(v)?,
            "unroll_c" => t.unroll_c = num(v)?,
            "betas" => match list::<f64>(v)?.as_slice() {
                &[a, b] => t.betas = (a, b),
                _ => return Err("expected two comma-separated values".into()),
            },
            "weight_decay" => t.weight_decay = num(v)?,
            "ratio_schedule" => t.ratio_schedule = ratio_schedule(v)?,
            "fda_eps_scale" => t.fda_eps_scale = num(v)?,
            "fda_point" => {
                t.fda_point = match v {
                    "pre" => FdaPoint::PreUpdate,
                    "post" => FdaPoint::PostUpdate,
                    _ => return Err(format!("expected pre or post, got {v:?}")),
                }
            }
            "t_update_every" => {
                t.t_update_every = if v == "never" { None } else { Some(num(v)?) }
            }
            "gamma" => t.gamma = num(v)?,
            "oracle_mode" => t.oracle_mode = flag(v)?,
            "augment" => t.augment = augment(v)?,
            "image_side" => d.image_side = num(v)?,
            "channels" => d.channels = num(v)?,
            "patch_size" => d.patch_size = num(v)?,
            "emb_dim" => d.emb_dim = num(v)?,
            "dec_dim" => d.dec_dim = num(v)?,
            "enc_blocks" => d.enc_blocks = num(v)?,
            "dec_blocks" => d.dec_blocks = num(v)?,
            "heads" => d.heads = num(v)?,
            "num_classes" => d.num_classes = num(v)?,
            "mask_hidden" => d.mask_hidden = num(v)?,
            "dataset" => {
                self.dataset = if v == "synthetic" {
                    DatasetSel::Synthetic
                } else if let Some(path) = v.strip_prefix("cifar10:") {
                    if path.is_empty() {
                        return Err("cifar10 needs a path".into());
                    }
                    let limit = match &self.dataset {
                        DatasetSel::Cifar10 { limit, .. } => *limit,
                        DatasetSel::Synthetic => None,
                    };
                    DatasetSel::Cifar10 {
                        path: PathBuf::from(path),
                        limit,
                    }
                } else {
                    return Err(format!("expected synthetic or cifar10:<path>, got {v:?}"));
                }
            }
            "cifar_limit" => {
                let l = if v == "all" { None } else { Some(num(v)?) };
                match &mut self.dataset {
                    DatasetSel::Cifar10 { limit, .. } => *limit = l,
                    DatasetSel::Synthetic => return Err("needs dataset = cifar10:<path> first".into()),
                }
            }
            "synth_informative" => self.synth_informative = list(v)?,
            "synth_amplitude" => self.synth_amplitude = num(v)?,
            "synth_noise" => self.synth_noise = num(v)?,
            "synth_per_class" => self.synth_per_class = num(v)?,
            "synth_class_fraction" => self.synth_class_fraction = num(v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |key: &str, reason: String| Error::Parse {
                line: i + 1,
                key: key.to_string(),
                reason,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(line, "expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                return Err(err(k, "repeated key".into()));
            }
            cfg.set(k, v).map_err(|r| err(k, r))?;
            seen.push(k.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dims.validate()?;
        if self.dataset == DatasetSel::Synthetic {
            self.synth_spec().validate()?;
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            side: self.dims.image_side,
            channels: self.dims.channels,
            patch_size: self.dims.patch_size,
            num_classes: self.dims.num_classes,
            informative: self.synth_informative.clone(),
            amplitude: self.synth_amplitude,
            noise: self.synth_noise,
            per_class: self.synth_per_class,
            class_fraction: self.synth_class_fraction,
        }
    }

    /// Every key, in a fixed order. Parsing the output gives back `self`.
    pub fn serialize(&self) -> String {
        let t = &self.train;
        let d = &self.dims;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", t.seed.to_string());
        kv("mode", match t.mode { Mode::Mlo => "mlo", Mode::Blo => "blo" }.into());
        kv("total_epochs", t.total_epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr_e", t.lr_e.to_string());
        kv("lr_c", t.lr_c.to_string());
        kv("lr_t", t.lr_t.to_string());
        kv("min_lr", t.min_lr.to_string());
        kv("unroll_e", t.unroll_e.to_string());
        kv("unroll_c", t.unroll_c.to_string());
        kv("betas", format!("{}, {}", t.betas.0, t.betas.1));
        kv("weight_decay", t.weight_decay.to_string());
        kv(
            "ratio_schedule",
            match t.ratio_schedule {
                RatioSchedule::Fixed(r) => format!("fixed {r}"),
                RatioSchedule::Linear { start, end, total_steps } => {
                    format!("linear {start} {end} {total_steps}")
                }
            },
        );
        kv("fda_eps_scale", t.fda_eps_scale.to_string());
        kv(
            "fda_point",
            match t.fda_point { FdaPoint::PreUpdate => "pre", FdaPoint::PostUpdate => "post" }.into(),
        );
        kv("t_update_every", t.t_update_every.map_or("never".into(), |k| k.to_string()));
        kv("gamma", t.gamma.to_string());
        kv("oracle_mode", t.oracle_mode.to_string());
        kv(
            "augment",
            match t.augment {
                AugmentPolicy::None => "none".into(),
                AugmentPolicy::Flip => "flip".into(),
                AugmentPolicy::FlipCrop { pad } => format!("flip_crop {pad}"),
            },
        );
        kv("image_side", d.image_side.to_string());
        kv("channels", d.channels.to_string());
        kv("patch_size", d.patch_size.to_string());
        kv("emb_dim", d.emb_dim.to_string());
        kv("dec_dim", d.dec_dim.to_string());
        kv("enc_blocks", d.enc_blocks.to_string());
        kv("dec_blocks", d.dec_blocks.to_string());
        kv("heads", d.heads.to_string());
        kv("num_classes", d.num_classes.to_string());
        kv("mask_hidden", d.mask_hidden.to_string());
        match &self.dataset {
            DatasetSel::Synthetic => kv("dataset", "synthetic".into()),
            DatasetSel::Cifar10 { path, limit } => {
                kv("dataset", format!("cifar10:{}", path.display()));
                kv("cifar_limit", limit.map_or("all".into(), |l| l.to_string()));
            }
        }
        let inf: Vec<String> = self.synth_informative.iter().map(|i| i.to_string()).collect();
        kv("synth_informative", inf.join(", "));
        kv("synth_amplitude", self.synth_amplitude.to_string());
        kv("synth_noise", self.synth_noise.to_string());
        kv("synth_per_class", self.synth_per_class.to_string());
        kv("synth_class_fraction", self.synth_class_fraction.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        s
    }
}
