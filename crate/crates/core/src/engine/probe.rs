//! Linear probing: a fresh head trained on frozen, mean-pooled encoder
//! features of unmasked images.

use crate::engine::losses::{argmax, LabeledBatch};
use crate::error::{Error, Result};
use crate::nn::{encoder_forward, init_head, ModelDims, PatchGrid};
use crate::optim::{adamw_update, AdamW, OptState};
use crate::params::{GradMap, ParamSet};
use crate::rng::{rng_for, stream};
use crate::tape::{Reduce, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Full-batch AdamW steps.
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 500,
            lr: 1e-2,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

/// Mean-pooled encoder output of every grid, all patches visible: `[n × emb_dim]`.
pub fn encode_features(e: &ParamSet, dims: &ModelDims, grids: &[PatchGrid]) -> Result<Tensor> {
    let all: Vec<usize> = (0..dims.num_patches()).collect();
    let mut data = Vec::with_capacity(grids.len() * dims.emb_dim);
    for grid in grids {
        let mut tape = Tape::new();
        let be = e.bind(&mut tape, false);
        let g = tape.constant_ref(grid.tensor());
        let enc = encoder_forward(&mut tape, &be, dims, g, &all)?;
        let pooled = tape.reduce(Reduce::Mean, enc, Some(0))?;
        data.extend_from_slice(tape.value(pooled).data());
    }
    Tensor::new(vec![grids.len(), dims.emb_dim], data)
}

/// Standardises columns with the mean and standard deviation of `fit`.
fn standardize(fit: &Tensor, xs: &mut [&mut Tensor]) {
    let (n, d) = (fit.shape()[0], fit.shape()[1]);
    for j in 0..d {
        let col = (0..n).map(|i| fit.data()[i * d + j]);
        let mean = col.clone().sum::<f64>() / n as f64;
        let var = col.map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt().max(1e-8);
        for x in xs.iter_mut() {
            let rows = x.shape()[0];
            for i in 0..rows {
                let v = &mut x.data_mut()[i * d + j];
                *v = (*v - mean) / sd;
            }
        }
    }
}

fn logits_loss(head: &ParamSet, x: &Tensor, labels: &[usize], grad: bool) -> Result<(f64, Vec<usize>, Option<GradMap>)> {
    let mut tape = Tape::new();
    let h = head.bind(&mut tape, grad);
    let f = tape.constant_ref(x);
    let y = tape.matmul(f, h.var("fc.w"))?;
    let logits = tape.add_rows(y, h.var("fc.b"))?;
    let loss = tape.cross_entropy_logits(logits, labels)?;
    let k = head.get("fc.b").map_or(0, |b| b.numel());
    let preds = tape.value(logits).data().chunks(k).map(argmax).collect();
    let g = if grad {
        let grads = tape.backward(loss)?;
        Some(h.grads(&grads))
    } else {
        None
    };
    Ok((tape.value(loss).item(), preds, g))
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Trains a fresh linear head on `train` features of the frozen encoder and
/// reports accuracy on `val`.
pub fn linear_probe(
    e: &ParamSet,
    dims: &ModelDims,
    train: &LabeledBatch,
    val: &LabeledBatch,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("probe needs nonempty train and validation sets"));
    }
    let mut xt = encode_features(e, dims, &train.grids)?;
    let mut xv = encode_features(e, dims, &val.grids)?;
    let fit = xt.clone();
    standardize(&fit, &mut [&mut xt, &mut xv]);
    let mut head = init_head(dims, &mut rng_for(cfg.seed, stream::PROBE));
    let mut opt = OptState::for_params(&head);
    let hp = AdamW {
        lr: cfg.lr,
        betas: (0.9, 0.999),
        weight_decay: cfg.weight_decay,
    };
    for _ in 0..cfg.steps {
        let (_, _, g) = logits_loss(&head, &xt, &train.labels, true)?;
        adamw_update(&mut head, &g.expect("requested"), &mut opt, &hp)?;
    }
    let (_, tp, _) = logits_loss(&head, &xt, &train.labels, false)?;
    let (val_loss, vp, _) = logits_loss(&head, &xv, &val.labels, false)?;
    if !val_loss.is_finite() {
        return Err(Error::NonFinite {
            step: cfg.steps as u64,
            quantity: "probe loss",
        });
    }
    Ok(ProbeReport {
        train_accuracy: accuracy(&tp, &train.labels),
        val_accuracy: accuracy(&vp, &val.labels),
        val_loss,
    })
}
