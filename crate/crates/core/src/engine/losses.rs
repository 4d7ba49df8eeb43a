//! Batch losses and their gradients. Every image gets its own tape; per-image
//! gradients are summed in batch order and divided by the batch size.

use crate::error::{Error, Result};
use crate::masking::{select_mask, weighted_recon_loss, MaskSelection};
use crate::nn::{
    decoder_forward, encoder_forward, head_forward, masking_net_forward, ModelDims, PatchGrid,
};
use crate::params::{Bound, GradMap, ParamSet, Role};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The four parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub e: ParamSet,
    pub d: ParamSet,
    pub c: ParamSet,
    pub t: ParamSet,
}

impl Models {
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        use crate::nn::{init_decoder, init_encoder, init_head, init_masker};
        use crate::rng::{rng_for, stream};
        Models {
            e: init_encoder(dims, &mut rng_for(seed, stream::INIT_E)),
            d: init_decoder(dims, &mut rng_for(seed, stream::INIT_D)),
            c: init_head(dims, &mut rng_for(seed, stream::INIT_C)),
            t: init_masker(dims, &mut rng_for(seed, stream::INIT_T)),
        }
    }

    pub fn get(&self, role: Role) -> &ParamSet {
        match role {
            Role::Encoder => &self.e,
            Role::Decoder => &self.d,
            Role::Head => &self.c,
            Role::Masker => &self.t,
        }
    }

    pub fn get_mut(&mut self, role: Role) -> &mut ParamSet {
        match role {
            Role::Encoder => &mut self.e,
            Role::Decoder => &mut self.d,
            Role::Head => &mut self.c,
            Role::Masker => &mut self.t,
        }
    }

    pub fn is_finite(&self) -> bool {
        Role::ALL.iter().all(|&r| self.get(r).is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub grids: Vec<PatchGrid>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}

/// How the reconstruction loss obtains its masks.
#[derive(Clone, Copy, Debug)]
pub enum Masks<'s> {
    /// Select from the masking network's probabilities at this ratio.
    Select(f64),
    /// Reuse earlier selections, one per image.
    Fixed(&'s [MaskSelection]),
}

#[derive(Clone, Debug)]
pub struct ReconEval {
    /// Mean over images of the weighted reconstruction loss.
    pub loss: f64,
    pub selections: Vec<MaskSelection>,
    pub grad_e: Option<GradMap>,
    pub grad_d: Option<GradMap>,
    pub grad_t: Option<GradMap>,
}

fn grad_slot(wrt: &[Role], role: Role, p: &ParamSet) -> Option<GradMap> {
    wrt.contains(&role).then(|| GradMap::zeros_like(p))
}

fn finish(g: &mut Option<GradMap>, n: usize) {
    if let Some(g) = g {
        g.scale(1.0 / n as f64);
    }
}

fn accumulate(slot: &mut Option<GradMap>, b: &Bound<'_>, grads: &crate::tape::Gradients) {
    if let Some(g) = slot {
        g.accumulate(b, grads);
    }
}

fn check_nonempty(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::config("empty batch"))
    } else {
        Ok(())
    }
}

/// Weighted reconstruction loss over a batch, with gradients for the roles
/// in `wrt` (any of E, D, T).
pub fn recon_batch(
    e: &ParamSet,
    d: &ParamSet,
    t: &ParamSet,
    dims: &ModelDims,
    grids: &[PatchGrid],
    masks: Masks<'_>,
    wrt: &[Role],
) -> Result<ReconEval> {
    check_nonempty(grids.len())?;
    if let Masks::Fixed(sels) = masks {
        if sels.len() != grids.len() {
            return Err(Error::shape("recon_batch", &[grids.len()], &[sels.len()]));
        }
    }
    let mut out = ReconEval {
        loss: 0.0,
        selections: Vec::with_capacity(grids.len()),
        grad_e: grad_slot(wrt, Role::Encoder, e),
        grad_d: grad_slot(wrt, Role::Decoder, d),
        grad_t: grad_slot(wrt, Role::Masker, t),
    };
    let backward = !wrt.is_empty();
    for (i, grid) in grids.iter().enumerate() {
        let mut tape = Tape::new();
        let be = e.bind(&mut tape, wrt.contains(&Role::Encoder));
        let bd = d.bind(&mut tape, wrt.contains(&Role::Decoder));
        let bt = t.bind(&mut tape, wrt.contains(&Role::Masker));
        let g = tape.constant_ref(grid.tensor());
        let probs = masking_net_forward(&mut tape, &bt, dims, g)?;
        let sel = match masks {
            Masks::Select(r) => select_mask(tape.value(probs), r)?,
            Masks::Fixed(sels) => sels[i].clone(),
        };
        let loss = recon_on_tape(&mut tape, &be, &bd, dims, grid, g, probs, &sel)?;
        out.loss += tape.value(loss).item();
        if backward {
            let grads = tape.backward(loss)?;
            accumulate(&mut out.grad_e, &be, &grads);
            accumulate(&mut out.grad_d, &bd, &grads);
            accumulate(&mut out.grad_t, &bt, &grads);
        }
        out.selections.push(sel);
    }
    let n = grids.len();
    out.loss /= n as f64;
    finish(&mut out.grad_e, n);
    finish(&mut out.grad_d, n);
    finish(&mut out.grad_t, n);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn recon_on_tape<'a>(
    tape: &mut Tape<'a>,
    e: &Bound<'a>,
    d: &Bound<'a>,
    dims: &ModelDims,
    grid: &PatchGrid,
    g: Var,
    probs: Var,
    sel: &MaskSelection,
) -> Result<Var> {
    let visible = tape.gather_rows(g, &sel.visible_idx)?;
    let enc = encoder_forward(tape, e, dims, visible, &sel.visible_idx)?;
    let pred = decoder_forward(tape, d, dims, enc, &sel.visible_idx, &sel.masked_idx)?;
    let target = grid.rows(&sel.masked_idx);
    Ok(weighted_recon_loss(tape, sel, probs, pred, &target)?.total)
}

#[derive(Clone, Debug)]
pub struct ClsEval {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
    pub grad_e: Option<GradMap>,
    pub grad_c: Option<GradMap>,
}

impl ClsEval {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

/// Masking probabilities of one image, forward only.
pub fn masking_probs(t: &ParamSet, dims: &ModelDims, grid: &PatchGrid) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bt = t.bind(&mut tape, false);
    let g = tape.constant_ref(grid.tensor());
    let probs = masking_net_forward(&mut tape, &bt, dims, g)?;
    Ok(tape.value(probs).clone())
}

/// Mean σ over the patches in `subset` minus mean σ over the rest, averaged
/// over `grids`.
pub fn subset_prob_gap(t: &ParamSet, dims: &ModelDims, grids: &[PatchGrid], subset: &[usize]) -> Result<f64> {
    let n = dims.num_patches();
    if grids.is_empty() || subset.is_empty() || subset.len() >= n || subset.iter().any(|&i| i >= n) {
        return Err(Error::config("subset must be a nonempty proper subset of the patch grid"));
    }
    let mut total = 0.0;
    for grid in grids {
        let p = masking_probs(t, dims, grid)?;
        let inside: f64 = subset.iter().map(|&i| p.data()[i]).sum();
        let all: f64 = p.data().iter().sum();
        total += inside / subset.len() as f64 - (all - inside) / (n - subset.len()) as f64;
    }
    Ok(total / grids.len() as f64)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Classification loss with every patch visible, with gradients for the
/// roles in `wrt` (any of E, C).
pub fn cls_batch(
    e: &ParamSet,
    c: &ParamSet,
    dims: &ModelDims,
    batch: &LabeledBatch,
    wrt: &[Role],
) -> Result<ClsEval> {
    check_nonempty(batch.len())?;
    let all: Vec<usize> = (0..dims.num_patches()).collect();
    let mut out = ClsEval {
        loss: 0.0,
        correct: 0,
        count: batch.len(),
        grad_e: grad_slot(wrt, Role::Encoder, e),
        grad_c: grad_slot(wrt, Role::Head, c),
    };
    for (grid, &label) in batch.grids.iter().zip(&batch.labels) {
        let mut tape = Tape::new();
        let be = e.bind(&mut tape, wrt.contains(&Role::Encoder));
        let bc = c.bind(&mut tape, wrt.contains(&Role::Head));
        let g = tape.constant_ref(grid.tensor());
        let enc = encoder_forward(&mut tape, &be, dims, g, &all)?;
        let logits = head_forward(&mut tape, &bc, enc)?;
        let loss = tape.cross_entropy_logits(logits, &[label])?;
        out.loss += tape.value(loss).item();
        if argmax(tape.value(logits).data()) == label {
            out.correct += 1;
        }
        if !wrt.is_empty() {
            let grads = tape.backward(loss)?;
            accumulate(&mut out.grad_e, &be, &grads);
            accumulate(&mut out.grad_c, &bc, &grads);
        }
    }
    let n = batch.len();
    out.loss /= n as f64;
    finish(&mut out.grad_e, n);
    finish(&mut out.grad_c, n);
    Ok(out)
}

/// Loss and accuracy of `(E, C)` on a labeled set, no gradients.
pub fn evaluate(e: &ParamSet, c: &ParamSet, dims: &ModelDims, data: &LabeledBatch) -> Result<(f64, f64)> {
    let r = cls_batch(e, c, dims, data, &[])?;
    Ok((r.loss, r.accuracy()))
}
