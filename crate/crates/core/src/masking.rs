//! Hard top-k mask selection from masking probabilities, and the
//! probability-weighted reconstruction objective.
//!
//! Selection is not differentiable and records nothing on the tape. The
//! masking network receives gradient only through the probability weights of
//! the masked patches in [`weighted_recon_loss`], i.e. the sort is treated as
//! having an identity Jacobian.

use crate::error::{Error, Result};
use crate::tape::{Reduce, Tape, Var};
use crate::tensor::Tensor;

/// A hard mask over `N` patches.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSelection {
    /// Masking probabilities the selection was made from, shape `[N]`.
    pub probs: Tensor,
    /// Masked patch indices, ascending.
    pub masked_idx: Vec<usize>,
    /// Visible patch indices, ascending.
    pub visible_idx: Vec<usize>,
    pub ratio_used: f64,
}

impl MaskSelection {
    pub fn num_patches(&self) -> usize {
        self.masked_idx.len() + self.visible_idx.len()
    }
}

/// Number of visible patches for `n` patches at ratio `r`: `floor(n·(1−r))`.
///
/// A `1e-9` slack absorbs representation error such as `1 − 0.9 < 0.1`.
pub fn visible_count(n: usize, r: f64) -> usize {
    (n as f64 * (1.0 - r) + 1e-9).floor() as usize
}

/// Masks the `N − floor(N·(1−r))` patches with the highest probability.
/// Ties go to the lower index.
pub fn select_mask(probs: &Tensor, r: f64) -> Result<MaskSelection> {
    let n = probs.numel();
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::config(format!("mask ratio {r} must lie in (0, 1)")));
    }
    let keep = visible_count(n, r);
    if keep == 0 || keep == n {
        return Err(Error::config(format!(
            "mask ratio {r} over {n} patches leaves {keep} visible; need at least one masked and one visible patch"
        )));
    }
    let p = probs.data();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps ascending index among equal probabilities
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    let mut masked_idx = order[..n - keep].to_vec();
    let mut visible_idx = order[n - keep..].to_vec();
    masked_idx.sort_unstable();
    visible_idx.sort_unstable();
    Ok(MaskSelection {
        probs: probs.clone(),
        masked_idx,
        visible_idx,
        ratio_used: r,
    })
}

/// Tape handles for the pieces of the weighted reconstruction loss.
#[derive(Clone, Copy, Debug)]
pub struct ReconLossParts {
    /// Mean squared pixel error per masked patch, `[|masked|]`.
    pub per_patch_loss: Var,
    /// Masking probabilities at the masked positions, `[|masked|]`.
    pub weights: Var,
    /// `mean_j weights_j · per_patch_loss_j`.
    pub total: Var,
}

/// Builds the weighted reconstruction loss for one image.
///
/// `probs` must be the live `[N]` probability tensor the selection came from
/// (a tape leaf chain when the masking network is being differentiated), and
/// `target` the true pixels of the masked patches in `masked_idx` order.
pub fn weighted_recon_loss(
    tape: &mut Tape<'_>,
    sel: &MaskSelection,
    probs: Var,
    predicted: Var,
    target: &Tensor,
) -> Result<ReconLossParts> {
    let m = sel.masked_idx.len();
    let pred_shape = tape.value(predicted).shape().to_vec();
    if pred_shape.len() != 2 || pred_shape[0] != m || target.shape() != pred_shape.as_slice() {
        return Err(Error::shape("weighted_recon_loss", &pred_shape, target.shape()));
    }
    let n = tape.value(probs).numel();
    if n != sel.num_patches() {
        return Err(Error::shape("weighted_recon_loss", &[n], &[sel.num_patches()]));
    }
    let target = tape.constant(target.clone());
    let diff = tape.sub(predicted, target)?;
    let sq = tape.mul(diff, diff)?;
    let per_patch_loss = tape.reduce(Reduce::Mean, sq, Some(1))?;
    let column = tape.reshape(probs, &[n, 1])?;
    let picked = tape.gather_rows(column, &sel.masked_idx)?;
    let weights = tape.reshape(picked, &[m])?;
    let weighted = tape.mul(weights, per_patch_loss)?;
    let total = tape.mean(weighted);
    Ok(ReconLossParts {
        per_patch_loss,
        weights,
        total,
    })
}

/// Mask ratio as a function of the training step.
#[derive(Clone, Debug, PartialEq)]
pub enum RatioSchedule {
    Fixed(f64),
    /// Linear ramp from `start` to `end` over `total_steps`, then held.
    Linear {
        start: f64,
        end: f64,
        total_steps: u64,
    },
}

impl Default for RatioSchedule {
    fn default() -> Self {
        RatioSchedule::Fixed(0.75)
    }
}

impl RatioSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| r > 0.0 && r < 1.0;
        let valid = match *self {
            RatioSchedule::Fixed(r) => ok(r),
            RatioSchedule::Linear { start, end, .. } => ok(start) && ok(end),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::config(format!("mask ratios must lie in (0, 1): {self:?}")))
        }
    }
}

pub fn mask_ratio_at(step: u64, schedule: &RatioSchedule) -> Result<f64> {
    schedule.validate()?;
    Ok(match *schedule {
        RatioSchedule::Fixed(r) => r,
        RatioSchedule::Linear {
            start,
            end,
            total_steps,
        } => {
            if total_steps == 0 {
                end
            } else {
                let t = step.min(total_steps) as f64 / total_steps as f64;
                start + (end - start) * t
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn top_two_by_probability() {
        let sel = select_mask(&v(&[0.9, 0.1, 0.5, 0.7]), 0.5).unwrap();
        assert_eq!(sel.masked_idx, [0, 3]);
        assert_eq!(sel.visible_idx, [1, 2]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let sel = select_mask(&v(&[0.5; 4]), 0.25).unwrap();
        assert_eq!(sel.masked_idx, [0]);
        assert_eq!(sel.visible_idx, [1, 2, 3]);
    }

    #[test]
    fn count_rule() {
        let sel = select_mask(&v(&[0.3, 0.2, 0.8, 0.1]), 0.75).unwrap();
        assert_eq!(sel.visible_idx.len(), 1);
        assert_eq!(sel.masked_idx.len(), 3);
        assert_eq!(visible_count(10, 0.9), 1);
        assert_eq!(visible_count(16, 0.1), 14);
        assert_eq!(visible_count(64, 0.95), 3);
    }

    #[test]
    fn degenerate_ratios_are_configuration_errors() {
        let p = v(&[0.5; 4]);
        for r in [0.0, 1.0, -0.2, 0.9] {
            assert!(matches!(select_mask(&p, r), Err(Error::Config(_))), "r = {r}");
        }
        assert!(select_mask(&v(&[0.5; 16]), 0.95).is_err());
    }

    fn recon(
        probs: &[f64],
        sel_ratio: f64,
        pred: Vec<f64>,
        target: Vec<f64>,
        pixels: usize,
    ) -> (f64, Vec<f64>) {
        let p = v(probs);
        let sel = select_mask(&p, sel_ratio).unwrap();
        let m = sel.masked_idx.len();
        let mut tape = Tape::new();
        let pv = tape.leaf(&p);
        let pred = tape.constant(Tensor::new(vec![m, pixels], pred).unwrap());
        let target = Tensor::new(vec![m, pixels], target).unwrap();
        let parts = weighted_recon_loss(&mut tape, &sel, pv, pred, &target).unwrap();
        let g = tape.backward(parts.total).unwrap();
        (tape.value(parts.total).item(), g.wrt(pv).into_data())
    }

    #[test]
    fn single_masked_patch_arithmetic() {
        // σ = 0.5 on the masked patch, pixel error 2 everywhere
        let (total, _) = recon(&[0.5, 0.1], 0.5, vec![2.0; 3], vec![0.0; 3], 3);
        assert_eq!(total, 2.0);
    }

    #[test]
    fn perfect_reconstruction_costs_nothing() {
        let (total, grad) = recon(&[0.9, 0.3, 0.6, 0.2], 0.5, vec![0.4; 4], vec![0.4; 4], 2);
        assert_eq!(total, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn total_is_linear_in_the_weights() {
        let pred = vec![0.1, 0.9, 0.3, 0.3];
        let target = vec![0.0, 1.0, 1.0, 0.0];
        let (base, _) = recon(&[0.8, 0.6, 0.1, 0.2], 0.5, pred.clone(), target.clone(), 2);
        let (doubled, _) = recon(&[1.6, 0.6, 0.1, 0.2], 0.5, pred.clone(), target.clone(), 2);
        // patch 0 contributes 0.8 * mean([0.01, 0.01]) / 2
        let contribution = 0.8 * 0.01 / 2.0;
        assert!((doubled - base - contribution).abs() < 1e-15);
    }

    #[test]
    fn gradient_wrt_probs_is_per_patch_loss_over_count_and_zero_when_visible() {
        let pred = vec![0.2, 0.5, 0.7, 0.1];
        let target = vec![0.6, 0.5, 0.0, 0.9];
        let (_, grad) = recon(&[0.1, 0.8, 0.3, 0.9], 0.5, pred.clone(), target.clone(), 2);
        // masked = {1, 3}; per-patch losses are mean squared errors
        let l1 = (0.16 + 0.0) / 2.0;
        let l3 = (0.49 + 0.64) / 2.0;
        assert!((grad[1] - l1 / 2.0).abs() < 1e-15);
        assert!((grad[3] - l3 / 2.0).abs() < 1e-15);
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[2], 0.0);

        // and the same via central differences over the live probabilities
        let p = v(&[0.1, 0.8, 0.3, 0.9]);
        let sel = select_mask(&p, 0.5).unwrap();
        let target_t = Tensor::new(vec![2, 2], target).unwrap();
        let pred_t = Tensor::new(vec![2, 2], pred).unwrap();
        let r = grad_check(
            |tape, x| {
                let pr = tape.constant(pred_t.clone());
                Ok(weighted_recon_loss(tape, &sel, x, pr, &target_t)?.total)
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = v(&[0.9, 0.1, 0.5, 0.7]);
        let sel = select_mask(&p, 0.5).unwrap();
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let pred = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(weighted_recon_loss(&mut tape, &sel, pv, pred, &Tensor::zeros(&[2, 2])).is_err());
        let pred = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(weighted_recon_loss(&mut tape, &sel, pv, pred, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn ratio_schedules() {
        assert_eq!(mask_ratio_at(12345, &RatioSchedule::Fixed(0.75)).unwrap(), 0.75);
        let lin = RatioSchedule::Linear {
            start: 0.5,
            end: 0.9,
            total_steps: 100,
        };
        assert_eq!(mask_ratio_at(0, &lin).unwrap(), 0.5);
        assert_eq!(mask_ratio_at(100, &lin).unwrap(), 0.9);
        assert!((mask_ratio_at(50, &lin).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(mask_ratio_at(1000, &lin).unwrap(), 0.9);
        assert!(mask_ratio_at(0, &RatioSchedule::Fixed(1.0)).is_err());
        assert!(mask_ratio_at(0, &RatioSchedule::Linear { start: 0.0, end: 0.5, total_steps: 3 }).is_err());
    }

    #[test]
    fn selection_is_repeatable() {
        let p = v(&[0.3, 0.3, 0.7, 0.3, 0.7, 0.1, 0.3, 0.3]);
        let a = select_mask(&p, 0.5).unwrap();
        let b = select_mask(&p, 0.5).unwrap();
        assert_eq!(a.masked_idx, b.masked_idx);
        assert_eq!(a.masked_idx, [0, 1, 2, 4]);
    }

    proptest! {
        #[test]
        fn selection_invariants(
            probs in proptest::collection::vec(0.01f64..0.99, 2..40),
            r in 0.05f64..0.95,
        ) {
            let n = probs.len();
            let keep = visible_count(n, r);
            prop_assume!(keep >= 1 && keep < n);
            let p = v(&probs);
            let sel = select_mask(&p, r).unwrap();
            prop_assert_eq!(sel.visible_idx.len(), keep);
            let mut all: Vec<usize> = sel.masked_idx.iter().chain(&sel.visible_idx).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let min_masked = sel.masked_idx.iter().map(|&i| probs[i]).fold(f64::INFINITY, f64::min);
            let max_visible = sel.visible_idx.iter().map(|&i| probs[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_masked >= max_visible);
        }

        #[test]
        fn selection_commutes_with_permutation(
            probs in proptest::collection::vec(0.01f64..0.99, 4..24),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = probs.len();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<f64> = perm.iter().map(|&i| probs[i]).collect();
            let r = 0.5;
            let direct = select_mask(&v(&permuted), r).unwrap();
            // reference: sort the permuted problem by (prob desc, permuted index asc)
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| permuted[b].total_cmp(&permuted[a]).then(a.cmp(&b)));
            let mut expected = order[..n - visible_count(n, r)].to_vec();
            expected.sort_unstable();
            prop_assert_eq!(direct.masked_idx, expected);
        }

        #[test]
        fn monotone_score_transforms_keep_the_mask(
            logits in proptest::collection::vec(-4.0f64..4.0, 4..20),
            scale in 0.1f64..5.0,
        ) {
            use crate::tensor::sigmoid;
            let a: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
            let b: Vec<f64> = logits.iter().map(|&x| sigmoid(scale * x)).collect();
            let sa = select_mask(&v(&a), 0.5).unwrap();
            let sb = select_mask(&v(&b), 0.5).unwrap();
            prop_assert_eq!(sa.masked_idx, sb.masked_idx);
        }
    }
}
