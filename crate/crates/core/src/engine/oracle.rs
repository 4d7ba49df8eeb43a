//! Independent checks of the hypergradient machinery against brute-force
//! finite differences. Used by the `gradcheck` command and the tests.

use rand::Rng as _;

use crate::engine::config::{FdaPoint, MloConfig};
use crate::engine::fda::fda_jvp;
use crate::engine::losses::{cls_batch, LabeledBatch, Models};
use crate::engine::stages::{stage1_update, stage2_update, stage3_hypergrad, Hooks, Optims};
use crate::error::Result;
use crate::masking::RatioSchedule;
use crate::nn::{ModelDims, PatchGrid};
use crate::params::{Bound, GradMap, ParamSet, Role};
use crate::rng::{rng_for, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn scalar_set(role: Role, v: f64) -> ParamSet {
    let mut p = ParamSet::new(role);
    p.push("x", Tensor::vector(vec![v]));
    p
}

fn scalar_map(v: f64) -> GradMap {
    GradMap::from_parts(vec!["x".into()], vec![Tensor::vector(vec![v])]).expect("one tensor")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyResult {
    pub t: f64,
    /// Through the FDA hypergradient path.
    pub hypergradient: f64,
    /// Central difference of the unrolled objective in `t`.
    pub brute_force: f64,
    pub closed_form: f64,
}

/// Scalar bilevel toy: `L_rec = ½(e − t)²`, one gradient step of size 1
/// from `e = 0` gives `e′ = t`, and `L_val = ½e′²`, so `dL_val/dt = t`.
pub fn scalar_bilevel_toy(t: f64) -> Result<ToyResult> {
    let eta = 1.0;
    let e0 = 0.0;
    let e_prime = |t: f64| e0 - eta * (e0 - t);
    let val = |t: f64| 0.5 * e_prime(t).powi(2);
    let v = e_prime(t);
    // ∇_t L_rec(e, t) = t − e
    let grad_t = |e: &ParamSet| Ok(scalar_map(t - e.tensors()[0].item()));
    let jvp = fda_jvp(
        grad_t,
        &scalar_set(Role::Encoder, e0),
        &scalar_map(v),
        0.01,
        &scalar_set(Role::Masker, t),
    )?;
    let hypergradient = -eta * jvp.jvp.tensors()[0].item();
    let h = 1e-5;
    Ok(ToyResult {
        t,
        hypergradient,
        brute_force: (val(t + h) - val(t - h)) / (2.0 * h),
        closed_form: t,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct JvpCheck {
    pub fda: Vec<f64>,
    pub dense: Vec<f64>,
    pub rel_error: f64,
    pub parameters: usize,
}

fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

fn random_tensor(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn two_layer<'a>(
    tape: &mut Tape<'a>,
    e: &Bound<'a>,
    t: &Bound<'a>,
    x: &'a Tensor,
    y: &'a Tensor,
) -> Result<Var> {
    let xv = tape.constant_ref(x);
    let h = tape.matmul(xv, e.var("w"))?;
    let h = tape.add_rows(h, e.var("b"))?;
    let h = tape.sigmoid(h);
    let o = tape.matmul(h, t.var("w"))?;
    let o = tape.add_rows(o, t.var("b"))?;
    let o = tape.sigmoid(o);
    let yv = tape.constant_ref(y);
    let p = tape.mul(o, yv)?;
    Ok(tape.sum(p))
}

/// FDA cross-derivative `∂/∂e ⟨∇_t L, v⟩` of a 26-parameter two-layer
/// network against the dense mixed second derivative from double central
/// differences.
pub fn fda_vs_dense(seed: u64) -> Result<JvpCheck> {
    let mut rng = rng_for(seed, 0);
    let x = random_tensor(&[2, 3], &mut rng, 1.0);
    let y = random_tensor(&[2, 2], &mut rng, 1.0);
    let mut e = ParamSet::new(Role::Encoder);
    e.push("w", random_tensor(&[3, 4], &mut rng, 0.8));
    e.push("b", random_tensor(&[4], &mut rng, 0.5));
    let mut t = ParamSet::new(Role::Masker);
    t.push("w", random_tensor(&[4, 2], &mut rng, 0.8));
    t.push("b", random_tensor(&[2], &mut rng, 0.5));

    let loss = |e: &ParamSet, t: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let be = e.bind(&mut tape, false);
        let bt = t.bind(&mut tape, false);
        let l = two_layer(&mut tape, &be, &bt, &x, &y)?;
        Ok(tape.value(l).item())
    };
    let grad_t = |e: &ParamSet| -> Result<GradMap> {
        let mut tape = Tape::new();
        let be = e.bind(&mut tape, false);
        let bt = t.bind(&mut tape, true);
        let l = two_layer(&mut tape, &be, &bt, &x, &y)?;
        Ok(bt.grads(&tape.backward(l)?))
    };

    let mut v = GradMap::zeros_like(&e);
    for tensor in v.tensors_mut() {
        *tensor = random_tensor(tensor.shape(), &mut rng, 1.0);
    }
    let fda = fda_jvp(grad_t, &e, &v, 0.01, &t)?.jvp.flatten();

    // H[i][j] = ∂²L / ∂t_i ∂e_j by double central differences
    let h = 1e-4;
    let vflat = v.flatten();
    let (ne, nt) = (e.numel(), t.numel());
    let mut dense = vec![0.0; nt];
    for j in 0..ne {
        if vflat[j] == 0.0 {
            continue;
        }
        for (i, out) in dense.iter_mut().enumerate() {
            let mut f = 0.0;
            for (se, st, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                let mut ep = e.clone();
                *ep.flat_mut(j) += se * h;
                let mut tp = t.clone();
                *tp.flat_mut(i) += st * h;
                f += w * loss(&ep, &tp)?;
            }
            *out += f / (4.0 * h * h) * vflat[j];
        }
    }
    Ok(JvpCheck {
        rel_error: relative_l2(&fda, &dense),
        fda,
        dense,
        parameters: ne + nt,
    })
}

/// Dimensions of the whole-pipeline oracle: 4×4 grayscale images, 2×2
/// patches (N = 4), width 4, one block each side.
pub fn toy_dims() -> ModelDims {
    ModelDims {
        image_side: 4,
        channels: 1,
        patch_size: 2,
        emb_dim: 4,
        dec_dim: 4,
        enc_blocks: 1,
        dec_blocks: 1,
        heads: 1,
        num_classes: 2,
        mask_hidden: 8,
    }
}

/// Configuration of the whole-pipeline oracle: plain SGD, one inner step.
///
/// The finite-difference radius is far below the training default: at
/// width 4 the encoder's ReLUs and layer norms bend within a 1e-3
/// perturbation. The head step is large enough that the C-path carries a
/// sizeable share of the hypergradient, so a wrong sign there is visible.
pub fn toy_config(seed: u64) -> MloConfig {
    MloConfig {
        lr_e: 0.1,
        lr_c: 0.5,
        lr_t: 0.1,
        unroll_e: 1,
        unroll_c: 1,
        ratio_schedule: RatioSchedule::Fixed(0.5),
        fda_eps_scale: 1e-4,
        oracle_mode: true,
        fda_point: FdaPoint::PreUpdate,
        seed,
        ..MloConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineCheck {
    pub cosine: f64,
    pub rel_l2: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl PipelineCheck {
    pub fn passes(&self) -> bool {
        self.cosine >= 0.99 && self.rel_l2 <= 5e-2
    }
}

struct ToyData {
    u: Vec<PatchGrid>,
    tr: LabeledBatch,
    val: LabeledBatch,
}

fn toy_data(dims: &ModelDims, rng: &mut Rng) -> ToyData {
    let shape = [dims.num_patches(), dims.patch_pixels()];
    let mut grid = || {
        let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(0.0..1.0)).collect();
        PatchGrid::new(Tensor::new(shape.to_vec(), data).expect("sized")).expect("rank 2")
    };
    let u = (0..4).map(|_| grid()).collect();
    let tr = LabeledBatch {
        grids: (0..4).map(|_| grid()).collect(),
        labels: vec![0, 1, 0, 1],
    };
    let val = LabeledBatch {
        grids: (0..4).map(|_| grid()).collect(),
        labels: vec![1, 0, 0, 1],
    };
    ToyData { u, tr, val }
}

/// Validation loss after one Stage-I step and one Stage-II step from fixed
/// initial weights, as a function of the masking network alone.
fn unrolled_val_loss(
    init: &Models,
    t: &ParamSet,
    dims: &ModelDims,
    data: &ToyData,
    cfg: &MloConfig,
) -> Result<f64> {
    let mut m = init.clone();
    m.t = t.clone();
    let mut opt = Optims::new(&m);
    let RatioSchedule::Fixed(r) = cfg.ratio_schedule else {
        unreachable!("toy uses a fixed ratio")
    };
    stage1_update(&mut m, &mut opt, dims, std::slice::from_ref(&data.u), r, cfg.lr_e, cfg)?;
    stage2_update(&mut m, &mut opt, dims, std::slice::from_ref(&data.tr), cfg.lr_c, cfg)?;
    Ok(cls_batch(&m.e, &m.c, dims, &data.val, &[])?.loss)
}

/// Stage-III hypergradient against central differences of the whole
/// Stage-I → Stage-II → validation pipeline, one T coordinate at a time.
pub fn pipeline_oracle(seed: u64, point: FdaPoint, hooks: Hooks) -> Result<PipelineCheck> {
    let cfg = MloConfig {
        fda_point: point,
        ..toy_config(seed)
    };
    pipeline_oracle_with(seed, cfg, hooks)
}

/// [`pipeline_oracle`] under an arbitrary configuration; `cfg` should keep
/// plain-SGD inner steps and a fixed mask ratio.
pub fn pipeline_oracle_with(seed: u64, cfg: MloConfig, hooks: Hooks) -> Result<PipelineCheck> {
    let dims = toy_dims();
    let init = Models::init(&dims, seed);
    let data = toy_data(&dims, &mut rng_for(seed, 1));
    let RatioSchedule::Fixed(r) = cfg.ratio_schedule else {
        unreachable!("toy uses a fixed ratio")
    };

    let mut m = init.clone();
    let mut opt = Optims::new(&m);
    let s1 = stage1_update(&mut m, &mut opt, &dims, std::slice::from_ref(&data.u), r, cfg.lr_e, &cfg)?;
    let s2 = stage2_update(&mut m, &mut opt, &dims, std::slice::from_ref(&data.tr), cfg.lr_c, &cfg)?;
    let report = stage3_hypergrad(&m, &dims, &data.val, Some(&s1), Some(&s2), &cfg, hooks)?;
    let analytic = report.grad_t.flatten();

    let h = 1e-5;
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut t = init.t.clone();
    for i in 0..analytic.len() {
        let orig = *t.flat_mut(i);
        *t.flat_mut(i) = orig + h;
        let plus = unrolled_val_loss(&init, &t, &dims, &data, &cfg)?;
        *t.flat_mut(i) = orig - h;
        let minus = unrolled_val_loss(&init, &t, &dims, &data, &cfg)?;
        *t.flat_mut(i) = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    Ok(PipelineCheck {
        cosine: cosine(&analytic, &numeric),
        rel_l2: relative_l2(&analytic, &numeric),
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_hypergradient_is_t() {
        for t in [-0.5, 0.3, 1.0] {
            let r = scalar_bilevel_toy(t).unwrap();
            assert!((r.hypergradient - t).abs() < 1e-6, "{r:?}");
            assert!((r.brute_force - t).abs() < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn fda_matches_dense_cross_derivative() {
        let r = fda_vs_dense(1).unwrap();
        assert!(r.parameters <= 50);
        assert!(r.rel_error <= 1e-3, "{r:?}");
    }

    #[test]
    fn pipeline_hypergradient_matches_finite_differences() {
        let r = pipeline_oracle(0, FdaPoint::PreUpdate, Hooks::default()).unwrap();
        assert!(r.passes(), "cos {} rel {}", r.cosine, r.rel_l2);
    }

    #[test]
    fn flipped_c_path_sign_is_caught() {
        let hooks = Hooks {
            flip_c_path_sign: true,
        };
        for seed in 0..3 {
            let r = pipeline_oracle(seed, FdaPoint::PreUpdate, hooks).unwrap();
            assert!(!r.passes(), "seed {seed}: cos {} rel {}", r.cosine, r.rel_l2);
        }
    }

    #[test]
    fn post_update_point_is_not_the_derivative() {
        let r = pipeline_oracle(1, FdaPoint::PostUpdate, Hooks::default()).unwrap();
        assert!(!r.passes(), "cos {} rel {}", r.cosine, r.rel_l2);
    }
}
