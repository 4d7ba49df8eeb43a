//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::params::{Bound, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        eps,
    )
}

/// Checks a scalar function of several tensors, perturbing every coordinate
/// of every input by `±eps`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant_ref(t)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
    };
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Checks a scalar function of a whole parameter set, coordinate by coordinate.
pub fn grad_check_params<F>(f: F, params: &ParamSet, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &Bound<'t>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let loss = f(&mut tape, &bound)?;
        bound.grads(&tape.backward(loss)?).flatten()
    };
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let loss = f(&mut tape, &bound)?;
        Ok(tape.value(loss).item())
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *work.flat_mut(i);
        *work.flat_mut(i) = orig + eps;
        let plus = eval(&work)?;
        *work.flat_mut(i) = orig - eps;
        let minus = eval(&work)?;
        *work.flat_mut(i) = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        report.coordinates += 1;
    }
    Ok(report)
}

/// Tolerance of the op suite.
pub const OP_TOLERANCE: f64 = 1e-6;

/// One entry of [`op_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub report: GradCheckReport,
}

impl OpCheck {
    pub fn passes(&self) -> bool {
        self.report.max_rel_error <= OP_TOLERANCE
    }
}

type OpFn = Box<dyn for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>>;

/// Reduces an op output to a scalar through fixed nonuniform weights, so
/// that every output coordinate contributes a distinct amount.
fn project(tape: &mut Tape<'_>, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| 0.3 + 0.41 * (i % 7) as f64 - 0.05 * (i % 3) as f64);
    let w = tape.constant(Tensor::new(shape, w.collect())?);
    let y = tape.mul(out, w)?;
    Ok(tape.sum(y))
}

fn sample(rng: &mut crate::rng::Rng, shape: &[usize], away_from_zero: bool) -> Tensor {
    use rand::Rng as _;
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            if away_from_zero {
                x.signum() * (0.2 + 0.8 * x.abs())
            } else {
                x
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central-difference check of every tape operation at random points drawn
/// from `seed`. Kinked ops are evaluated away from their kinks.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    use crate::tape::{Elementwise, Reduce};
    let mut rng = crate::rng::rng_for(seed, 0);
    let mut s = |shape: &[usize]| sample(&mut rng, shape, false);
    let cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = vec![
        ("matmul", vec![s(&[3, 4]), s(&[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", vec![s(&[2, 3]), s(&[2, 3])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![s(&[2, 3]), s(&[2, 3])], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![s(&[2, 3]), s(&[2, 3])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![s(&[5])], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_scalar", vec![s(&[5])], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        ("add_rows", vec![s(&[3, 4]), s(&[4])], Box::new(|t, v| t.add_rows(v[0], v[1]))),
        ("sigmoid", vec![s(&[2, 4])], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        (
            "elementwise_mul",
            vec![s(&[4]), s(&[4])],
            Box::new(|t, v| t.elementwise(Elementwise::Mul, v[0], Some(v[1]))),
        ),
        ("softmax_rows", vec![s(&[3, 5])], Box::new(|t, v| t.softmax_rows(v[0]))),
        (
            "layer_norm",
            vec![s(&[3, 5]), s(&[5]), s(&[5])],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6)),
        ),
        ("reduce_sum_axis0", vec![s(&[3, 4])], Box::new(|t, v| t.reduce(Reduce::Sum, v[0], Some(0)))),
        ("reduce_sum_axis1", vec![s(&[3, 4])], Box::new(|t, v| t.reduce(Reduce::Sum, v[0], Some(1)))),
        ("reduce_mean_axis0", vec![s(&[3, 4])], Box::new(|t, v| t.reduce(Reduce::Mean, v[0], Some(0)))),
        ("reduce_mean_axis1", vec![s(&[3, 4])], Box::new(|t, v| t.reduce(Reduce::Mean, v[0], Some(1)))),
        ("sum", vec![s(&[3, 4])], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![s(&[3, 4])], Box::new(|t, v| Ok(t.mean(v[0])))),
        ("gather_rows", vec![s(&[4, 3])], Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2]))),
        ("concat_rows", vec![s(&[2, 3]), s(&[1, 3])], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", vec![s(&[2, 3]), s(&[2, 2])], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("narrow_cols", vec![s(&[3, 5])], Box::new(|t, v| t.narrow_cols(v[0], 1, 3))),
        ("transpose", vec![s(&[3, 4])], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![s(&[3, 4])], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        (
            "cross_entropy_logits",
            vec![s(&[3, 4])],
            Box::new(|t, v| t.cross_entropy_logits(v[0], &[1, 0, 3])),
        ),
    ];
    let relu: OpFn = Box::new(|t, v| Ok(t.relu(v[0])));
    let relu_input = sample(&mut crate::rng::rng_for(seed, 1), &[2, 4], true);
    let mut out = Vec::with_capacity(cases.len() + 1);
    for (op, inputs, f) in cases.into_iter().chain([("relu", vec![relu_input], relu)]) {
        let report = grad_check_many(
            |tape, vars| {
                let y = f(tape, vars)?;
                project(tape, y)
            },
            &inputs,
            1e-5,
        )?;
        out.push(OpCheck { op, report });
    }
    Ok(out)
}
