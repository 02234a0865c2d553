//! Central finite-difference validation of analytic gradients.

use std::rc::Rc;

use crate::error::Result;
use crate::kernels::AttnMask;
use crate::rng::Rng;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors; entries whose analytic and
/// numeric values are both below it are compared on this absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares gradients of `loss_fn` with respect to every element of every
/// input against central differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let l = loss_fn(&mut g, &vars)?;
        Ok(g.value(l).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        entries: 0,
    };
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            work[ti].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti].data()[j];
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.entries += 1;
        }
    }
    Ok(report)
}

pub type LossFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One differentiable op wrapped into a scalar loss over random inputs.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub loss: LossFn,
}

fn case(name: &'static str, shapes: &[&[usize]], loss: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        loss: Box::new(loss),
    }
}

/// Reduces any output to a scalar with fixed pseudo-random weights so that
/// every output element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    let shape = g.shape(y).to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
    let wv = g.constant(Tensor::new(&shape, w)?);
    let p = g.mul(y, wv)?;
    g.sum(p)
}

/// Every differentiable graph op on a tiny shape.
pub fn op_suite() -> Vec<OpCase> {
    vec![
        case("identity", &[&[2, 3]], |g, x| weighted_sum(g, x[0])),
        case("add", &[&[2, 3], &[2, 3]], |g, x| { let y = g.add(x[0], x[1])?; weighted_sum(g, y) }),
        case("sub", &[&[2, 3], &[2, 3]], |g, x| { let y = g.sub(x[0], x[1])?; weighted_sum(g, y) }),
        case("mul", &[&[2, 3], &[2, 3]], |g, x| { let y = g.mul(x[0], x[1])?; weighted_sum(g, y) }),
        case("scale", &[&[4]], |g, x| { let y = g.scale(x[0], -1.7)?; weighted_sum(g, y) }),
        case("add_bias", &[&[3, 4], &[4]], |g, x| { let y = g.add_bias(x[0], x[1])?; weighted_sum(g, y) }),
        case("matmul", &[&[3, 4], &[4, 2]], |g, x| { let y = g.matmul(x[0], x[1])?; weighted_sum(g, y) }),
        case("linear", &[&[3, 4], &[4, 2], &[2]], |g, x| { let y = g.linear(x[0], x[1], Some(x[2]))?; weighted_sum(g, y) }),
        case("gelu", &[&[2, 5]], |g, x| { let y = g.gelu(x[0])?; weighted_sum(g, y) }),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |g, x| {
            let y = g.layer_norm(x[0], Some(x[1]), Some(x[2]))?;
            weighted_sum(g, y)
        }),
        case("softmax", &[&[2, 5]], |g, x| { let y = g.softmax(x[0])?; weighted_sum(g, y) }),
        case("embedding", &[&[5, 3]], |g, x| { let y = g.embedding(x[0], &[4, 0, 4, 2])?; weighted_sum(g, y) }),
        case("cross_entropy", &[&[3, 5]], |g, x| g.cross_entropy(x[0], &[1, 4, 0])),
        case("attention", &[&[4, 6], &[5, 6], &[5, 6]], |g, x| {
            let mut m = AttnMask::full(4, 5);
            m.allow[2] = false;
            m.allow[9] = false;
            let y = g.attention(x[0], x[1], x[2], 2, Some(&m))?;
            weighted_sum(g, y)
        }),
        case("block_attention", &[&[5, 4], &[5, 4], &[5, 4]], |g, x| {
            let y = g.block_attention(x[0], x[1], x[2], 2, &[1, 5])?;
            weighted_sum(g, y)
        }),
        case("resize", &[&[2, 3, 4]], |g, x| { let y = g.resize(x[0], (5, 2))?; weighted_sum(g, y) }),
        case("gather", &[&[2, 3]], |g, x| {
            let y = g.gather(x[0], Rc::from(vec![5, 0, 0, 3]), &[4])?;
            weighted_sum(g, y)
        }),
        case("slice_cols", &[&[3, 5]], |g, x| { let y = g.slice_cols(x[0], 1, 3)?; weighted_sum(g, y) }),
        case("chw_to_rows", &[&[2, 2, 3]], |g, x| { let y = g.chw_to_rows(x[0])?; weighted_sum(g, y) }),
        case("rows_to_chw", &[&[6, 2]], |g, x| { let y = g.rows_to_chw(x[0], 2, 3)?; weighted_sum(g, y) }),
        case("concat", &[&[1, 3], &[2, 3]], |g, x| { let y = g.concat(&[x[0], x[1]])?; weighted_sum(g, y) }),
        case("reshape", &[&[2, 3]], |g, x| { let y = g.reshape(x[0], &[3, 2])?; weighted_sum(g, y) }),
        case("sum", &[&[2, 3]], |g, x| { let y = g.mul(x[0], x[0])?; g.sum(y) }),
        case("mean", &[&[2, 3]], |g, x| { let y = g.mul(x[0], x[0])?; g.mean(y) }),
        case("mse", &[&[2, 3], &[2, 3]], |g, x| g.mse(x[0], x[1])),
    ]
}

/// Runs every case of [`op_suite`] on `trials` random inputs and returns the
/// worst report per op.
pub fn run_op_suite(trials: usize, rng: &mut Rng) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = Vec::new();
    for c in op_suite() {
        let mut worst = GradCheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            entries: 0,
        };
        for _ in 0..trials {
            let inputs: Vec<Tensor<f64>> = c.shapes.iter().map(|s| crate::rng::normal(rng, s, 1.0)).collect();
            let r = check_gradients(&inputs, FD_STEP, &*c.loss)?;
            worst.max_rel_err = worst.max_rel_err.max(r.max_rel_err);
            worst.max_abs_err = worst.max_abs_err.max(r.max_abs_err);
            worst.entries += r.entries;
        }
        out.push((c.name, worst));
    }
    Ok(out)
}
