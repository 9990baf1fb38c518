//! Central finite-difference checks of analytic gradients.
//!
//! Perturbations are applied in `f32` and divided by the step that was
//! actually realised; objectives are evaluated in `f64`. Errors are
//! norm-wise: `‖a − n‖ / max(‖a‖, ‖n‖)`, 0 when both vanish.

use crate::graph::{Graph, Var};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{LN_EPS, MASKED};

/// Builds an op from its inputs and returns the output node.
pub type BuildFn = dyn Fn(&mut Graph, &[Var]) -> Var;

/// A named op with the input shapes it is checked at.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Box<BuildFn>,
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

fn central(x: f32, h: f32, mut f: impl FnMut(f32) -> f64) -> f64 {
    let (xp, xm) = (x + h, x - h);
    (f(xp) - f(xm)) / (xp as f64 - xm as f64)
}

/// Worst relative error over inputs for the objective `Σ weights ⊙ op(inputs)`.
pub fn op_rel_error(inputs: &[Tensor], build: &BuildFn, weights: &Tensor, h: f32) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let y = build(&mut g, &vars);
    let wv = g.constant(weights.clone());
    let prod = g.mul(y, wv).expect("weights must match the op output");
    let loss = g.sum(prod, None).expect("sum");
    g.backward(loss).expect("scalar loss");

    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&mut g, &vars);
        g.data(y)
            .iter()
            .zip(weights.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(vars[i]) {
            Some(gr) => gr.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; input.numel()],
        };
        let mut numeric = vec![0.0; input.numel()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let x = input.data()[j];
            *n = central(x, h, |v| {
                work[i].data_mut()[j] = v;
                eval(&work)
            });
            work[i].data_mut()[j] = x;
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Relative error between `analytic` and differences of `f` over the
/// parameters `ids`. Parameters missing from `analytic` count as zero.
pub fn param_rel_error(
    store: &ParamStore,
    ids: &[ParamId],
    analytic: &ParamGrads,
    h: f32,
    f: &dyn Fn(&ParamStore) -> f64,
) -> f64 {
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    let mut work = store.clone();
    for &id in ids {
        let numel = store.value(id).numel();
        match analytic.entries.iter().find(|(i, _)| *i == id) {
            Some((_, g)) => a_all.extend(g.iter().map(|&v| v as f64)),
            None => a_all.extend(std::iter::repeat_n(0.0, numel)),
        }
        for j in 0..numel {
            let x = store.value(id).data()[j];
            n_all.push(central(x, h, |v| {
                work.value_mut(id).data_mut()[j] = v;
                f(&work)
            }));
            work.value_mut(id).data_mut()[j] = x;
        }
    }
    rel_error(&a_all, &n_all)
}

macro_rules! case {
    ($name:expr, [$($s:expr),*], $f:expr) => {
        OpCase {
            name: $name,
            shapes: vec![$($s.to_vec()),*],
            build: Box::new($f),
        }
    };
}

/// One case per differentiable op of [`Graph`].
pub fn op_suite() -> Vec<OpCase> {
    vec![
        case!("matmul", [[3, 4], [4, 2]], |g, v| g.matmul(v[0], v[1]).unwrap()),
        case!("add", [[2, 3], [2, 3]], |g, v| g.add(v[0], v[1]).unwrap()),
        case!("sub", [[2, 3], [2, 3]], |g, v| g.sub(v[0], v[1]).unwrap()),
        case!("mul", [[2, 3], [2, 3]], |g, v| g.mul(v[0], v[1]).unwrap()),
        case!("add_row", [[3, 4], [4]], |g, v| g.add_row(v[0], v[1]).unwrap()),
        case!("mul_row", [[3, 4], [4]], |g, v| g.mul_row(v[0], v[1]).unwrap()),
        case!("scale", [[5]], |g, v| g.scale(v[0], -1.7)),
        case!("neg", [[5]], |g, v| g.neg(v[0])),
        case!("add_scalar", [[5]], |g, v| g.add_scalar(v[0], 0.3)),
        case!("gelu", [[4, 4]], |g, v| g.gelu(v[0])),
        case!("exp", [[6]], |g, v| g.exp(v[0])),
        case!("softmax_rows", [[3, 5]], |g, v| g.softmax(v[0], 1).unwrap()),
        case!("softmax_cols", [[3, 5]], |g, v| g.softmax(v[0], 0).unwrap()),
        case!("layernorm", [[3, 6], [6], [6]], |g, v| g
            .layernorm(v[0], v[1], v[2], LN_EPS)
            .unwrap()),
        case!("sum_all", [[3, 4]], |g, v| g.sum(v[0], None).unwrap()),
        case!("sum_axis1", [[3, 4]], |g, v| g.sum(v[0], Some(1)).unwrap()),
        case!("mean_all", [[3, 4]], |g, v| g.mean(v[0], None).unwrap()),
        case!("mean_axis0", [[3, 4]], |g, v| g.mean(v[0], Some(0)).unwrap()),
        case!("mean_axis1", [[2, 3, 4]], |g, v| g.mean(v[0], Some(1)).unwrap()),
        case!("transpose", [[3, 4]], |g, v| g.transpose(v[0]).unwrap()),
        case!("reshape", [[3, 4]], |g, v| g.reshape(v[0], &[6, 2]).unwrap()),
        case!("concat0", [[2, 3], [1, 3]], |g, v| g.concat(&[v[0], v[1]], 0).unwrap()),
        case!("concat1", [[2, 3], [2, 2]], |g, v| g.concat(&[v[0], v[1]], 1).unwrap()),
        case!("narrow", [[4, 5]], |g, v| g.narrow(v[0], 1, 1, 3).unwrap()),
        case!("minimum", [[3, 3], [3, 3]], |g, v| g.minimum(v[0], v[1]).unwrap()),
        case!("clamp", [[8]], |g, v| g.clamp(v[0], -0.5, 0.5)),
        case!("attention", [[3, 4], [5, 4], [5, 2]], |g, v| g
            .attention(v[0], v[1], v[2], None)
            .unwrap()),
        case!("attention_masked", [[3, 4], [3, 4], [3, 4]], |g, v| {
            let mask = [0.0, MASKED, MASKED, 0.0, 0.0, MASKED, 0.0, 0.0, 0.0];
            g.attention(v[0], v[1], v[2], Some(&mask)).unwrap()
        }),
        case!("mlp", [[4, 3], [3, 5], [5], [5, 2], [2]], |g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.add_row(h, v[2]).unwrap();
            let h = g.gelu(h);
            let o = g.matmul(h, v[3]).unwrap();
            g.add_row(o, v[4]).unwrap()
        }),
    ]
}

/// Output shape of a case, found by running it once on zeros.
pub fn output_shape(case: &OpCase) -> Vec<usize> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.shapes.iter().map(|s| g.constant(Tensor::zeros(s))).collect();
    let y = (case.build)(&mut g, &vars);
    g.shape(y).to_vec()
}
