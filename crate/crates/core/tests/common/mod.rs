//! Central finite-difference helpers shared by the gradient and acceptance tests.
#![allow(dead_code)]

use qrobust::autodiff::{Graph, NodeId};
use qrobust::model::{BuildOptions, Model, ParamSet};
use qrobust::regularizers::{l1_grad_penalty, l2_grad_penalty, RegConfig, RegFamily};
use qrobust::seed;
use qrobust::{Result, Tensor};
use rand::Rng;

pub const STEP: f64 = 1e-5;
pub const CASES: usize = 100;

pub type Build<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a;

pub fn value(build: &Build<'_>, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    g.expect_value(out).unwrap().item()
}

pub fn analytic(build: &Build<'_>, inputs: &[Tensor]) -> Vec<f64> {
    let mut g = Graph::new();
    let vars: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward(out, &vars).unwrap();
    vars.iter().flat_map(|v| grads.get(*v).unwrap().data().to_vec()).collect()
}

pub fn numeric(build: &Build<'_>, inputs: &[Tensor]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            out.push((value(build, &plus) - value(build, &minus)) / (2.0 * STEP));
        }
    }
    out
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale(a).max(scale(b)).max(1e-8)
}

pub fn uniform(rng: &mut seed::Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries with magnitude in `[0.1, 1)`, away from kinks at zero.
pub fn away_from_zero(rng: &mut seed::Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape).map(|v| if v >= 0.0 { 0.1 + 0.9 * v } else { -0.1 + 0.9 * v })
}

fn positive(rng: &mut seed::Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape).map(|v| 0.5 + 0.5 * (v + 1.0))
}

/// Reduce a node to a scalar through a fixed random weighting so every
/// output entry is exercised.
fn project(g: &mut Graph, out: NodeId, weights: &Tensor) -> Result<NodeId> {
    if g.shape(out).is_empty() {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let n = shape.iter().product();
    let w = g.constant(Tensor::new(shape, weights.data()[..n].to_vec())?);
    let p = g.mul(out, w)?;
    g.sum(p)
}

struct Case {
    inputs: Vec<Tensor>,
    out_len: usize,
}

/// Worst relative error over [`CASES`] random inputs.
fn op_error(
    name: &str,
    make: impl Fn(&mut seed::Rng) -> Case,
    op: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + Copy,
) -> f64 {
    let mut rng = seed::labeled_rng(7, name);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let case = make(&mut rng);
        let proj = uniform(&mut rng, &[case.out_len.max(1)]);
        let build = move |g: &mut Graph, v: &[NodeId]| {
            let out = op(g, v)?;
            project(g, out, &proj)
        };
        let a = analytic(&build, &case.inputs);
        let n = numeric(&build, &case.inputs);
        worst = worst.max(rel_err(&a, &n));
    }
    worst
}

fn dims(rng: &mut seed::Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

pub fn elementwise_errors() -> Vec<(&'static str, f64)> {
    let two = |rng: &mut seed::Rng| {
        let (r, c) = dims(rng);
        Case { inputs: vec![uniform(rng, &[r, c]), uniform(rng, &[r, c])], out_len: r * c }
    };
    let one = |rng: &mut seed::Rng| {
        let (r, c) = dims(rng);
        Case { inputs: vec![away_from_zero(rng, &[r, c])], out_len: r * c }
    };
    let pos = |rng: &mut seed::Rng| {
        let (r, c) = dims(rng);
        Case { inputs: vec![positive(rng, &[r, c])], out_len: r * c }
    };
    vec![
        ("add", op_error("add", two, |g, v| g.add(v[0], v[1]))),
        ("sub", op_error("sub", two, |g, v| g.sub(v[0], v[1]))),
        ("mul", op_error("mul", two, |g, v| g.mul(v[0], v[1]))),
        ("neg", op_error("neg", one, |g, v| g.neg(v[0]))),
        ("scale", op_error("scale", one, |g, v| g.scale(v[0], -2.5))),
        ("relu", op_error("relu", one, |g, v| g.relu(v[0]))),
        ("abs", op_error("abs", one, |g, v| g.abs(v[0]))),
        ("recip", op_error("recip", pos, |g, v| g.recip(v[0]))),
        ("sqrt", op_error("sqrt", pos, |g, v| g.sqrt(v[0]))),
    ]
}

pub fn shape_op_errors() -> Vec<(&'static str, f64)> {
    let mat = |rng: &mut seed::Rng| {
        let (r, c) = dims(rng);
        Case { inputs: vec![uniform(rng, &[r, c])], out_len: r * c }
    };
    let vec3 = |rng: &mut seed::Rng| Case { inputs: vec![uniform(rng, &[3])], out_len: 12 };
    let scalar = |rng: &mut seed::Rng| Case { inputs: vec![uniform(rng, &[])], out_len: 6 };
    vec![
        ("sum", op_error("sum", mat, |g, v| g.sum(v[0]))),
        ("mean", op_error("mean", mat, |g, v| g.mean(v[0]))),
        ("transpose", op_error("transpose", mat, |g, v| g.transpose(v[0]))),
        ("sum_rows", op_error("sum_rows", mat, |g, v| g.sum_rows(v[0]))),
        ("sum_cols", op_error("sum_cols", mat, |g, v| g.sum_cols(v[0]))),
        (
            "reshape",
            op_error("reshape", mat, |g, v| {
                let n = g.shape(v[0]).iter().product::<usize>();
                g.reshape(v[0], &[n])
            }),
        ),
        ("softmax", op_error("softmax", mat, |g, v| g.softmax(v[0]))),
        ("broadcast_rows", op_error("broadcast_rows", vec3, |g, v| g.broadcast_rows(v[0], 4))),
        ("broadcast_cols", op_error("broadcast_cols", vec3, |g, v| g.broadcast_cols(v[0], 4))),
        ("expand", op_error("expand", scalar, |g, v| g.expand(v[0], &[2, 3]))),
    ]
}

pub fn linear_op_errors() -> Vec<(&'static str, f64)> {
    let mm = |rng: &mut seed::Rng| {
        let (r, k) = dims(rng);
        let c = rng.random_range(1..5);
        Case { inputs: vec![uniform(rng, &[r, k]), uniform(rng, &[k, c])], out_len: r * c }
    };
    let aff = |rng: &mut seed::Rng| {
        let (r, k) = dims(rng);
        let c = rng.random_range(1..5);
        Case { inputs: vec![uniform(rng, &[r, k]), uniform(rng, &[k, c]), uniform(rng, &[c])], out_len: r * c }
    };
    let conv = |rng: &mut seed::Rng| {
        let (n, ci) = (rng.random_range(1..3), rng.random_range(1..3));
        let co = rng.random_range(1..4);
        let side = rng.random_range(3..6);
        let k = rng.random_range(1..4);
        let o = side - k + 1;
        Case {
            inputs: vec![uniform(rng, &[n, ci, side, side]), uniform(rng, &[co, ci, k, k])],
            out_len: n * co * o * o,
        }
    };
    let pool = |rng: &mut seed::Rng| {
        let c = rng.random_range(1..3);
        Case { inputs: vec![uniform(rng, &[2, c, 4, 4])], out_len: 2 * c * 4 }
    };
    vec![
        ("matmul", op_error("matmul", mm, |g, v| g.matmul(v[0], v[1]))),
        ("affine", op_error("affine", aff, |g, v| g.affine(v[0], v[1], v[2]))),
        ("conv2d", op_error("conv2d", conv, |g, v| g.conv2d(v[0], v[1]))),
        ("avg_pool2d", op_error("avg_pool2d", pool, |g, v| g.avg_pool2d(v[0], 2))),
    ]
}

pub fn cross_entropy_error() -> f64 {
    let mut label_rng = seed::labeled_rng(7, "labels");
    let labels: Vec<Vec<usize>> = (0..CASES).map(|_| (0..4).map(|_| label_rng.random_range(0..3)).collect()).collect();
    let mut rng = seed::labeled_rng(7, "softmax_cross_entropy");
    let mut worst: f64 = 0.0;
    for y in &labels {
        let x = vec![uniform(&mut rng, &[4, 3]).map(|v| 3.0 * v)];
        let build = |g: &mut Graph, v: &[NodeId]| g.softmax_cross_entropy(v[0], y);
        worst = worst.max(rel_err(&analytic(&build, &x), &numeric(&build, &x)));
    }
    worst
}

/// Every differentiable op with its worst relative error.
pub fn all_op_errors() -> Vec<(&'static str, f64)> {
    let mut all = elementwise_errors();
    all.extend(shape_op_errors());
    all.extend(linear_op_errors());
    all.push(("softmax_cross_entropy", cross_entropy_error()));
    all
}

fn penalty_of(model: &Model, params: &ParamSet, x: &Tensor, y: &[usize], reg: &RegConfig) -> (f64, Vec<f64>) {
    let mg = model.build(params, x, Some(y), &BuildOptions::default()).unwrap();
    let mut g = mg.graph;
    let loss = mg.loss.unwrap();
    let pen = match reg.family {
        RegFamily::L1Grad => l1_grad_penalty(&mut g, loss, &mg.weights, &mg.activations, reg),
        _ => l2_grad_penalty(&mut g, loss, &mg.weights, &mg.activations, reg),
    }
    .unwrap();
    let value = g.expect_value(pen).unwrap().item();
    let grads = g.backward(pen, &mg.params).unwrap();
    (value, mg.params.iter().flat_map(|p| grads.get(*p).unwrap().data().to_vec()).collect())
}

/// Relative error between the analytic penalty gradient and central differences.
pub fn penalty_fd(model: &Model, params: &ParamSet, x: &Tensor, y: &[usize], reg: &RegConfig) -> f64 {
    let (_, a) = penalty_of(model, params, x, y, reg);
    let mut n = Vec::new();
    for i in 0..params.len() {
        for j in 0..params.params[i].value.numel() {
            let mut p = params.clone();
            p.params[i].value.data_mut()[j] += STEP;
            let up = penalty_of(model, &p, x, y, reg).0;
            p.params[i].value.data_mut()[j] -= 2.0 * STEP;
            let down = penalty_of(model, &p, x, y, reg).0;
            n.push((up - down) / (2.0 * STEP));
        }
    }
    rel_err(&a, &n)
}
