//! Finite-difference checks of first- and second-order gradients.

mod common;

use common::{analytic, away_from_zero, numeric, penalty_fd, rel_err, uniform};
use qrobust::autodiff::{Graph, NodeId};
use qrobust::data::gen_two_moons;
use qrobust::model::{Model, ModelSpec};
use qrobust::regularizers::{RegConfig, RegFamily};
use qrobust::seed;
use qrobust::Result;

fn assert_all(errors: Vec<(&str, f64)>) {
    for (name, e) in errors {
        assert!(e < 1e-4, "{name}: worst relative error {e:e}");
    }
}

#[test]
fn elementwise_ops() {
    assert_all(common::elementwise_errors());
}

#[test]
fn reductions_and_broadcasts() {
    assert_all(common::shape_op_errors());
}

#[test]
fn linear_ops() {
    assert_all(common::linear_op_errors());
}

#[test]
fn cross_entropy() {
    let e = common::cross_entropy_error();
    assert!(e < 1e-4, "softmax_cross_entropy: {e:e}");
}

/// `|grad_x f|^2` built by graph extension, differentiated again.
fn grad_norm_sq(
    op: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
) -> impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> {
    move |g: &mut Graph, v: &[NodeId]| {
        let f = op(g, v)?;
        let grads = g.grads_as_nodes(f, v)?;
        let mut total = None;
        for gr in grads {
            let sq = g.mul(gr, gr)?;
            let s = g.sum(sq)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        Ok(total.expect("at least one input"))
    }
}

#[test]
fn second_order_rules() {
    let mut rng = seed::labeled_rng(7, "second-order");
    for _ in 0..20 {
        let x = uniform(&mut rng, &[3, 4]);
        let w = away_from_zero(&mut rng, &[4, 2]);
        let b = uniform(&mut rng, &[2]);
        let k = uniform(&mut rng, &[2, 1, 2, 2]);
        let img = uniform(&mut rng, &[2, 1, 5, 5]);

        let mlp = grad_norm_sq(|g: &mut Graph, v: &[NodeId]| {
            let h = g.affine(v[0], v[1], v[2])?;
            let a = g.relu(h)?;
            let t = g.mul(a, a)?;
            let m = g.mean(t)?;
            let s = g.softmax_cross_entropy(h, &[0, 1, 1])?;
            g.add(m, s)
        });
        let inputs = vec![x.clone(), w.clone(), b.clone()];
        let e = rel_err(&analytic(&mlp, &inputs), &numeric(&mlp, &inputs));
        assert!(e < 1e-4, "affine/relu/softmax-ce: {e:e}");

        let conv = grad_norm_sq(|g: &mut Graph, v: &[NodeId]| {
            let c = g.conv2d(v[0], v[1])?;
            let sq = g.mul(c, c)?;
            let p = g.avg_pool2d(sq, 2)?;
            g.sum(p)
        });
        let inputs = vec![img.clone(), k.clone()];
        let e = rel_err(&analytic(&conv, &inputs), &numeric(&conv, &inputs));
        assert!(e < 1e-4, "conv2d/avg_pool2d: {e:e}");

        let lin = grad_norm_sq(|g: &mut Graph, v: &[NodeId]| {
            let m = g.matmul(v[0], v[1])?;
            let a = g.abs(m)?;
            let s = g.sum(a)?;
            let t = g.mul(m, m)?;
            let u = g.sum(t)?;
            g.add(s, u)
        });
        let inputs = vec![x.clone(), w.clone()];
        let e = rel_err(&analytic(&lin, &inputs), &numeric(&lin, &inputs));
        assert!(e < 1e-4, "matmul/abs: {e:e}");
    }
}

#[test]
fn l1_penalty_matches_finite_differences() {
    let data = gen_two_moons(16, 0.2, 3).unwrap();
    let reg = RegConfig::new(RegFamily::L1Grad, 0.1);
    for spec in [ModelSpec::mlp(2, &[6, 5], 2), ModelSpec::mlp(2, &[4], 3)] {
        let model = Model::new(spec).unwrap();
        let labels: Vec<usize> = data.labels.iter().map(|&l| l % model.spec.classes).collect();
        for s in 0..5 {
            let params = model.init_params(s);
            let e = penalty_fd(&model, &params, &data.features, &labels, &reg);
            assert!(e < 1e-3, "seed {s}: relative error {e:e}");
        }
    }
}

#[test]
fn l1_penalty_through_convolutions() {
    let model = Model::new(ModelSpec::tiny_conv(6, 2)).unwrap();
    let mut rng = seed::labeled_rng(1, "images");
    let x = uniform(&mut rng, &[3, 36]);
    let reg = RegConfig::new(RegFamily::L1Grad, 0.1);
    let e = penalty_fd(&model, &model.init_params(2), &x, &[0, 1, 1], &reg);
    assert!(e < 1e-3, "relative error {e:e}");
}

#[test]
fn l2_penalty_matches_finite_differences() {
    let data = gen_two_moons(16, 0.2, 4).unwrap();
    let model = Model::new(ModelSpec::mlp(2, &[5], 2)).unwrap();
    let reg = RegConfig::new(RegFamily::L2Grad, 0.1);
    let e = penalty_fd(&model, &model.init_params(0), &data.features, &data.labels, &reg);
    assert!(e < 1e-3, "relative error {e:e}");
}
