//! Reverse-mode automatic differentiation with support for gradients of
//! gradients.

mod backward;
mod graph;
pub(crate) mod kernels;

pub use backward::GradientBundle;
pub use graph::{Graph, NodeId, Op};

use crate::error::Result;
use crate::quant::QuantScheme;

/// Insert a straight-through quantization node after `input`.
pub fn ste_quantize_node(graph: &mut Graph, input: NodeId, scheme: QuantScheme) -> Result<NodeId> {
    graph.ste_quantize(input, scheme)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::error::Error;
    use crate::tensor::Tensor;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn forward_examples() {
        let mut g = Graph::new();
        let x = g.placeholder(&[]);
        let sq = g.mul(x, x).unwrap();
        assert_eq!(g.forward(&HashMap::from([(x, s(3.0))]), sq).unwrap().item(), 9.0);

        let r = g.relu(x).unwrap();
        assert_eq!(g.forward(&HashMap::from([(x, s(-2.0))]), r).unwrap().item(), 0.0);

        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 2]));
        let p = g.softmax(z).unwrap();
        assert_eq!(g.value(p).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn forward_errors() {
        let mut g = Graph::new();
        let x = g.placeholder(&[2]);
        let y = g.placeholder(&[2]);
        let z = g.add(x, y).unwrap();
        let err = g.forward(&HashMap::from([(x, Tensor::vector(vec![1.0, 2.0]))]), z).unwrap_err();
        assert!(matches!(err, Error::Unbound(id) if id == y.index()));

        let err = g.forward(&HashMap::from([(x, Tensor::vector(vec![1.0]))]), z).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));

        let w = g.placeholder(&[3]);
        assert!(matches!(g.add(x, w), Err(Error::Shape { .. })));

        let mut g = Graph::new();
        let a = g.variable(s(0.0));
        let r = g.recip(a);
        assert!(matches!(r, Err(Error::NonFinite { op: "recip", .. })));
        // the failed node is not left behind
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.variable(s(3.0));
        let f = g.mul(x, x).unwrap();
        assert_eq!(g.backward(f, &[x]).unwrap().get(x).unwrap().item(), 6.0);

        let mut g = Graph::new();
        let x = g.variable(s(2.0));
        let y = g.variable(s(5.0));
        let f = g.mul(x, y).unwrap();
        let b = g.backward(f, &[x, y]).unwrap();
        assert_eq!(b.get(x).unwrap().item(), 5.0);
        assert_eq!(b.get(y).unwrap().item(), 2.0);
        // backward leaves the graph untouched
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let y = g.mul(x, x).unwrap();
        assert!(matches!(g.backward(y, &[x]), Err(Error::NotScalar { .. })));
        let s = g.sum(y).unwrap();
        assert!(matches!(g.backward(s, &[NodeId(99)]), Err(Error::UnknownNode(99))));
    }

    #[test]
    fn unrelated_variable_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(s(1.0));
        let unused = g.variable(Tensor::vector(vec![1.0, 1.0]));
        let f = g.mul(x, x).unwrap();
        let b = g.backward(f, &[x, unused]).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn second_order_examples() {
        let mut g = Graph::new();
        let x = g.variable(s(2.0));
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let d1 = g.grad_as_node(x3, x).unwrap();
        assert_eq!(g.value(d1).unwrap().item(), 12.0);
        let d2 = g.backward(d1, &[x]).unwrap();
        assert_eq!(d2.get(x).unwrap().item(), 12.0);

        // |3x^2| at x = 2
        let a = g.abs(d1).unwrap();
        let pen = g.sum(a).unwrap();
        assert_eq!(g.value(pen).unwrap().item(), 12.0);
        assert_eq!(g.backward(pen, &[x]).unwrap().get(x).unwrap().item(), 12.0);
    }

    #[test]
    fn subgradient_conventions_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![0.0, 0.0]));
        let a = g.abs(x).unwrap();
        let r = g.relu(x).unwrap();
        let t = g.add(a, r).unwrap();
        let f = g.sum(t).unwrap();
        assert_eq!(g.backward(f, &[x]).unwrap().get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn seed_linearity() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![0.3, -1.2, 2.0]));
        let y = g.mul(x, x).unwrap();
        let y = g.abs(y).unwrap();
        let f = g.sum(y).unwrap();
        let one = g.backward_with_seed(f, &[x], 1.0).unwrap();
        let two = g.backward_with_seed(f, &[x], 2.0).unwrap();
        for (a, b) in one.get(x).unwrap().data().iter().zip(two.get(x).unwrap().data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn ste_examples() {
        let scheme = QuantScheme::symmetric(3, 1.0 / 3.0).unwrap();
        let mut g = Graph::new();
        let x = g.variable(s(0.4));
        let q = ste_quantize_node(&mut g, x, scheme).unwrap();
        assert!((g.value(q).unwrap().item() - 1.0 / 3.0).abs() < 1e-15);
        let f = g.sum(q).unwrap();
        assert_eq!(g.backward(f, &[x]).unwrap().get(x).unwrap().item(), 1.0);

        let mut g = Graph::new();
        let x = g.variable(s(2.0 / 3.0));
        let q = ste_quantize_node(&mut g, x, scheme).unwrap();
        assert_eq!(g.value(q).unwrap().item(), 2.0 / 3.0);
    }

    #[test]
    fn ste_chain_matches_unquantized_graph_at_quantized_point() {
        // (ste(w) . x - t)^2 versus (v . x - t)^2 with v = quantize(w)
        let scheme = QuantScheme::symmetric(4, 0.1).unwrap();
        let w0 = Tensor::new(vec![1, 3], vec![0.23, -0.41, 0.07]).unwrap();
        let x0 = Tensor::new(vec![3, 1], vec![1.5, 0.5, -2.0]).unwrap();
        let t0 = Tensor::new(vec![1, 1], vec![0.3]).unwrap();
        let loss = |g: &mut Graph, w: NodeId| {
            let x = g.constant(x0.clone());
            let t = g.constant(t0.clone());
            let p = g.matmul(w, x).unwrap();
            let d = g.sub(p, t).unwrap();
            let sq = g.mul(d, d).unwrap();
            g.sum(sq).unwrap()
        };
        let mut g1 = Graph::new();
        let w = g1.variable(w0.clone());
        let q = ste_quantize_node(&mut g1, w, scheme).unwrap();
        let l1 = loss(&mut g1, q);
        let grad_ste = g1.backward(l1, &[w]).unwrap().get(w).unwrap().clone();

        let mut g2 = Graph::new();
        let v = g2.variable(crate::quant::quantize(&w0, &scheme));
        let l2 = loss(&mut g2, v);
        let grad_plain = g2.backward(l2, &[v]).unwrap().get(v).unwrap().clone();
        assert_eq!(grad_ste, grad_plain);
        assert_eq!(g1.value(l1), g2.value(l2));
    }

    #[test]
    fn hard_quantize_has_no_gradient_rule() {
        let scheme = QuantScheme::symmetric(4, 0.1).unwrap();
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![0.12, 0.3]));
        let q = g.quantize(x, scheme).unwrap();
        let f = g.sum(q).unwrap();
        assert!(matches!(g.backward(f, &[x]), Err(Error::MissingRule("quantize"))));
        assert!(matches!(g.grad_as_node(f, x), Err(Error::MissingRule("quantize"))));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let x = g.variable(Tensor::new(vec![2, 3], vec![0.1, -0.7, 2.2, 1.3, -0.4, 0.9]).unwrap());
            let w = g.variable(Tensor::new(vec![3, 2], vec![0.5, -1.1, 0.3, 0.8, -0.2, 0.6]).unwrap());
            let b = g.variable(Tensor::vector(vec![0.05, -0.03]));
            let z = g.affine(x, w, b).unwrap();
            let l = g.softmax_cross_entropy(z, &[1, 0]).unwrap();
            g.value(l).unwrap().item().to_bits()
        };
        assert_eq!(build(), build());
    }
}
