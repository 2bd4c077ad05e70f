mod common;

use common::{check_gradients, mlp_oracle, random_mlp, rel_err, rng, uniform};
use fgga::array::Array;
use fgga::autodiff::ExprGraph;
use fgga::nn::Activation;
use proptest::prelude::*;

#[test]
fn three_layer_mlp_matches_straight_line_code() {
    let mut r = rng(7);
    let net = random_mlp(&[5, 7, 6, 3], Activation::LeakyRelu(0.2), Activation::None, &mut r);
    let x = uniform(9, 5, -2.0, 2.0, &mut r);
    let mut g = ExprGraph::new();
    let xi = g.constant(x.clone()).unwrap();
    let (_, y) = net.forward(&mut g, xi).unwrap();
    let got = g.eval_array(y).unwrap();
    assert!(got.max_abs_diff(&mlp_oracle(&net, &x)) < 1e-12);
    assert!(net.mlp_forward(&x).unwrap().max_abs_diff(&got) < 1e-12);
}

#[test]
fn mlp_parameter_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let net = random_mlp(&[4, 6, 2], Activation::LeakyRelu(0.2), Activation::None, &mut r);
        let mut g = ExprGraph::new();
        let x = g.constant(uniform(5, 4, -2.0, 2.0, &mut r)).unwrap();
        let (bound, y) = net.forward(&mut g, x).unwrap();
        let sq = g.square(y).unwrap();
        let loss = g.mean(sq).unwrap();
        let mut inputs = bound.param_ids();
        inputs.push(x);
        assert!(check_gradients(&mut g, loss, &inputs) < 1e-4);
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut r = rng(11);
    let mut g = ExprGraph::new();
    let a = g.constant(uniform(4, 6, -2.0, 2.0, &mut r)).unwrap();
    let b = g.constant(uniform(4, 2, -2.0, 2.0, &mut r)).unwrap();
    let left = g.slice(a, 1, 1, 4).unwrap();
    let cat = g.concat(&[left, b], 1).unwrap();
    let lse = g.row_logsumexp(cat).unwrap();
    let norms = g.row_norms(cat).unwrap();
    let both = g.mul(lse, norms).unwrap();
    let cols = g.sum_axis(cat, 0).unwrap();
    let wide = g.broadcast(cols, 4, 5).unwrap();
    let t = g.transpose(wide).unwrap();
    let prod = g.matmul(cat, t).unwrap();
    let e = g.exp(prod).unwrap();
    let s1 = g.mean(e).unwrap();
    let s1 = g.add_scalar(s1, 1.0).unwrap();
    let l = g.log(s1).unwrap();
    let m = g.max_axis(cat, 1).unwrap();
    let ms = g.sum(m).unwrap();
    let bs = g.sum(both).unwrap();
    let out0 = g.add(l, ms).unwrap();
    let out = g.add(out0, bs).unwrap();
    assert!(check_gradients(&mut g, out, &[a, b]) < 1e-4);
}

#[test]
fn reevaluation_is_bitwise_identical() {
    let mut r = rng(3);
    let net = random_mlp(&[3, 8, 1], Activation::LeakyRelu(0.2), Activation::None, &mut r);
    let mut g = ExprGraph::new();
    let x = g.constant(uniform(6, 3, -1.0, 1.0, &mut r)).unwrap();
    let (bound, y) = net.forward(&mut g, x).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.gradient(s, &[x]).unwrap();
    let first = g.gradient_values(s, &bound.param_ids()).unwrap();
    let gx1 = g.eval_array(grads[0]).unwrap();
    let v = g.eval_array(x).unwrap();
    g.bind(x, v).unwrap();
    let second = g.gradient_values(s, &bound.param_ids()).unwrap();
    let gx2 = g.eval_array(grads[0]).unwrap();
    assert_eq!(gx1.data(), gx2.data());
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn gradient_nodes_can_be_differentiated_again() {
    // f = Σ x³: ∇f = 3x², and Σ ∇f has gradient 6x.
    let mut g = ExprGraph::new();
    let xv = Array::row(vec![0.5, -1.5, 2.0]);
    let x = g.constant(xv.clone()).unwrap();
    let sq = g.square(x).unwrap();
    let cube = g.mul(sq, x).unwrap();
    let f = g.sum(cube).unwrap();
    let grad = g.gradient(f, &[x]).unwrap()[0];
    let s = g.sum(grad).unwrap();
    let h = g.gradient_values(s, &[x]).unwrap();
    assert!(h[0].max_abs_diff(&xv.scale(6.0)) < 1e-12);
    assert!(check_gradients(&mut g, s, &[x]) < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_is_linear_in_the_output(
        vals in prop::collection::vec(-2.0f64..2.0, 6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let mut g = ExprGraph::new();
        let x = g.constant(Array::matrix(2, 3, vals).unwrap()).unwrap();
        let e = g.exp(x).unwrap();
        let f = g.sum(e).unwrap();
        let n = g.row_norms(x).unwrap();
        let h = g.sum(n).unwrap();
        let fa = g.scale(f, a).unwrap();
        let hb = g.scale(h, b).unwrap();
        let combo = g.add(fa, hb).unwrap();
        let gf = g.gradient_values(f, &[x]).unwrap().remove(0);
        let gh = g.gradient_values(h, &[x]).unwrap().remove(0);
        let gc = g.gradient_values(combo, &[x]).unwrap().remove(0);
        let expect = gf.scale(a).add(&gh.scale(b)).unwrap();
        prop_assert!(gc.max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn norm_hessian_vector_product(
        xs in prop::collection::vec(0.2f64..2.0, 4),
        signs in prop::collection::vec(any::<bool>(), 4),
        v in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let xs: Vec<f64> = xs.iter().zip(&signs).map(|(x, &s)| if s { *x } else { -x }).collect();
        let mut g = ExprGraph::new();
        let x = g.constant(Array::row(xs.clone())).unwrap();
        let vn = g.constant(Array::row(v.clone())).unwrap();
        let n = g.row_norms(x).unwrap();
        let grad = g.gradient(n, &[x]).unwrap()[0];
        let gv = g.mul(grad, vn).unwrap();
        let s = g.sum(gv).unwrap();
        let hv = g.gradient_values(s, &[x]).unwrap().remove(0);
        // H = I/‖x‖ − x xᵀ/‖x‖³.
        let r = (xs.iter().map(|a| a * a).sum::<f64>() + 1e-12).sqrt();
        let xv: f64 = xs.iter().zip(&v).map(|(a, b)| a * b).sum();
        let expect: Vec<f64> = xs.iter().zip(&v).map(|(xi, vi)| vi / r - xi * xv / r.powi(3)).collect();
        prop_assert!(rel_err(&hv, &Array::row(expect)) < 1e-10);
    }

    #[test]
    fn random_mlp_gradients_match_finite_differences(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let net = random_mlp(&[3, 5, 2], Activation::LeakyRelu(0.2), Activation::None, &mut r);
        let mut g = ExprGraph::new();
        let x = g.constant(uniform(4, 3, -2.0, 2.0, &mut r)).unwrap();
        let (bound, y) = net.forward(&mut g, x).unwrap();
        let lse = g.row_logsumexp(y).unwrap();
        let loss = g.mean(lse).unwrap();
        let mut inputs = bound.param_ids();
        inputs.push(x);
        prop_assert!(check_gradients(&mut g, loss, &inputs) < 1e-4);
    }
}
