#![allow(dead_code)]

use fgga::array::Array;
use fgga::autodiff::{ExprGraph, NodeId};
use fgga::gcnattn::TrainBatch;
use fgga::nn::{Activation, Mlp};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, r: &mut impl Rng) -> Array {
    Array::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Central differences of scalar `out` with respect to input node `x`.
pub fn numeric_grad(g: &mut ExprGraph, out: NodeId, x: NodeId, h: f64) -> Array {
    let base = g.eval_array(x).unwrap();
    let mut grad = Array::zeros(base.shape());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        g.bind(x, plus).unwrap();
        let fp = g.eval_scalar(out).unwrap();
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        g.bind(x, minus).unwrap();
        let fm = g.eval_scalar(out).unwrap();
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g.bind(x, base).unwrap();
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-6)`.
pub fn rel_err(a: &Array, b: &Array) -> f64 {
    let diff = a.sub(b).unwrap().frobenius_norm();
    diff / a.frobenius_norm().max(b.frobenius_norm()).max(1e-6)
}

/// Autodiff gradient versus central differences for every listed input.
pub fn check_gradients(g: &mut ExprGraph, out: NodeId, inputs: &[NodeId]) -> f64 {
    let analytic = g.gradient_values(out, inputs).unwrap();
    inputs
        .iter()
        .zip(&analytic)
        .map(|(&x, a)| rel_err(a, &numeric_grad(g, out, x, 1e-5)))
        .fold(0.0, f64::max)
}

pub fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::None => v,
        Activation::Relu => v.max(0.0),
        Activation::LeakyRelu(s) => {
            if v > 0.0 {
                v
            } else {
                s * v
            }
        }
    }
}

/// Straight-line MLP: explicit loops over rows and units.
pub fn mlp_oracle(net: &Mlp, x: &Array) -> Array {
    let mut rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row_slice(i).to_vec()).collect();
    for (layer, &a) in net.layers.iter().zip(&net.activations) {
        rows = rows
            .iter()
            .map(|r| {
                (0..layer.weight.rows())
                    .map(|o| {
                        let mut z = layer.bias.data()[o];
                        for (i, v) in r.iter().enumerate() {
                            z += layer.weight.get(o, i) * v;
                        }
                        act(a, z)
                    })
                    .collect()
            })
            .collect();
    }
    let cols = net.k_out();
    Array::matrix(rows.len(), cols, rows.concat()).unwrap()
}

/// Mlp with random weights and biases in `[-1, 1]`.
pub fn random_mlp(widths: &[usize], hidden: Activation, out: Activation, r: &mut impl Rng) -> Mlp {
    let mut net = Mlp::new(widths, hidden, out, r);
    for l in &mut net.layers {
        l.bias = uniform(1, l.bias.cols(), -1.0, 1.0, r);
    }
    net
}

pub fn dense_matmul(a: &Array, b: &Array) -> Array {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a.get(i, t) * b.get(t, j)).sum();
        }
    }
    Array::matrix(n, m, out).unwrap()
}

/// `D^{-1/2} Â D^{-1/2}` as two dense matrix products.
pub fn normalize_oracle(a_hat: &Array) -> Array {
    let n = a_hat.rows();
    let mut d = Array::zeros(&[n, n]);
    for i in 0..n {
        d.set(i, i, 1.0 / a_hat.row_slice(i).iter().sum::<f64>().sqrt());
    }
    dense_matmul(&dense_matmul(&d, a_hat), &d)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// All-pairs cosine, sort each row, keep the top k, then symmetrize.
pub fn attention_oracle(w: &Array, k: usize) -> (Array, Array) {
    let n = w.rows();
    let c: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| cos(w.row_slice(i), w.row_slice(j))).collect()).collect();
    let mut keep = vec![vec![false; n]; n];
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (c[i][j], j)).collect();
        others.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        for &(_, j) in others.iter().take(k) {
            keep[i][j] = true;
            keep[j][i] = true;
        }
    }
    let mut b = Array::zeros(&[n, n]);
    let mut a = Array::zeros(&[n, n]);
    for i in 0..n {
        let mut z = 0.0;
        for j in 0..n {
            if keep[i][j] {
                b.set(i, j, c[i][j]);
                z += c[i][j].exp();
            }
        }
        for j in 0..n {
            if keep[i][j] {
                a.set(i, j, c[i][j].exp() / z);
            }
        }
    }
    (b, a)
}

/// Softmax of each row computed on its own, then the mean negative log.
pub fn ce_oracle(w: &Array, n_classes: usize, batch: &TrainBatch) -> f64 {
    let mut total = 0.0;
    for (n, &y) in batch.labels.iter().enumerate() {
        let x = batch.features.row_slice(n);
        let s: Vec<f64> = (0..n_classes).map(|c| w.row_slice(c).iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        let m = s.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
        total -= ((s[y] - m).exp() / z).ln();
    }
    total / batch.labels.len() as f64
}

/// `act(P·H·Φ)` layer by layer with dense products; no activation after the
/// last layer.
pub fn gcn_oracle(p: &Array, emb: &Array, phi: &[Array], slope: f64) -> Array {
    let mut h = emb.clone();
    for (l, w) in phi.iter().enumerate() {
        h = dense_matmul(&dense_matmul(p, &h), w);
        if l + 1 < phi.len() {
            h = h.map(|v| if v > 0.0 { v } else { slope * v });
        }
    }
    h
}
