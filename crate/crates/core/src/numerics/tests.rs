use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use super::graph::matmul_raw;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn linear_identity() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::eye(2));
    let w = g.constant(Tensor::eye(2));
    let b = g.constant(Tensor::zeros(&[2]));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.data(y), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn linear_hand_sum() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
    let w = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]));
    let b = g.constant(Tensor::scalar(3.0));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.shape(y), &[1, 1]);
    assert_eq!(g.item(y), 6.0);
}

#[test]
fn linear_matches_triple_loop() {
    let mut r = rng(7);
    let x = Tensor::randn(&[3, 4], 1.0, &mut r);
    let w = Tensor::randn(&[4, 2], 1.0, &mut r);
    let b = Tensor::randn(&[2], 1.0, &mut r);
    let mut oracle = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            let mut s = b.data()[j];
            for k in 0..4 {
                s += x.at(i, k) * w.at(k, j);
            }
            oracle[i * 2 + j] = s;
        }
    }
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
    let y = g.linear(xv, wv, bv).unwrap();
    let err = g.data(y).iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "max diff {err}");
}

#[test]
fn linear_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[2, 2]));
    match g.matmul(x, w) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[3], vec![0.0; 3]).unwrap());
    let y = g.softmax(x).unwrap();
    for v in g.data(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
    let y = g.softmax(x).unwrap();
    assert!((g.data(y)[0] - 1.0).abs() < 1e-12);
    assert!(g.data(y)[1].abs() < 1e-12);
}

/// exp / Σexp with compensated summation; no max shift, so only valid for
/// moderate inputs.
fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &e in &exps {
        let t = sum + e;
        comp += if sum.abs() >= e.abs() { (sum - t) + e } else { (e - t) + sum };
        sum = t;
    }
    let total = sum + comp;
    exps.iter().map(|e| e / total).collect()
}

#[test]
fn softmax_random_vector_matches_direct_formula() {
    let mut r = rng(11);
    let x = Tensor::randn(&[5], 2.0, &mut r);
    let oracle = softmax_oracle(x.data());
    let mut g = Graph::new();
    let xv = g.constant(x);
    let y = g.softmax(xv).unwrap();
    let sum: f64 = g.data(y).iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
    for (a, b) in g.data(y).iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::filled(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(Tensor::from_rows(&[vec![5.0, 5.0, 5.0]]));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert_eq!(g.data(y), &[0.0, 0.0, 0.0]);

    let gamma = g.constant(Tensor::filled(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::from_rows(&[vec![1.0, -1.0]]));
    let y = g.layer_norm(x, gamma, beta, 1e-300).unwrap();
    assert!((g.data(y)[0] - 1.0).abs() < 1e-15);
    assert!((g.data(y)[1] + 1.0).abs() < 1e-15);

    assert!(matches!(g.layer_norm(x, gamma, beta, 0.0), Err(Error::Domain(_))));
}

#[test]
fn layer_norm_moments() {
    let mut r = rng(3);
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[2, 4], 10.0, &mut r));
    let gamma = g.constant(Tensor::filled(&[4], 1.0));
    let beta = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    for row in g.data(y).chunks(4) {
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

#[test]
fn grad_check_square() {
    let x = Tensor::scalar(3.0);
    let report = grad_check(
        |g, p| {
            let y = g.square(p[0])?;
            g.sum(y)
        },
        &[x.clone()],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-8);

    let mut g = Graph::new();
    let xv = g.leaf(x.with_grad());
    let y = g.square(xv).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(xv).unwrap(), &[6.0]);
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut r = rng(5);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::randn(&[3, 4], 1.0, &mut r).with_grad());
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn grad_check_rejects_bad_eps_and_non_finite() {
    let x = Tensor::scalar(1.0);
    let f = |g: &mut Graph, p: &[Var]| g.sum(p[0]);
    assert!(matches!(grad_check(f, &[x.clone()], 1e-2), Err(Error::Domain(_))));
    let x = Tensor::scalar(1e-6);
    let r = grad_check(
        |g, p| {
            let l = g.log(p[0])?;
            g.sum(l)
        },
        &[x],
        1e-5,
    );
    assert!(matches!(r, Err(Error::NonFinite(_))));
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(-1.0));
    assert!(matches!(g.log(x), Err(Error::NonFinite(_))));
    let x = g.constant(Tensor::scalar(1e3));
    assert!(matches!(g.exp(x), Err(Error::NonFinite(_))));
    assert!(Tensor::new(&[1], vec![f64::NAN]).is_err());
}

#[test]
fn backward_twice_doubles_gradients_exactly() {
    let mut r = rng(9);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::randn(&[3, 4], 1.0, &mut r).with_grad());
    let w = g.leaf(Tensor::randn(&[4, 2], 1.0, &mut r).with_grad());
    let b = g.leaf(Tensor::randn(&[2], 1.0, &mut r).with_grad());
    let y = g.linear(x, w, b).unwrap();
    let t = g.tanh(y).unwrap();
    let s = g.sum(t).unwrap();
    g.backward(s).unwrap();
    let once: Vec<Vec<f64>> = [x, w, b].iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
    g.backward(s).unwrap();
    for (v, first) in [x, w, b].iter().zip(&once) {
        for (a, b) in g.grad(*v).unwrap().iter().zip(first) {
            assert_eq!(*a, 2.0 * b);
        }
    }
}

/// Builds a scalar readout `Σ c ⊙ out` with fixed random weights so every
/// output entry contributes a distinct coefficient.
fn readout(g: &mut Graph, out: Var, seed: u64) -> crate::error::Result<Var> {
    let shape = g.shape(out).to_vec();
    let c = g.constant(Tensor::randn(&shape, 1.0, &mut rng(seed ^ 0xabc)));
    let m = g.mul(out, c)?;
    g.sum(m)
}

type Prim = fn(&mut Graph, &[Var]) -> crate::error::Result<Var>;

fn check_primitive(name: &str, shapes: &[Vec<usize>], positive: bool, op: Prim) {
    for seed in 0..10u64 {
        let mut r = rng(seed * 31 + 1);
        let params: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let mut t = Tensor::randn(s, 1.0, &mut r);
                if positive {
                    t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
                }
                t
            })
            .collect();
        let rep = grad_check(
            |g, p| {
                let out = op(g, p)?;
                readout(g, out, seed)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{name} seed {seed}: {rep:?}");
    }
}

#[test]
fn every_primitive_passes_grad_check() {
    let m = |r: usize, c: usize| vec![r, c];
    check_primitive("matmul", &[m(4, 3), m(3, 5)], false, |g, p| g.matmul(p[0], p[1]));
    check_primitive("matmul_bt", &[m(4, 3), m(6, 3)], false, |g, p| g.matmul_bt(p[0], p[1]));
    check_primitive("linear", &[m(5, 3), m(3, 2), vec![2]], false, |g, p| g.linear(p[0], p[1], p[2]));
    check_primitive("add", &[m(3, 3), m(3, 3)], false, |g, p| g.add(p[0], p[1]));
    check_primitive("sub", &[m(3, 3), m(3, 3)], false, |g, p| g.sub(p[0], p[1]));
    check_primitive("mul", &[m(3, 2), m(3, 2)], false, |g, p| g.mul(p[0], p[1]));
    check_primitive("div", &[m(3, 2), m(3, 2)], true, |g, p| g.div(p[0], p[1]));
    check_primitive("scale_by", &[vec![1], m(4, 4)], false, |g, p| g.scale_by(p[0], p[1]));
    check_primitive("scale", &[m(2, 5)], false, |g, p| g.scale(p[0], -1.7));
    check_primitive("shift", &[m(2, 5)], false, |g, p| g.shift(p[0], 0.3));
    check_primitive("exp", &[m(3, 3)], false, |g, p| g.exp(p[0]));
    check_primitive("log", &[m(3, 3)], true, |g, p| g.log(p[0]));
    check_primitive("sqrt", &[m(3, 3)], true, |g, p| g.sqrt(p[0]));
    check_primitive("tanh", &[m(3, 3)], false, |g, p| g.tanh(p[0]));
    check_primitive("sigmoid", &[m(3, 3)], false, |g, p| g.sigmoid(p[0]));
    check_primitive("gelu", &[m(6, 6)], false, |g, p| g.gelu(p[0]));
    check_primitive("relu", &[m(6, 6)], false, |g, p| g.relu(p[0]));
    check_primitive("abs", &[m(6, 6)], false, |g, p| g.abs(p[0]));
    check_primitive("square", &[m(3, 3)], false, |g, p| g.square(p[0]));
    check_primitive("clamp", &[m(6, 6)], false, |g, p| g.clamp(p[0], -0.5, 0.5));
    check_primitive("sum", &[m(3, 4)], false, |g, p| g.sum(p[0]));
    check_primitive("mean", &[m(3, 4)], false, |g, p| g.mean(p[0]));
    check_primitive("mean_rows", &[m(5, 4)], false, |g, p| g.mean_rows(p[0]));
    check_primitive("softmax", &[m(4, 6)], false, |g, p| g.softmax(p[0]));
    check_primitive("layer_norm", &[m(4, 6), vec![6], vec![6]], false, |g, p| {
        g.layer_norm(p[0], p[1], p[2], 1e-5)
    });
    check_primitive("transpose", &[m(3, 5)], false, |g, p| g.transpose(p[0]));
    check_primitive("gather_broadcast", &[m(2, 3)], false, |g, p| {
        g.gather(p[0], vec![0, 0, 5, 1, 3, 3, 3, 2], &[2, 4])
    });
    check_primitive("slice_cols", &[m(4, 6)], false, |g, p| g.slice_cols(p[0], 2, 3));
    check_primitive("concat_cols", &[m(3, 2), m(3, 4)], false, |g, p| g.concat_cols(&[p[0], p[1]]));
    check_primitive("replace_rows", &[m(4, 3), vec![3]], false, |g, p| {
        g.replace_rows(p[0], p[1], vec![true, false, true, false])
    });
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_for_large_inputs(
        vals in prop::collection::vec(-1e4f64..1e4, 1..12),
    ) {
        let mut g = Graph::new();
        let n = vals.len();
        let x = g.constant(Tensor::new(&[1, n], vals).unwrap());
        let y = g.softmax(x).unwrap();
        let s: f64 = g.data(y).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(g.data(y).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn matmul_matches_loop(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6) {
        let mut r = rng(seed);
        let a: Vec<f64> = (0..m * k).map(|_| r.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| r.random_range(-2.0..2.0)).collect();
        let out = matmul_raw(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let s: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                prop_assert!((out[i * n + j] - s).abs() < 1e-12);
            }
        }
    }
}
