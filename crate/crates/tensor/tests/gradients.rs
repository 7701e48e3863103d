//! Finite-difference checks for every differentiable op plus the backward
//! contract (scalar roots, accumulation, determinism).

use hazebridge_tensor::nn::{Linear, Module};
use hazebridge_tensor::{grad_check, Conv2dSpec, Graph, Result, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).unwrap()
}

/// Weights the output by fixed random coefficients so every output element
/// contributes a distinct gradient.
fn weighted_sum(y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, y.shape(), -1.0, 1.0);
    y.mul(&w)?.sum()
}

fn check(name: &str, x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) {
    let err = grad_check(|x| weighted_sum(&f(x)?, 99), x, EPS).unwrap();
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

#[test]
fn unary_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let pos = rand_tensor(&mut rng, &[3, 4], 0.2, 3.0);
    check("exp", &x, |x| x.exp());
    check("tanh", &x, |x| x.tanh());
    check("sigmoid", &x, |x| x.sigmoid());
    check("silu", &x, |x| x.silu());
    check("square", &x, |x| x.square());
    check("neg", &x, |x| x.neg());
    check("add_scalar", &x, |x| x.add_scalar(0.3));
    check("mul_scalar", &x, |x| x.mul_scalar(-1.7));
    check("log", &pos, |x| x.log());
    check("sqrt", &pos, |x| x.sqrt());
    // piecewise-linear ops are checked away from their kinks
    let away = Tensor::new(
        x.data()
            .iter()
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v })
            .collect(),
        x.shape(),
    )
    .unwrap();
    check("relu", &away, |x| x.relu());
    check("leaky_relu", &away, |x| x.leaky_relu(0.2));
    check("abs", &away, |x| x.abs());
    check("clamp", &away, |x| x.clamp(-1.03, 1.07));
}

#[test]
fn binary_ops_with_broadcasting_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b_row = rand_tensor(&mut rng, &[1, 4], 0.5, 2.0);
    let b_col = rand_tensor(&mut rng, &[3, 1], 0.5, 2.0);
    let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    check("add", &x, |x| x.add(&b_row));
    check("sub", &x, |x| b_col.sub(x));
    check("mul", &x, |x| x.mul(&b_col));
    check("div numerator", &x, |x| x.div(&b_row));
    let denom = rand_tensor(&mut rng, &[3, 1], 0.5, 2.0);
    check("div denominator", &denom, |d| x.div(d));
    check("mul broadcast operand", &b_row, |b| x.mul(b));
}

#[test]
fn reductions_and_softmax_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 4], -1.5, 1.5);
    check("sum", &x, |x| x.sum());
    check("mean", &x, |x| x.mean());
    check("sum_axis", &x, |x| x.sum_axis(1, false));
    check("mean_axis", &x, |x| x.mean_axis(2, true));
    check("sum_axes", &x, |x| x.sum_axes(&[0, 2], false));
    check("min_axis", &x, |x| x.min_axis(1, true));
    check("max_axis", &x, |x| x.max_axis(2, false));
    check("softmax", &x, |x| x.softmax(1));
    check("log_softmax", &x, |x| x.log_softmax(2));
    check("logsumexp", &x, |x| x.logsumexp(0, false));
}

#[test]
fn shape_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let other = rand_tensor(&mut rng, &[2, 2, 4], -1.0, 1.0);
    check("reshape", &x, |x| x.reshape(&[6, 4]));
    check("transpose", &x, |x| x.transpose(0, 2));
    check("permute", &x, |x| x.permute(&[1, 2, 0]));
    check("narrow", &x, |x| x.narrow(1, 1, 2));
    check("index_select", &x, |x| x.index_select(2, &[3, 0, 0, 2]));
    check("concat", &x, |x| {
        Tensor::concat(&[other.clone(), x.clone()], 1)
    });
    check("pad_replicate", &x, |x| x.pad_replicate(2, 1, 1, 3));
    check("upsample_nearest", &x, |x| x.upsample_nearest(2));
}

#[test]
fn matmul_and_conv_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    check("matmul lhs", &a, |a| a.matmul(&b));
    check("matmul rhs", &b, |b| a.matmul(b));
    let a3 = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    check("batched matmul rhs broadcast", &b, |b| a3.matmul(b));
    let x = rand_tensor(&mut rng, &[2, 2, 5, 6], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    for spec in [
        Conv2dSpec {
            stride: 1,
            padding: 1,
        },
        Conv2dSpec {
            stride: 2,
            padding: 0,
        },
    ] {
        check("conv input", &x, |x| x.conv2d(&w, Some(&bias), spec));
        check("conv weight", &w, |w| x.conv2d(w, Some(&bias), spec));
        check("conv bias", &bias, |b| x.conv2d(&w, Some(b), spec));
    }
}

#[test]
fn random_three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layers = [
        Linear::new(&mut rng, 5, 8),
        Linear::new(&mut rng, 8, 8),
        Linear::new(&mut rng, 8, 1),
    ];
    let x = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let target = rand_tensor(&mut rng, &[4, 1], -1.0, 1.0);
    let loss = |x: &Tensor| -> Result<Tensor> {
        let h = layers[0].forward(x)?.tanh()?;
        let h = layers[1].forward(&h)?.sigmoid()?;
        layers[2].forward(&h)?.sub(&target)?.square()?.mean()
    };
    let err = grad_check(loss, &x, EPS).unwrap();
    assert!(err < TOL, "input gradient error {err:e}");
    // parameter gradients too: perturb the middle weight matrix
    let w1 = layers[1].weight.clone();
    let err = grad_check(
        |w| {
            let h = layers[0].forward(&x)?.tanh()?;
            let h = h.matmul(w)?.add(&layers[1].bias)?.sigmoid()?;
            layers[2].forward(&h)?.sub(&target)?.square()?.mean()
        },
        &w1,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "weight gradient error {err:e}");
}

#[test]
fn backward_examples() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);

    let c = Tensor::scalar(3.0);
    c.backward().unwrap();
    assert!(c.grad().is_none());

    let v = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(v.backward(), Err(TensorError::Contract(_))));
}

#[test]
fn gradient_check_trivial_cases() {
    let x = Tensor::new(vec![0.3, -1.2, 2.0], &[3]).unwrap();
    assert!(grad_check(|x| x.sum(), &x, EPS).unwrap() < 1e-9);
    let zero = Tensor::new(vec![0.0], &[1]).unwrap();
    assert!(grad_check(|x| x.exp()?.sum(), &zero, EPS).unwrap() < 1e-8);
}

#[test]
fn k_uses_accumulate_k_fold() {
    for k in 1..6 {
        let x = Tensor::param(vec![0.5, -1.5, 2.0], &[3]).unwrap();
        let w = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let term = x.mul(&w).unwrap();
        let mut total = term.clone();
        for _ in 1..k {
            total = total.add(&term).unwrap();
        }
        total.sum().unwrap().backward().unwrap();
        let want: Vec<f64> = w.data().iter().map(|v| v * k as f64).collect();
        assert_eq!(x.grad().unwrap(), want);
    }
}

#[test]
fn repeated_backward_accumulates_into_leaves() {
    let x = Tensor::param(vec![1.0], &[1]).unwrap();
    for _ in 0..3 {
        x.mul_scalar(2.0)
            .unwrap()
            .sum()
            .unwrap()
            .backward()
            .unwrap();
    }
    assert_eq!(x.grad().unwrap(), vec![6.0]);
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn graph_visits_shared_nodes_once_in_topological_order() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let a = x.exp().unwrap();
    let b = a.mul(&x).unwrap();
    let c = a.add(&b).unwrap().sum().unwrap();
    let g = Graph::from_root(&c);
    let ids: Vec<u64> = g.nodes().iter().map(|t| t.id()).collect();
    let mut unique = ids.clone();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(ids.len(), unique.len());
    assert_eq!(g.len(), 5);
    let pos = |t: &Tensor| ids.iter().position(|&i| i == t.id()).unwrap();
    assert!(pos(&x) < pos(&a) && pos(&a) < pos(&b) && pos(&b) < pos(&c));
}

#[test]
fn no_grad_scope_records_nothing() {
    let x = Tensor::param(vec![1.0], &[1]).unwrap();
    let y = {
        let _g = hazebridge_tensor::no_grad();
        x.exp().unwrap()
    };
    assert!(!y.requires_grad());
    assert!(x.exp().unwrap().requires_grad());
}

#[test]
fn identical_inputs_give_bit_identical_results() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = vec![Linear::new(&mut rng, 3, 16), Linear::new(&mut rng, 16, 1)];
        let x = rand_tensor(&mut rng, &[7, 3], -1.0, 1.0);
        let y = net[1]
            .forward(&net[0].forward(&x).unwrap().silu().unwrap())
            .unwrap();
        let loss = y.square().unwrap().mean().unwrap();
        loss.backward().unwrap();
        let grads: Vec<Vec<f64>> = net
            .named_params()
            .iter()
            .map(|(_, p)| p.grad().unwrap())
            .collect();
        (loss.item().unwrap().to_bits(), grads)
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    for (a, b) in g1.iter().zip(&g2) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tensor_length_always_matches_shape(dims in prop::collection::vec(1usize..5, 1..4)) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::new(vec![0.0; n], &dims).is_ok());
        prop_assert!(Tensor::new(vec![0.0; n + 1], &dims).is_err());
        let t = Tensor::zeros(&dims).with_requires_grad(true);
        t.exp().unwrap().sum().unwrap().backward().unwrap();
        prop_assert_eq!(t.grad().unwrap().len(), n);
    }

    #[test]
    fn elementwise_sum_grads_match_fd(vals in prop::collection::vec(-2.0f64..2.0, 2..8)) {
        let n = vals.len();
        let x = Tensor::new(vals, &[n]).unwrap();
        let f = |x: &Tensor| x.tanh()?.mul(&x.sigmoid()?)?.add(&x.exp()?)?.sum();
        prop_assert!(grad_check(f, &x, EPS).unwrap() < TOL);
    }
}
