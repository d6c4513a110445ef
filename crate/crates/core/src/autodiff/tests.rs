use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};
use crate::verify::{finite_difference, max_abs_diff, max_relative_error};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_params(seed: u64, shapes: &[(&str, &[usize])]) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParameterSet::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        set.insert(*name, Tensor::new(shape.to_vec(), data).unwrap())
            .unwrap();
    }
    set
}

/// Builds `f` on a fresh graph and returns (value, reverse gradient).
fn eval<F>(params: &ParameterSet, f: &F) -> Result<(f64, FlatGradient)>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = g.bind(params)?;
    let loss = f(&mut g, &bound)?;
    let value = g.value(loss).item().unwrap();
    Ok((value, g.backward(loss, &bound)?))
}

/// Reverse gradient vs. central differences, and the tangent sweep along a
/// random direction vs. the reverse gradient.
fn check_primitive<F>(params: &ParameterSet, f: F)
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    let (_, grad) = eval(params, &f).unwrap();
    let fd = finite_difference(params, H, None, |p| Ok(eval(p, &f)?.0)).unwrap();
    let err = max_relative_error(grad.values(), &fd, 1e-6);
    assert!(err < TOL, "reverse vs finite differences: {err:e}");

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dir: Vec<f64> = (0..params.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dir = FlatGradient::new(params.layout(), dir).unwrap();
    let mut g = Graph::new();
    let bound = g.bind(params).unwrap();
    let loss = f(&mut g, &bound).unwrap();
    let jvp = g.tangent(loss, &bound, &dir).unwrap().item().unwrap();
    let expected = grad.dot(&dir).unwrap();
    assert!(
        (jvp - expected).abs() <= 1e-10 * (1.0 + expected.abs()),
        "tangent {jvp} vs reverse {expected}"
    );
}

/// Contracts a non-scalar output with fixed random weights.
fn contract(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?)?;
    let p = g.mul(v, w)?;
    g.sum_all(p)
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3])).unwrap();
    let y = g.softmax(x, None).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn smoothed_cross_entropy_of_uniform_prediction_is_ln_v() {
    for eps in [0.0, 0.1, 0.5, 0.9] {
        let v = 7;
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, v])).unwrap();
        let logp = g.log_softmax(x).unwrap();
        let loss = g
            .smoothed_nll(logp, Rc::from(vec![3, 0]), Rc::from(vec![true, true]), eps)
            .unwrap();
        for l in g.value(loss).data() {
            assert!((l - (v as f64).ln()).abs() < 1e-12, "eps={eps}: {l}");
        }
    }
}

#[test]
fn matmul_of_ones() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::ones(&[2, 3])).unwrap();
    let b = g.constant(Tensor::ones(&[3, 2])).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 2]);
    assert_eq!(g.value(c).data(), &[3.0; 4]);
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::ones(&[2, 3])).unwrap();
    let b = g.constant(Tensor::ones(&[2, 3])).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "matmul", .. }));
    assert!(err.to_string().contains("[2, 3]"));
    let c = g.constant(Tensor::ones(&[3])).unwrap();
    assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn overflow_raises_instead_of_propagating() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::full(&[2], 1e300)).unwrap();
    let err = g.mul(a, a).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "mul" }));
}

#[test]
fn dropout_rate_must_be_below_one() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::ones(&[4])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(g.dropout(a, 1.0, &mut rng).is_err());
    assert_eq!(g.dropout(a, 0.0, &mut rng).unwrap(), a);
}

#[test]
fn gradient_of_square() {
    let mut set = ParameterSet::new();
    set.insert("theta", Tensor::from_slice(&[1], &[3.0]).unwrap())
        .unwrap();
    let (_, grad) = eval(&set, &|g, b| {
        let t = b.get("theta")?;
        let sq = g.mul(t, t)?;
        g.sum_all(sq)
    })
    .unwrap();
    assert_eq!(grad.values(), &[6.0]);
}

#[test]
fn constant_loss_has_zero_gradient() {
    let set = random_params(1, &[("w", &[3, 2])]);
    let (v, grad) = eval(&set, &|g, _| {
        let c = g.constant(Tensor::scalar(4.0))?;
        g.sum_all(c)
    })
    .unwrap();
    assert_eq!(v, 4.0);
    assert!(grad.values().iter().all(|&x| x == 0.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let set = random_params(1, &[("w", &[3])]);
    let mut g = Graph::new();
    let b = g.bind(&set).unwrap();
    let w = b.get("w").unwrap();
    assert!(g.backward(w, &b).is_err());
}

#[test]
fn mlp_matches_finite_differences() {
    let set = random_params(
        7,
        &[
            ("b1", &[5]),
            ("b2", &[3]),
            ("w1", &[4, 5]),
            ("w2", &[5, 3]),
        ],
    );
    let x = random_params(8, &[("x", &[6, 4])]).get("x").unwrap().clone();
    check_primitive(&set, |g, b| {
        let x = g.constant(x.clone())?;
        let h = g.matmul(x, b.get("w1")?)?;
        let h = g.add_row(h, b.get("b1")?)?;
        let h = g.relu(h)?;
        let o = g.matmul(h, b.get("w2")?)?;
        let o = g.add_row(o, b.get("b2")?)?;
        let o = g.mul(o, o)?;
        g.sum_all(o)
    });
}

#[test]
fn batch_matmul_matches_finite_differences() {
    for trans in [false, true] {
        let bshape: &[usize] = if trans { &[2, 4, 3] } else { &[2, 3, 4] };
        let set = random_params(3, &[("a", &[2, 5, 3]), ("b", bshape)]);
        check_primitive(&set, |g, b| {
            let c = g.batch_matmul(b.get("a")?, b.get("b")?, trans)?;
            contract(g, c, 11)
        });
    }
}

#[test]
fn softmax_and_log_softmax_match_finite_differences() {
    let set = random_params(4, &[("x", &[3, 5])]);
    let allowed: Rc<[bool]> = (0..15).map(|i| i % 5 != 3).collect();
    check_primitive(&set, |g, b| {
        let y = g.softmax(b.get("x")?, Some(allowed.clone()))?;
        contract(g, y, 12)
    });
    check_primitive(&set, |g, b| {
        let y = g.log_softmax(b.get("x")?)?;
        contract(g, y, 13)
    });
}

#[test]
fn layer_norm_matches_finite_differences() {
    let set = random_params(5, &[("bias", &[6]), ("gain", &[6]), ("x", &[4, 6])]);
    check_primitive(&set, |g, b| {
        let y = g.layer_norm(b.get("x")?, b.get("gain")?, b.get("bias")?, 1e-5)?;
        contract(g, y, 14)
    });
}

#[test]
fn embedding_dropout_permute_reshape_match_finite_differences() {
    let set = random_params(6, &[("table", &[5, 8])]);
    check_primitive(&set, |g, b| {
        let e = g.embedding(b.get("table")?, Rc::from(vec![0, 3, 3, 1, 4, 0]))?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = g.dropout(e, 0.3, &mut rng)?;
        let e = g.reshape(e, &[1, 6, 2, 4])?;
        let e = g.permute_0213(e)?;
        let e = g.scale(e, 1.7)?;
        let s = g.sum_last(e)?;
        contract(g, s, 15)
    });
}

#[test]
fn smoothed_nll_matches_finite_differences() {
    let set = random_params(9, &[("logits", &[4, 6])]);
    check_primitive(&set, |g, b| {
        let lp = g.log_softmax(b.get("logits")?)?;
        let l = g.smoothed_nll(
            lp,
            Rc::from(vec![1, 5, 0, 2]),
            Rc::from(vec![true, true, false, true]),
            0.1,
        )?;
        contract(g, l, 16)
    });
}

/// Toy linear model `l = (theta . x - y)^2 / 2` on several units.
fn toy_units(g: &mut Graph, b: &BoundParams, xs: &[[f64; 2]], ys: &[f64]) -> Result<Var> {
    let n = xs.len();
    let x = g.constant(Tensor::new(
        vec![n, 2],
        xs.iter().flat_map(|r| r.iter().copied()).collect(),
    )?)?;
    let theta = g.reshape(b.get("theta")?, &[2, 1])?;
    let pred = g.matmul(x, theta)?;
    let pred = g.reshape(pred, &[n])?;
    let neg_y = g.constant(Tensor::new(vec![n], ys.iter().map(|v| -v).collect())?)?;
    let r = g.add(pred, neg_y)?;
    let sq = g.mul(r, r)?;
    g.scale(sq, 0.5)
}

fn toy_theta(theta: [f64; 2]) -> ParameterSet {
    let mut set = ParameterSet::new();
    set.insert("theta", Tensor::from_slice(&[2], &theta).unwrap())
        .unwrap();
    set
}

#[test]
fn grad_dot_on_linear_model() {
    let set = toy_theta([0.0, 0.0]);
    let mut g = Graph::new();
    let b = g.bind(&set).unwrap();
    let losses = toy_units(&mut g, &b, &[[1.0, 0.0], [1.0, 0.0]], &[1.0, -1.0]).unwrap();
    let z = g.constant(Tensor::ones(&[2])).unwrap();
    let weighted = g.mul(z, losses).unwrap();
    let _total = g.sum_all(weighted).unwrap();
    let dir = FlatGradient::new(set.layout(), vec![-1.0, 0.0]).unwrap();
    let out = g.grad_dot_per_weight(losses, z, &b, &dir).unwrap();
    assert_eq!(out.data(), &[1.0, -1.0]);

    let zero = FlatGradient::zeros(set.layout());
    let out = g.grad_dot_per_weight(losses, z, &b, &zero).unwrap();
    assert_eq!(out.data(), &[0.0, 0.0]);
}

#[test]
fn grad_dot_requires_recorded_weighting() {
    let set = toy_theta([0.5, -0.5]);
    let mut g = Graph::new();
    let b = g.bind(&set).unwrap();
    let losses = toy_units(&mut g, &b, &[[1.0, 2.0]], &[1.0]).unwrap();
    let z = g.constant(Tensor::ones(&[1])).unwrap();
    let dir = FlatGradient::zeros(set.layout());
    assert!(g.grad_dot_per_weight(losses, z, &b, &dir).is_err());

    let z2 = g.constant(Tensor::full(&[1], 2.0)).unwrap();
    g.mul(z2, losses).unwrap();
    assert!(g.grad_dot_per_weight(losses, z2, &b, &dir).is_err());
}

#[test]
fn grad_dot_costs_one_tangent_sweep() {
    let set = toy_theta([0.5, -0.5]);
    let mut g = Graph::new();
    let b = g.bind(&set).unwrap();
    let losses = toy_units(&mut g, &b, &[[1.0, 2.0], [0.0, 1.0]], &[1.0, 3.0]).unwrap();
    let z = g.constant(Tensor::ones(&[2])).unwrap();
    g.mul(z, losses).unwrap();
    let dir = FlatGradient::new(set.layout(), vec![1.0, 1.0]).unwrap();
    let before = sweep_counts();
    g.grad_dot_per_weight(losses, z, &b, &dir).unwrap();
    let used = sweep_counts().since(before);
    assert_eq!(used, SweepCounts { reverse: 0, tangent: 1 });
}

#[test]
fn backward_is_bitwise_deterministic() {
    let set = random_params(21, &[("w", &[4, 4])]);
    let f = |g: &mut Graph, b: &BoundParams| {
        let x = g.log_softmax(b.get("w")?)?;
        contract(g, x, 3)
    };
    let mut g = Graph::new();
    let b = g.bind(&set).unwrap();
    let l = f(&mut g, &b).unwrap();
    let first = g.backward(l, &b).unwrap();
    let second = g.backward(l, &b).unwrap();
    let bits = |v: &FlatGradient| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&first), bits(&second));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// grad_dot_per_weight is exact and linear in the direction.
    #[test]
    fn grad_dot_matches_per_unit_backward_and_is_linear(
        theta in prop::array::uniform2(-2.0f64..2.0),
        xs in prop::collection::vec(prop::array::uniform2(-2.0f64..2.0), 1..6),
        dir in prop::array::uniform2(-2.0f64..2.0),
        c in -3.0f64..3.0,
    ) {
        let ys: Vec<f64> = xs.iter().map(|x| x[0] - x[1]).collect();
        let set = toy_theta(theta);
        let mut g = Graph::new();
        let b = g.bind(&set).unwrap();
        let losses = toy_units(&mut g, &b, &xs, &ys).unwrap();
        let z = g.constant(Tensor::ones(&[xs.len()])).unwrap();
        g.mul(z, losses).unwrap();
        let d = FlatGradient::new(set.layout(), dir.to_vec()).unwrap();
        let fast = g.grad_dot_per_weight(losses, z, &b, &d).unwrap();

        let mut oracle = Vec::new();
        for i in 0..xs.len() {
            let mut cot = vec![0.0; xs.len()];
            cot[i] = 1.0;
            let gi = g.backward_with_cotangent(losses, &cot, &b).unwrap();
            oracle.push(gi.dot(&d).unwrap());
        }
        prop_assert!(max_abs_diff(fast.data(), &oracle) < 1e-9);

        let mut scaled = d.clone();
        scaled.scale(c);
        let fast_c = g.grad_dot_per_weight(losses, z, &b, &scaled).unwrap();
        for (a, b) in fast_c.data().iter().zip(fast.data()) {
            prop_assert!((a - c * b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }
}
