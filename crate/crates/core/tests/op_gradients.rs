//! Every differentiable graph op against central differences, 64-bit.

use layoutmatch::numerics::{eval_graph, grad_check, Graph, NodeId, NumericsError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 100;
const TOL: f64 = 1e-6;
/// Step for ops that are linear in the probed input: central differences are
/// exact up to roundoff, so a wide step minimizes cancellation error.
const EPS_LINEAR: f64 = 1e-3;
const EPS: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Readout weights with magnitude in [0.5, 1.5] and random sign.
fn weights(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=8), rng.gen_range(1..=8))
}

/// Reduces `y` to a scalar with fixed random weights so every output entry
/// contributes a distinct gradient.
fn readout(g: &mut Graph<'_>, y: NodeId, w: &Tensor) -> Result<NodeId, NumericsError> {
    let wn = g.input(w.clone());
    let p = g.mul(y, wn)?;
    Ok(g.sum_all(p))
}

fn check<B>(name: &str, seed: u64, x: &Tensor, out_shape: (usize, usize), build: B)
where
    B: Fn(&mut Graph<'_>, NodeId) -> Result<NodeId, NumericsError>,
{
    check_eps(name, seed, x, out_shape, EPS_LINEAR, build)
}

fn check_eps<B>(name: &str, seed: u64, x: &Tensor, out_shape: (usize, usize), eps: f64, build: B)
where
    B: Fn(&mut Graph<'_>, NodeId) -> Result<NodeId, NumericsError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = weights(&mut rng, out_shape.0, out_shape.1);
    let f = |t: &Tensor| {
        eval_graph(
            |g, xin| {
                let y = build(g, xin)?;
                readout(g, y, &w)
            },
            t,
        )
    };
    let err = grad_check(f, x, eps).unwrap();
    assert!(err < TOL, "{name} seed {seed}: max rel error {err:e}");
}

#[test]
fn matmul_both_operands() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k) = dims(&mut rng);
        let n = rng.gen_range(1..=8);
        let a = random(&mut rng, m, k);
        let b = random(&mut rng, k, n);
        let (a2, b2) = (a.clone(), b.clone());
        check("matmul lhs", seed, &a, (m, n), move |g, x| {
            let bn = g.input(b2.clone());
            g.matmul(x, bn)
        });
        check("matmul rhs", seed, &b, (m, n), move |g, x| {
            let an = g.input(a2.clone());
            g.matmul(an, x)
        });
    }
}

#[test]
fn matmul_t_both_operands() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k) = dims(&mut rng);
        let n = rng.gen_range(1..=8);
        let a = random(&mut rng, m, k);
        let b = random(&mut rng, n, k);
        let (a2, b2) = (a.clone(), b.clone());
        check("matmul_t lhs", seed, &a, (m, n), move |g, x| {
            let bn = g.input(b2.clone());
            g.matmul_t(x, bn)
        });
        check("matmul_t rhs", seed, &b, (m, n), move |g, x| {
            let an = g.input(a2.clone());
            g.matmul_t(an, x)
        });
    }
}

#[test]
fn add_and_broadcast_row() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = dims(&mut rng);
        let a = random(&mut rng, m, n);
        let b = random(&mut rng, m, n);
        let r = random(&mut rng, 1, n);
        let b2 = b.clone();
        check("add", seed, &a, (m, n), move |g, x| {
            let bn = g.input(b2.clone());
            g.add(x, bn)
        });
        let a2 = a.clone();
        check("add_row bias", seed, &r, (m, n), move |g, x| {
            let an = g.input(a2.clone());
            g.add_row(an, x)
        });
        let r2 = r.clone();
        check("add_row input", seed, &a, (m, n), move |g, x| {
            let rn = g.input(r2.clone());
            g.add_row(x, rn)
        });
    }
}

#[test]
fn gather_rows_from_table() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d) = dims(&mut rng);
        let table = random(&mut rng, v, d);
        let ids: Vec<usize> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0..v)).collect();
        let n = ids.len();
        check("gather", seed, &table, (n, d), move |g, x| g.gather(x, &ids));
    }
}

#[test]
fn layer_norm_all_inputs() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(1..=8);
        // A 2-wide row normalizes to (±1, ∓1) whatever its values, so its
        // input gradient is identically zero.
        let n = rng.gen_range(3..=8);
        let x = random(&mut rng, m, n);
        let gamma = random(&mut rng, 1, n);
        let beta = random(&mut rng, 1, n);
        let (g1, b1) = (gamma.clone(), beta.clone());
        check_eps("layer_norm x", seed, &x, (m, n), EPS, move |g, xin| {
            let gn = g.input(g1.clone());
            let bn = g.input(b1.clone());
            g.layer_norm(xin, gn, bn, 1e-12)
        });
        let (x2, b2) = (x.clone(), beta.clone());
        check_eps("layer_norm gamma", seed, &gamma, (m, n), EPS, move |g, gin| {
            let xn = g.input(x2.clone());
            let bn = g.input(b2.clone());
            g.layer_norm(xn, gin, bn, 1e-12)
        });
        let (x3, g3) = (x.clone(), gamma.clone());
        check_eps("layer_norm beta", seed, &beta, (m, n), EPS, move |g, bin| {
            let xn = g.input(x3.clone());
            let gn = g.input(g3.clone());
            g.layer_norm(xn, gn, bin, 1e-12)
        });
    }
}

#[test]
fn elementwise_unary_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = dims(&mut rng);
        let x = random(&mut rng, m, n);
        check_eps("gelu", seed, &x, (m, n), EPS, |g, x| Ok(g.gelu(x)));
        check_eps("softmax", seed, &x, (m, n), EPS, |g, x| Ok(g.softmax_rows(x)));
        check_eps("log_sum_exp", seed, &x, (m, 1), EPS, |g, x| Ok(g.log_sum_exp_rows(x)));
        check("transpose", seed, &x, (n, m), |g, x| Ok(g.transpose(x)));
        check("scale", seed, &x, (m, n), |g, x| Ok(g.scale(x, -1.7)));
        let y = random(&mut rng, m, n);
        check("mul", seed, &x, (m, n), move |g, x| {
            let yn = g.input(y.clone());
            g.mul(x, yn)
        });
    }
}

#[test]
fn dropout_with_a_fixed_mask() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = dims(&mut rng);
        let x = random(&mut rng, m, n);
        let w = weights(&mut rng, m, n);
        let f = |t: &Tensor| {
            let mut g = Graph::with_dropout(ChaCha8Rng::seed_from_u64(seed));
            let xin = g.input(t.clone());
            let d = g.dropout(xin, 0.3);
            let root = readout(&mut g, d, &w)?;
            let out = g.value(root).clone();
            let grads = g.backward(root, Tensor::scalar(1.0), None)?;
            Ok((out, grads.wrt(xin).cloned().unwrap()))
        };
        let err = grad_check(f, &x, EPS_LINEAR).unwrap();
        assert!(err < TOL, "dropout seed {seed}: {err:e}");
    }
}

#[test]
fn slicing_and_concat() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(1..=8);
        let n = rng.gen_range(2..=8);
        let x = random(&mut rng, m, n);
        let split = rng.gen_range(1..n);
        check("slice/concat", seed, &x, (m, n), move |g, x| {
            let left = g.slice_cols(x, 0, split)?;
            let right = g.slice_cols(x, split, n - split)?;
            g.concat_cols(&[right, left])
        });
        let r = rng.gen_range(0..m);
        check("slice_rows", seed, &x, (1, n), move |g, x| g.slice_rows(x, r, 1));
    }
}

#[test]
fn cross_entropy_with_partial_targets() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, v) = dims(&mut rng);
        let x = random(&mut rng, m, v);
        let targets: Vec<Option<usize>> = (0..m).map(|_| rng.gen_bool(0.6).then(|| rng.gen_range(0..v))).collect();
        let f = |t: &Tensor| eval_graph(|g, xin| g.cross_entropy(xin, &targets), t);
        let err = grad_check(f, &x, EPS).unwrap();
        assert!(err < TOL, "cross_entropy seed {seed}: {err:e}");
    }
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::filled(1, 6, 3.25));
    let gamma = g.input(Tensor::filled(1, 6, 1.0));
    let beta = g.input(Tensor::zeros(1, 6));
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn softmax_rows_sum_to_one_and_lse_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let (m, n) = dims(&mut rng);
        let x = random(&mut rng, m, n).scale(20.0);
        let s = x.softmax_rows();
        for r in 0..m {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let c = rng.gen_range(-50.0..50.0);
        let shifted = x.map(|v| v + c).log_sum_exp_rows();
        let base = x.log_sum_exp_rows();
        for r in 0..m {
            assert!((shifted.get(r, 0) - base.get(r, 0) - c).abs() < 1e-12);
        }
    }
}

#[test]
fn gather_out_of_range_is_an_error() {
    let mut g = Graph::new();
    let t = g.input(Tensor::zeros(3, 2));
    let err = g.gather(t, &[0, 3]).unwrap_err().to_string();
    assert!(err.contains("gather"), "{err}");
}
