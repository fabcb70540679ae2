use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{grad_check, GradCheckConfig};

type Build = dyn Fn(&mut Graph<f64>, &ParamVars) -> Result<Var>;

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::uniform(dims, -2.0, 2.0, rng)
}

/// Reduces an arbitrary output to a scalar with fixed random weights so that
/// every output element contributes a distinct cotangent.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut rng, g.dims(y));
    let w = g.constant(w);
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

fn assert_grad(name: &str, params: ParameterStore<f64>, build: &Build, seed: u64) {
    let cfg = GradCheckConfig {
        eps: 1e-5,
        samples_per_tensor: 64,
        seed,
    };
    let report = grad_check(build, &params, &cfg).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(
        report.max_rel_error <= 1e-6,
        "{name} seed {seed}: rel err {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParameterStore<f64> {
    entries.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn primitive_cases(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;

    for trans in [false, true] {
        let wdims: &[usize] = if trans { &[3, 4] } else { &[4, 3] };
        let p = store(vec![("x", uniform(r, &[2, 2, 4])), ("w", uniform(r, wdims))]);
        assert_grad(
            "matmul",
            p,
            &move |g, v| {
                let y = g.matmul(v.get("x")?, v.get("w")?, trans)?;
                weighted_sum(g, y, seed)
            },
            seed,
        );
        let bdims: &[usize] = if trans { &[2, 2, 5, 3] } else { &[2, 2, 3, 5] };
        let p = store(vec![("a", uniform(r, &[2, 2, 4, 3])), ("b", uniform(r, bdims))]);
        assert_grad(
            "batched_matmul",
            p,
            &move |g, v| {
                let y = g.batched_matmul(v.get("a")?, v.get("b")?, trans)?;
                weighted_sum(g, y, seed)
            },
            seed,
        );
    }

    let p = store(vec![("x", uniform(r, &[3, 4])), ("b", uniform(r, &[4]))]);
    assert_grad(
        "add_bias",
        p,
        &move |g, v| {
            let y = g.add_bias(v.get("x")?, v.get("b")?)?;
            weighted_sum(g, y, seed)
        },
        seed,
    );

    let p = store(vec![("a", uniform(r, &[2, 3])), ("b", uniform(r, &[2, 3]))]);
    assert_grad(
        "add_mul_scale",
        p,
        &move |g, v| {
            let s = g.add(v.get("a")?, v.get("b")?)?;
            let m = g.mul(s, v.get("a")?)?;
            let y = g.scale(m, -0.7)?;
            weighted_sum(g, y, seed)
        },
        seed,
    );

    let p = store(vec![
        ("x", uniform(r, &[2, 3, 6])),
        ("g", uniform(r, &[6])),
        ("b", uniform(r, &[6])),
    ]);
    assert_grad(
        "layer_norm",
        p,
        &move |g, v| {
            let y = g.layer_norm(v.get("x")?, v.get("g")?, v.get("b")?, 1e-5)?;
            weighted_sum(g, y, seed)
        },
        seed,
    );

    let p = store(vec![("x", uniform(r, &[2, 3, 8])), ("s", uniform(r, &[8]))]);
    assert_grad(
        "rms_group_norm",
        p,
        &move |g, v| {
            let y = g.rms_group_norm(v.get("x")?, v.get("s")?, 4, 1e-5)?;
            weighted_sum(g, y, seed)
        },
        seed,
    );

    let p = store(vec![("x", uniform(r, &[2, 5]))]);
    assert_grad(
        "pointwise",
        p,
        &move |g, v| {
            let x = v.get("x")?;
            let a = g.gelu(x)?;
            let b = g.silu(x)?;
            let c = g.softplus(x)?;
            let d = g.neg_exp(x)?;
            let ab = g.add(a, b)?;
            let cd = g.add(c, d)?;
            let y = g.add(ab, cd)?;
            weighted_sum(g, y, seed)
        },
        seed,
    );

    let ids: Vec<usize> = (0..6).map(|_| r.random_range(0..5)).collect();
    let p = store(vec![("table", uniform(r, &[5, 3]))]);
    assert_grad(
        "embedding",
        p,
        &move |g, v| {
            let y = g.embedding(v.get("table")?, &ids, &[2, 3])?;
            weighted_sum(g, y, seed)
        },
        seed,
    );

    let p = store(vec![("x", uniform(r, &[2, 3, 8]))]);
    assert_grad(
        "heads_rotary",
        p,
        &move |g, v| {
            let s = g.split_heads(v.get("x")?, 2)?;
            let rot = g.rotary(s, 3)?;
            let y = g.merge_heads(rot)?;
            weighted_sum(g, y, seed)
        },
        seed,
    );

    let p = store(vec![("x", uniform(r, &[2, 2, 4, 4]))]);
    assert_grad(
        "causal_softmax",
        p,
        &move |g, v| {
            let y = g.causal_softmax(v.get("x")?, 0.8)?;
            weighted_sum(g, y, seed)
        },
        seed,
    );

    let p = store(vec![("x", uniform(r, &[2, 2, 4, 4]))]);
    assert_grad(
        "decay_mask",
        p,
        &move |g, v| {
            let y = g.decay_mask(v.get("x")?, &[0.9, 0.6], 0.5)?;
            weighted_sum(g, y, seed)
        },
        seed,
    );

    let p = store(vec![
        ("x", uniform(r, &[2, 5, 3])),
        ("w", uniform(r, &[3, 4])),
        ("b", uniform(r, &[3])),
    ]);
    assert_grad(
        "causal_conv",
        p,
        &move |g, v| {
            let y = g.causal_conv(v.get("x")?, v.get("w")?, v.get("b")?)?;
            weighted_sum(g, y, seed)
        },
        seed,
    );

    let p = store(vec![
        ("u", uniform(r, &[2, 4, 3])),
        ("delta", Tensor::uniform(&[2, 4, 3], 0.1, 1.5, r)),
        ("a", Tensor::uniform(&[3, 2], -2.0, -0.1, r)),
        ("bm", uniform(r, &[2, 4, 2])),
        ("cm", uniform(r, &[2, 4, 2])),
        ("d", uniform(r, &[3])),
    ]);
    assert_grad(
        "selective_scan",
        p,
        &move |g, v| {
            let y = g.selective_scan(
                v.get("u")?,
                v.get("delta")?,
                v.get("a")?,
                v.get("bm")?,
                v.get("cm")?,
                v.get("d")?,
            )?;
            weighted_sum(g, y, seed)
        },
        seed,
    );

    let p = store(vec![("x", uniform(r, &[3, 7]))]);
    assert_grad(
        "slice_last",
        p,
        &move |g, v| {
            let y = g.slice_last(v.get("x")?, 2, 4)?;
            weighted_sum(g, y, seed)
        },
        seed,
    );

    let targets: Vec<usize> = (0..6).map(|_| r.random_range(0..5)).collect();
    let p = store(vec![("logits", uniform(r, &[2, 3, 5]))]);
    assert_grad(
        "cross_entropy",
        p,
        &move |g, v| g.cross_entropy(v.get("logits")?, &targets, Some(targets[0])),
        seed,
    );
}

#[test]
fn primitives_match_finite_differences_over_100_seeds() {
    for seed in 0..100 {
        primitive_cases(seed);
    }
}

fn one_param(name: &str, t: Tensor<f64>) -> (Graph<f64>, Var) {
    let mut g = Graph::new();
    let v = g.param(name, t);
    (g, v)
}

#[test]
fn grad_of_sum_is_ones() {
    let (mut g, x) = one_param("x", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn grad_of_sum_of_squares() {
    let (mut g, x) = one_param("x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_is_one_shot() {
    let (mut g, x) = one_param("x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
}

#[test]
fn backward_requires_scalar() {
    let (mut g, x) = one_param("x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let y = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NotScalar { numel: 2 })));
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let x = g.param("x", Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
    let m = g.mul(c, x).unwrap();
    let s = g.sum(m).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads.get("x").unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn non_finite_output_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_vec(&[1], vec![100.0]).unwrap());
    assert!(matches!(g.neg_exp(x), Err(Error::NonFinite { op: "neg_exp" })));
}

#[test]
fn scan_rejects_non_positive_delta() {
    let mut g = Graph::<f64>::new();
    let u = g.constant(Tensor::zeros(&[1, 2, 1]));
    let delta = g.constant(Tensor::from_f64(&[1, 2, 1], &[0.5, 0.0]).unwrap());
    let a = g.constant(Tensor::full(&[1, 1], -1.0));
    let bm = g.constant(Tensor::zeros(&[1, 2, 1]));
    let cm = g.constant(Tensor::zeros(&[1, 2, 1]));
    let d = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(
        g.selective_scan(u, delta, a, bm, cm, d),
        Err(Error::NonPositiveDelta { index: 1 })
    ));
}

#[test]
fn causal_softmax_rows_sum_to_one_and_mask_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in 1..12 {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::uniform(&[2, t, t], -30.0, 30.0, &mut rng));
        let y = g.causal_softmax(x, 1.0).unwrap();
        for row in g.value(y).data().chunks_exact(t).enumerate().map(|(i, r)| (i % t, r)) {
            let (i, r) = row;
            let s: f32 = r.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
            assert!(r[i + 1..].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Tensor::uniform(&[4, 16], -2.0, 2.0, &mut rng));
        let w = g.param("w", Tensor::uniform(&[16, 8], -2.0, 2.0, &mut rng));
        let y = g.matmul(x, w, false).unwrap();
        let y = g.gelu(y).unwrap();
        let s = g.sum(y).unwrap();
        let value = g.value(s).clone();
        let grads = g.backward(s).unwrap();
        (value, grads.get("w").unwrap().clone(), grads.get("x").unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert!(a.0.bit_eq(&b.0) && a.1.bit_eq(&b.1) && a.2.bit_eq(&b.2));
}
