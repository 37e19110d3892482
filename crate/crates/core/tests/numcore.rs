use proptest::prelude::*;
use tgmm_core::numcore::{grad_check, rng, Tape, Tensor};

use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "it", 0);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

#[test]
fn layer_norm_gradient_matches_differences_tightly() {
    let x = random(&[3, 5], 1);
    let w = random(&[3, 5], 2);
    let rep = grad_check(
        |t, p| {
            let v = p.vars();
            let y = t.layer_norm(v[0], v[1], v[2]);
            let c = t.constant(w.clone());
            let y = t.mul(y, c);
            t.sum_all(y)
        },
        &[x, random(&[5], 3), random(&[5], 4)],
        1e-5,
        0,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn quadratic_is_differenced_exactly() {
    let rep = grad_check(
        |t, p| {
            let v = p.vars()[0];
            let y = t.mul(v, v);
            t.sum_all(y)
        },
        &[Tensor::from_vec(&[1], vec![3.0])],
        1e-5,
        0,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-9, "{rep:?}");
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn matmul_and_its_gradients_match_naive(m in 1usize..10, k in 1usize..12, n in 1usize..19, seed in 0u64..1000) {
        let (a, b) = (random(&[m, k], seed), random(&[k, n], seed + 1));
        let g = random(&[m, n], seed + 2);
        let mut t = Tape::new();
        let (av, bv) = (t.leaf(a.clone()), t.leaf(b.clone()));
        let y = t.matmul(av, bv);
        for (x, want) in t.value(y).data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - want).abs() < 1e-12);
        }
        let gc = t.constant(g.clone());
        let prod = t.mul(y, gc);
        let loss = t.sum_all(prod);
        let grads = t.backward(loss).unwrap();
        // dA = G B^T, dB = A^T G
        let bt = Tensor::from_vec(&[n, k], (0..n * k).map(|i| b.data()[(i % k) * n + i / k]).collect());
        let at = Tensor::from_vec(&[k, m], (0..k * m).map(|i| a.data()[(i % m) * k + i / m]).collect());
        for (x, want) in grads.wrt(av).data().iter().zip(naive_matmul(&g, &bt)) {
            prop_assert!((x - want).abs() < 1e-12);
        }
        for (x, want) in grads.wrt(bv).data().iter().zip(naive_matmul(&at, &g)) {
            prop_assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_gradient_sums_over_expanded_axes(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let x = random(&[rows, cols], seed);
        let b = random(&[1, cols], seed + 1);
        let mut t = Tape::new();
        let (xv, bv) = (t.leaf(x), t.leaf(b));
        let y = t.add(xv, bv);
        let loss = t.sum_all(y);
        let g = t.backward(loss).unwrap().wrt(bv);
        prop_assert!(g.data().iter().all(|&v| v == rows as f64));
    }

    #[test]
    fn layer_norm_rows_are_standardized(seed in 0u64..1000, d in 2usize..16, shift in -100.0f64..100.0) {
        let mut x = random(&[3, d], seed);
        for v in x.data_mut() {
            *v = *v * 5.0 + shift;
        }
        let mut t = Tape::new();
        let xv = t.leaf(x);
        let g = t.constant(Tensor::ones(&[d]));
        let b = t.constant(Tensor::zeros(&[d]));
        let y = t.layer_norm(xv, g, b);
        for row in t.value(y).data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }
}
