//! Finite-difference checks of every backward kernel.

use super::testing::{conv2d_oracle, max_rel_err, numeric_grad, rng};
use super::*;
use crate::label::LabelMap;
use crate::tensor::Tensor;
use rand::Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

/// Scalar objective `Σ w ⊙ y` with fixed random weights.
fn probe_weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn weighted_sum(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn conv_backward_matches_finite_differences() {
    let cases = [
        // n, cin, h, w, cout, k, stride, pad
        (1, 2, 5, 6, 3, 3, 1, 1),
        (2, 3, 4, 4, 2, 1, 1, 0),
        (1, 2, 7, 5, 2, 3, 2, 1),
        (1, 1, 6, 6, 2, 3, 1, 0),
        (1, 2, 6, 8, 1, 5, 1, 2),
        (1, 3, 9, 19, 2, 3, 2, 2),
    ];
    for (seed, &(n, cin, h, w, cout, k, stride, pad)) in cases.iter().enumerate() {
        let seed = seed as u64 * 10;
        let x = Tensor::<f64>::uniform(&[n, cin, h, w], -1.0, 1.0, &mut rng(seed));
        let kernel = Tensor::<f64>::uniform(&[cout, cin, k, k], -1.0, 1.0, &mut rng(seed + 1));
        let bias = Tensor::<f64>::uniform(&[cout], -1.0, 1.0, &mut rng(seed + 2));
        let y = conv2d(&x, &kernel, Some(&bias), stride, pad).unwrap();
        let wts = probe_weights(y.shape(), seed + 3);
        let g = conv2d_backward(&wts, &x, &kernel, stride, pad).unwrap();

        let f_x = |p: &Tensor<f64>| {
            weighted_sum(&conv2d(p, &kernel, Some(&bias), stride, pad).unwrap(), &wts)
        };
        let f_k =
            |p: &Tensor<f64>| weighted_sum(&conv2d(&x, p, Some(&bias), stride, pad).unwrap(), &wts);
        let f_b = |p: &Tensor<f64>| {
            weighted_sum(&conv2d(&x, &kernel, Some(p), stride, pad).unwrap(), &wts)
        };
        assert!(
            max_rel_err(&g.input, &numeric_grad(&x, EPS, f_x)) <= TOL,
            "input, case {seed}"
        );
        assert!(
            max_rel_err(&g.kernel, &numeric_grad(&kernel, EPS, f_k)) <= TOL,
            "kernel, case {seed}"
        );
        assert!(
            max_rel_err(&g.bias, &numeric_grad(&bias, EPS, f_b)) <= TOL,
            "bias, case {seed}"
        );
    }
}

#[test]
fn conv_matches_oracle_on_random_shapes() {
    let mut r = rng(99);
    for _ in 0..60 {
        let k = [1, 3, 5][r.random_range(0..3)];
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=k / 2 + 1);
        let h = r.random_range(k.max(2)..40);
        let w = r.random_range(k.max(2)..40);
        let (h, w) = (
            h + (h + 2 * pad - k) % stride,
            w + (w + 2 * pad - k) % stride,
        );
        let (n, cin, cout) = (
            r.random_range(1..3),
            r.random_range(1..5),
            r.random_range(1..6),
        );
        let x = Tensor::<f32>::uniform(&[n, cin, h, w], -1.0, 1.0, &mut r);
        let kernel = Tensor::<f32>::uniform(&[cout, cin, k, k], -1.0, 1.0, &mut r);
        let bias = Tensor::<f32>::uniform(&[cout], -1.0, 1.0, &mut r);
        let out = conv2d(&x, &kernel, Some(&bias), stride, pad).unwrap();
        let expected = conv2d_oracle(&x, &kernel, Some(&bias), stride, pad);
        assert_eq!(out.shape(), expected.shape());
        assert!(out.max_abs_diff(&expected).unwrap() <= 1e-6);
    }
}

#[test]
fn relu_pool_upsample_backward() {
    // Inputs are kept away from ReLU kinks and pooling ties.
    let mut r = rng(5);
    let x = Tensor::<f64>::uniform(&[1, 2, 4, 6], -1.0, 1.0, &mut r).map(|v| {
        if v.abs() < 0.05 {
            0.3
        } else {
            v
        }
    });
    let wts = probe_weights(x.shape(), 6);
    let g = relu_backward(&wts, &x).unwrap();
    let num = numeric_grad(&x, EPS, |p| weighted_sum(&relu(p), &wts));
    assert!(max_rel_err(&g, &num) <= TOL);

    let distinct: Vec<f64> = (0..48).map(|i| ((i * 37) % 48) as f64 * 0.1).collect();
    let x = Tensor::from_vec(vec![1, 2, 4, 6], distinct).unwrap();
    let wts = probe_weights(&[1, 2, 2, 3], 7);
    let g = maxpool2x2_backward(&wts, &x).unwrap();
    let num = numeric_grad(&x, EPS, |p| weighted_sum(&maxpool2x2(p).unwrap(), &wts));
    assert!(max_rel_err(&g, &num) <= TOL);

    let x = Tensor::<f64>::uniform(&[1, 2, 3, 2], -1.0, 1.0, &mut r);
    let wts = probe_weights(&[1, 2, 6, 4], 8);
    let g = upsample_nearest2x_backward(&wts).unwrap();
    let num = numeric_grad(&x, EPS, |p| {
        weighted_sum(&upsample_nearest2x(p).unwrap(), &wts)
    });
    assert!(max_rel_err(&g, &num) <= TOL);
}

#[test]
fn softmax_ce_backward() {
    let logits = Tensor::<f64>::uniform(&[2, 4, 3, 3], -2.0, 2.0, &mut rng(11));
    let mut r = rng(12);
    let labels: Vec<LabelMap> = (0..2)
        .map(|_| {
            let data = (0..9)
                .map(|_| {
                    if r.random_range(0..5) == 0 {
                        255
                    } else {
                        r.random_range(0..4)
                    }
                })
                .collect();
            LabelMap::from_vec(3, 3, data).unwrap()
        })
        .collect();
    let (_, g) = softmax_ce_loss(&logits, &labels).unwrap();
    let num = numeric_grad(&logits, EPS, |p| softmax_ce_loss(p, &labels).unwrap().0);
    assert!(max_rel_err(&g, &num) <= TOL);
}
