//! Independent reference implementations used only by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Textbook nested-loop convolution, one output element at a time.
pub fn conv2d_oracle<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let s = input.shape();
    let k = kernel.shape();
    let (n, cin, h, w) = (s[0], s[1], s[2] as isize, s[3] as isize);
    let (cout, kh, kw) = (k[0], k[2], k[3]);
    let ho = (h as usize + 2 * pad - kh) / stride + 1;
    let wo = (w as usize + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let x = input.data();
    let kd = kernel.data();
    for b in 0..n {
        for o in 0..cout {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = bias.map_or(T::zero(), |bb| bb.data()[o]);
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                    continue;
                                }
                                let xi = ((b * cin + c) * h as usize + iy as usize) * w as usize
                                    + ix as usize;
                                acc += x[xi] * kd[((o * cin + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out.data_mut()[((b * cout + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    out
}

/// Central finite difference of `f` at every coordinate of `x`.
pub fn numeric_grad(
    x: &Tensor<f64>,
    eps: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Tensor<f64> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// `max |a − n| / max(|a|, |n|, 1e-3)` over all elements.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
