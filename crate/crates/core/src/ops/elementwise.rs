use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`]; the subgradient at 0 is taken as 0.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("relu_backward", grad_out, input)?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape().to_vec(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

pub(crate) fn add_assign<T: Scalar>(acc: &mut Tensor<T>, other: &Tensor<T>) -> Result<()> {
    same_shape("add_assign", acc, other)?;
    for (a, &b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
    Ok(())
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// 2×2 max pooling with stride 2. Ties resolve to the first element in
/// row-major window order.
pub fn maxpool2x2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("maxpool2x2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2x2",
            format!("spatial size {h}×{w} is not even"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let (_, v) = window_argmax(plane, w, y, xx);
                out.push(v);
            }
        }
    }
    Tensor::from_vec(vec![n, c, ho, wo], out)
}

#[inline]
fn window_argmax<T: Scalar>(plane: &[T], w: usize, y: usize, x: usize) -> (usize, T) {
    let mut best = (2 * y) * w + 2 * x;
    for idx in [
        (2 * y) * w + 2 * x + 1,
        (2 * y + 1) * w + 2 * x,
        (2 * y + 1) * w + 2 * x + 1,
    ] {
        if plane[idx] > plane[best] {
            best = idx;
        }
    }
    (best, plane[best])
}

pub fn maxpool2x2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("maxpool2x2_backward")?;
    if grad_out.shape() != [n, c, h / 2, w / 2] || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2x2_backward",
            format!("grad {:?} for input {:?}", grad_out.shape(), input.shape()),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut grad = vec![T::zero(); input.numel()];
    for p in 0..n * c {
        let plane = &input.data()[p * h * w..(p + 1) * h * w];
        let gplane = &grad_out.data()[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                let (idx, _) = window_argmax(plane, w, y, x);
                grad[p * h * w + idx] += gplane[y * wo + x];
            }
        }
    }
    Tensor::from_vec(input.shape().to_vec(), grad)
}

pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("upsample_nearest2x")?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::from_vec(vec![n, c, ho, wo], out)
}

pub fn upsample_nearest2x_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, ho, wo) = grad_out.dims4("upsample_nearest2x_backward")?;
    if ho % 2 != 0 || wo % 2 != 0 {
        return Err(Error::shape(
            "upsample_nearest2x_backward",
            format!("grad spatial size {ho}×{wo} is not even"),
        ));
    }
    let (h, w) = (ho / 2, wo / 2);
    let mut grad = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let gplane = &grad_out.data()[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                grad[p * h * w + (y / 2) * w + x / 2] += gplane[y * wo + x];
            }
        }
    }
    Tensor::from_vec(vec![n, c, h, w], grad)
}
