use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixel-wise softmax cross-entropy, averaged over non-ignored pixels.
///
/// `labels` holds one map per batch item. Returns the loss and its gradient
/// with respect to `logits`. When every pixel is ignored the loss and the
/// gradient are zero.
pub fn softmax_ce_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[LabelMap],
) -> Result<(T, Tensor<T>)> {
    let (n, c, h, w) = logits.dims4("softmax_ce_loss")?;
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_ce_loss",
            format!("{} label maps for batch of {n}", labels.len()),
        ));
    }
    for l in labels {
        if (l.height(), l.width()) != (h, w) {
            return Err(Error::shape(
                "softmax_ce_loss",
                format!("label {}×{} vs logits {h}×{w}", l.height(), l.width()),
            ));
        }
        l.validate(c)?;
    }

    let plane = h * w;
    let x = logits.data();
    let mut grad = vec![T::zero(); logits.numel()];
    let mut total = T::zero();
    let mut count = 0usize;
    let mut probs = vec![T::zero(); c];
    for (b, map) in labels.iter().enumerate() {
        for (p, &label) in map.data().iter().enumerate() {
            if label == IGNORE_LABEL {
                continue;
            }
            let at = |k: usize| (b * c + k) * plane + p;
            let max = (0..c).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (k, pr) in probs.iter_mut().enumerate() {
                *pr = (x[at(k)] - max).exp();
                denom += *pr;
            }
            total += denom.ln() + max - x[at(label as usize)];
            for (k, pr) in probs.iter().enumerate() {
                grad[at(k)] = *pr / denom;
            }
            grad[at(label as usize)] -= T::one();
            count += 1;
        }
    }
    if count == 0 {
        return Ok((T::zero(), Tensor::zeros(logits.shape())));
    }
    let scale = T::one() / T::from_usize(count).expect("pixel count");
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((
        total * scale,
        Tensor::from_vec(logits.shape().to_vec(), grad)?,
    ))
}
