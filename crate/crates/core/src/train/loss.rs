use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Lower clamp applied to probabilities inside the log.
pub const PROB_FLOOR: f64 = 1e-7;

/// Categorical cross-entropy `-sum_c y_c ln p_c`, summed over pixels and
/// batch, divided by the pixel count `n*h*w`.
pub fn cross_entropy_loss<T: Float>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    probs.expect_shape(target.shape(), "cross_entropy_loss")?;
    let s = probs.shape();
    let total: f64 = probs
        .data()
        .iter()
        .zip(target.data())
        .filter(|(_, y)| **y != T::zero())
        .map(|(p, y)| -y.as_f64() * p.as_f64().max(PROB_FLOOR).ln())
        .sum();
    Ok(total / (s.n * s.h * s.w) as f64)
}

/// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets, in the
/// overflow-free form `max(x,0) - x*y + ln(1 + e^-|x|)`.
pub fn binary_cross_entropy_with_logits<T: Float>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<f64> {
    logits.expect_shape(target.shape(), "binary_cross_entropy_with_logits")?;
    let total: f64 = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
        })
        .sum();
    Ok(total / logits.numel() as f64)
}

/// Expands `n x 1 x h x w` integer labels into `n x classes x h x w` one-hot.
pub fn one_hot<T: Float>(labels: &Tensor<T>, classes: usize) -> Result<Tensor<T>> {
    let s = labels.shape();
    if s.c != 1 {
        return Err(Error::shape(format!(
            "labels must have one channel, got {s}"
        )));
    }
    let plane = s.plane();
    let mut out = Tensor::zeros([s.n, classes, s.h, s.w]);
    for n in 0..s.n {
        for (p, &l) in labels.sample(n).iter().enumerate() {
            let l = l.as_f64();
            if l < 0.0 || l.fract() != 0.0 || l as usize >= classes {
                return Err(Error::Contract(format!("label {l} outside 0..{classes}")));
            }
            let i = (n * classes + l as usize) * plane + p;
            out.data_mut()[i] = T::one();
        }
    }
    Ok(out)
}

/// Loss matching the model head: binary cross-entropy for a single logit
/// channel, softmax cross-entropy otherwise. `labels` is `n x 1 x h x w`.
pub fn loss_from_logits(logits: &Tensor<f32>, labels: &Tensor<f32>) -> Result<f64> {
    let classes = logits.shape().c;
    if classes == 1 {
        binary_cross_entropy_with_logits(logits, labels)
    } else {
        cross_entropy_loss(
            &crate::ops::softmax_channels(logits),
            &one_hot(labels, classes)?,
        )
    }
}
