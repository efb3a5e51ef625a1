use crate::error::{Error, Result};

use super::TrainConfig;

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of completed steps.
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Moment buffers are allocated on the first
/// call if `state` is empty. Arithmetic runs in `f64`; parameters are
/// rounded back to `f32`.
pub fn adam_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "adam: {} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() && state.t == 0 {
        *state = AdamState::new(params.iter().map(|p| p.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m.get(i).map(Vec::len) != Some(p.len()) {
            return Err(Error::shape(format!(
                "adam: size mismatch at parameter {i}"
            )));
        }
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((theta, &grad), m), v) in p
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let grad = grad as f64;
            *m = b1 * *m + (1.0 - b1) * grad;
            *v = b2 * *v + (1.0 - b2) * grad * grad;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta =
                (*theta as f64 - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon)) as f32;
        }
    }
    Ok(())
}
