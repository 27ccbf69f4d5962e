//! ADAM with bias correction.

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::tape::GradStore;

use super::{lr_at, TrainConfig};

/// First/second moment buffers, aligned with the model's parameter order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn zeros_like(model: &Model<f32>) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// In-place ADAM update of one parameter buffer.
///
/// `iter` is the 0-based iteration; the learning rate comes from the
/// schedule and bias correction uses t = iter + 1:
/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;
/// p <- p - lr(iter) * m_hat / (sqrt(v_hat) + eps).
pub fn adam_update(
    params: &mut [f32],
    grads: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    iter: u64,
    config: &TrainConfig,
) {
    debug_assert_eq!(params.len(), grads.len());
    let lr = lr_at(iter, config) as f32;
    let t = iter as i32 + 1;
    let b1 = config.beta1 as f32;
    let b2 = config.beta2 as f32;
    let eps = config.epsilon as f32;
    let bc1 = (1.0 - config.beta1.powi(t)) as f32;
    let bc2 = (1.0 - config.beta2.powi(t)) as f32;

    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One ADAM step over every model parameter. A non-finite gradient
/// aborts with a diagnostic naming the parameter.
pub fn adam_step(
    model: &mut Model<f32>,
    grads: &GradStore<f32>,
    state: &mut AdamState,
    iter: u64,
    config: &TrainConfig,
) -> Result<()> {
    for (idx, (name, param)) in model.params_mut().into_iter().enumerate() {
        let grad = grads
            .get(param)
            .ok_or_else(|| Error::invalid("adam_step", format!("no gradient for {name}")))?
            .clone();
        if grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
                iteration: iter,
            });
        }
        adam_update(
            param.data_mut(),
            grad.data(),
            &mut state.m[idx],
            &mut state.v[idx],
            iter,
            config,
        );
    }
    Ok(())
}
