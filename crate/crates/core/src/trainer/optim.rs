use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `p ← p − lr·λ·p − lr·m̂ / (√v̂ + ε)`.
pub fn optimizer_update<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape(
            "optimizer",
            &[params.len()],
            &[grads.len(), state.m.len(), state.v.len()],
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::shape("optimizer", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
    let (c1, c2) = (T::of(1.0 - ADAM_BETA1), T::of(1.0 - ADAM_BETA2));
    let bc1 = T::of(1.0 - ADAM_BETA1.powi(t));
    let bc2 = T::of(1.0 - ADAM_BETA2.powi(t));
    let eps = T::of(ADAM_EPS);
    let lr_t = T::of(lr);
    let decay = T::one() - T::of(lr * weight_decay);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + c1 * gj;
            v[j] = b2 * v[j] + c2 * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Global L2 norm of all gradients, accumulated in f64.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales the gradients so their global norm is at most `max_norm` and
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm = {norm}")));
    }
    if norm > max_norm {
        let scale = T::of(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * scale;
            }
        }
    }
    Ok(norm)
}
