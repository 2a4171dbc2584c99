//! Adam with bias correction and optional decoupled-from-nothing classic
//! L2 weight decay (decay is added to the gradient before the moment
//! updates). Moments live alongside the parameters they track; update
//! arithmetic runs in f64 regardless of the parameter scalar.

use ndarray::Array2;

use super::{NnError, Scalar};

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed steps; bias correction uses t+1 during the update.
    pub t: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64, weight_decay: f64, params: &[&Array2<T>]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }
}

/// One optimizer step over every tensor. Rejects non-finite gradients so a
/// diverging run fails loudly instead of poisoning the parameters.
pub fn adam_step<T: Scalar>(
    mut params: Vec<&mut Array2<T>>,
    grads: &[Array2<T>],
    state: &mut AdamState<T>,
) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::ShapeError(format!(
            "{} parameter tensors, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.raw_dim() != g.raw_dim() {
            return Err(NnError::ShapeError(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                g.dim(),
                p.dim()
            )));
        }
        if g.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(NnError::NumericsError(
                "non-finite gradient in optimizer step".into(),
            ));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for ((pv, gv), (mv, vv)) in p
            .iter_mut()
            .zip(grads[i].iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = gv.as_f64() + state.weight_decay * pv.as_f64();
            let m_new = state.beta1 * mv.as_f64() + (1.0 - state.beta1) * g;
            let v_new = state.beta2 * vv.as_f64() + (1.0 - state.beta2) * g * g;
            *mv = T::from_f64(m_new);
            *vv = T::from_f64(v_new);
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            *pv = T::from_f64(pv.as_f64() - state.lr * m_hat / (v_hat.sqrt() + state.eps));
        }
    }
    Ok(())
}
