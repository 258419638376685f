use crate::error::{NumError, Result};
use crate::scalar::Scalar;
use crate::tensor::Parameter;

/// Bias-corrected Adam state for one parameter group. The step counter is
/// shared by the group and advances once per `adam_step` call.
#[derive(Clone, Debug)]
pub struct AdamState<F: Scalar> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(lr: F) -> Self {
        AdamState {
            lr,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One in-place Adam update for a parameter group. `grads[i]` must match
/// `params[i]` in length; moment buffers are allocated on first use and
/// must keep matching afterwards.
pub fn adam_step<F: Scalar>(
    params: &mut [&mut Parameter<F>],
    grads: &[&[F]],
    state: &mut AdamState<F>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(NumError::contract(
            "adam_step",
            format!("{} params vs {} grads", params.len(), grads.len()),
        ));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
        state.v = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
    }
    if state.m.len() != params.len() {
        return Err(NumError::contract(
            "adam_step",
            format!("state tracks {} params, got {}", state.m.len(), params.len()),
        ));
    }
    state.t += 1;
    let one = F::one();
    let b1 = state.beta1;
    let b2 = state.beta2;
    // 1 − βᵗ computed in f64: βᵗ underflows harmlessly for large t.
    let bc1 = F::from_f64(1.0 - state.beta1.to_f64().powi(state.t as i32));
    let bc2 = F::from_f64(1.0 - state.beta2.to_f64().powi(state.t as i32));

    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i];
        if g.len() != p.len() {
            return Err(NumError::contract(
                "adam_step",
                format!("param {} has {} entries, grad has {}", i, p.len(), g.len()),
            ));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            if !g[j].is_finite() {
                return Err(NumError::NonFinite { op: "adam_step" });
            }
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.data[j] = p.data[j] - state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
