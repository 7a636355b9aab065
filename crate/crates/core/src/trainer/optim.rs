use super::TrainPlan;
use crate::error::{ProbeError, Result};
use crate::real::Real;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            step: 0,
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
pub fn adamw_step<F: Real>(
    values: &mut [F],
    grads: &[F],
    state: &mut AdamState<F>,
    lr: f64,
    plan: &TrainPlan,
) -> Result<()> {
    if values.len() != grads.len() || state.m.len() != values.len() || state.v.len() != values.len() {
        return Err(ProbeError::Shape(format!(
            "adamw: {} params, {} grads, {} moments",
            values.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(ProbeError::NonFinite(format!("gradient at flat index {i}")));
    }
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let (b1, b2) = (F::lit(plan.beta1), F::lit(plan.beta2));
    let (one_b1, one_b2) = (F::lit(1.0 - plan.beta1), F::lit(1.0 - plan.beta2));
    let c1 = F::lit(1.0 - plan.beta1.powi(t));
    let c2 = F::lit(1.0 - plan.beta2.powi(t));
    let (lr, eps, wd) = (F::lit(lr), F::lit(plan.eps), F::lit(plan.weight_decay));
    for (((p, &g), m), v) in values
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        let denom = v_hat.sqrt() + eps;
        let adam = if denom > F::zero() { m_hat / denom } else { F::zero() };
        *p -= lr * (adam + wd * *p);
    }
    Ok(())
}

/// `lr0 * (1 + cos(pi * step / total_steps)) / 2`, clamped to `[0, lr0]`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = (step.min(total_steps) as f64) / total_steps as f64;
    if frac >= 1.0 {
        return 0.0;
    }
    (lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).clamp(0.0, lr0)
}
