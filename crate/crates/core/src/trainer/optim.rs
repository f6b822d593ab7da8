use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::scalar::{round_to_f32, Scalar};

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState { step: 0, m: vec![T::zero(); len], v: vec![T::zero(); len] }
    }
}

/// One AdamW update. Decay is decoupled: `p ← p·(1 − lr·wd)` before the
/// bias-corrected adaptive step `p ← p − lr·m̂/(√v̂ + eps)`.
pub fn adamw_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    lr: T,
    weight_decay: T,
    betas: (T, T),
    eps: T,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::dim("adamw_step", &[param.len()], &[grad.len(), state.m.len(), state.v.len()]));
    }
    let (b1, b2) = betas;
    state.step += 1;
    let t = state.step as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let shrink = T::one() - lr * weight_decay;
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] = param[i] * shrink - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over a named parameter set. Tensors without a gradient on a step are
/// left untouched, decay included.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    states: BTreeMap<String, AdamState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64, betas: (f64, f64), eps: f64) -> Self {
        AdamW { weight_decay, betas, eps, states: BTreeMap::new() }
    }

    /// Applies one update at learning rate `lr` and rounds updated values to
    /// single precision.
    pub fn step<P: Parameters<T> + ?Sized>(&mut self, params: &mut P, lr: f64) -> Result<()> {
        let mut result = Ok(());
        let (wd, betas, eps) = (T::lit(self.weight_decay), (T::lit(self.betas.0), T::lit(self.betas.1)), T::lit(self.eps));
        let states = &mut self.states;
        params.visit_mut("", &mut |name, t| {
            let Some(grad) = t.grad().map(<[T]>::to_vec) else { return };
            let state = states.entry(name).or_insert_with(|| AdamState::new(grad.len()));
            let step = adamw_step(t.data_mut(), &grad, state, T::lit(lr), wd, betas, eps);
            if result.is_ok() {
                result = step;
            }
            t.data_mut().iter_mut().for_each(|x| *x = round_to_f32(*x));
        });
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let mut p = vec![0.3, -1.2];
        let mut s = AdamState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, 0.1, 0.0, (0.9, 0.98), 1e-8).unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = vec![2.0f64, -4.0];
        let mut s = AdamState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, 1.0, 0.1, (0.9, 0.98), 1e-8).unwrap();
        assert!((p[0] - 1.8).abs() < 1e-15 && (p[1] + 3.6).abs() < 1e-15);
    }

    #[test]
    fn two_steps_follow_moment_recursion() {
        let (b1, b2, eps, lr) = (0.9f64, 0.98f64, 1e-8f64, 0.01f64);
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        adamw_step(&mut p, &[1.0], &mut s, lr, 0.0, (b1, b2), eps).unwrap();
        // m1 = 0.1, v1 = 0.02; m̂ = v̂ = 1
        let p1 = 1.0 - lr * 1.0 / (1.0 + eps);
        assert!((p[0] - p1).abs() < 1e-15);
        adamw_step(&mut p, &[1.0], &mut s, lr, 0.0, (b1, b2), eps).unwrap();
        let m2 = 0.9 * 0.1 + 0.1;
        let v2 = 0.98 * 0.02 + 0.02;
        let p2 = p1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p[0] - p2).abs() < 1e-15);
        assert!((s.m[0] - m2).abs() < 1e-15 && (s.v[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::new(2);
        assert!(adamw_step(&mut [0.0f64; 2], &[0.0; 3], &mut s, 0.1, 0.0, (0.9, 0.98), 1e-8).is_err());
    }
}
