//! SGD with momentum and weight decay, driven by a cosine-annealed rate.

use std::f64::consts::PI;

use crate::error::{contract, Error, Result};
use crate::numeric::Tensor;

/// Cosine annealing from `peak` at step 0 down to 0 at step `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn new(peak: f64, total: usize) -> Self {
        CosineSchedule { peak, total }
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        cosine_lr(step, self)
    }
}

pub fn cosine_lr(step: usize, schedule: &CosineSchedule) -> Result<f64> {
    if step > schedule.total {
        return Err(Error::ScheduleExhausted { step, total: schedule.total });
    }
    if schedule.total == 0 {
        return Ok(schedule.peak);
    }
    let frac = step as f64 / schedule.total as f64;
    Ok(schedule.peak * 0.5 * (1.0 + (PI * frac).cos()))
}

#[derive(Debug, Clone)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply decay directly to the weights instead of folding it into the gradient.
    pub decoupled: bool,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdState { momentum, weight_decay, decoupled: false, velocity: Vec::new() }
    }

    pub fn decoupled(mut self, on: bool) -> Self {
        self.decoupled = on;
        self
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// One SGD update over `params`, reading each tensor's gradient slot.
///
/// Frozen tensors (no gradient slot) are skipped. Velocity buffers are
/// allocated on the first call and only when momentum is nonzero.
pub fn sgd_step(params: &mut [&mut Tensor], state: &mut SgdState, lr: f64) -> Result<()> {
    if state.momentum > 0.0 {
        if state.velocity.is_empty() {
            state.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        contract!(state.velocity.len() == params.len(), "optimizer saw {} parameters, expected {}", params.len(), state.velocity.len());
        for (p, v) in params.iter().zip(&state.velocity) {
            contract!(p.len() == v.len(), "parameter size changed from {} to {}", v.len(), p.len());
        }
    }
    for (i, p) in params.iter_mut().enumerate() {
        let Some(grad) = p.grad.take() else { continue };
        contract!(grad.len() == p.len(), "gradient length {} does not match parameter length {}", grad.len(), p.len());
        if grad.iter().any(|g| !g.is_finite()) {
            p.grad = Some(grad);
            return Err(Error::NonFinite { op: "sgd_step" });
        }
        let wd = state.weight_decay;
        let coupled = !state.decoupled && wd != 0.0;
        {
            let w = p.values_mut();
            if state.momentum > 0.0 {
                let v = &mut state.velocity[i];
                for j in 0..w.len() {
                    let g = if coupled { grad[j] + wd * w[j] } else { grad[j] };
                    v[j] = state.momentum * v[j] + g;
                }
                for j in 0..w.len() {
                    if state.decoupled {
                        w[j] -= lr * wd * w[j];
                    }
                    w[j] -= lr * v[j];
                }
            } else {
                for j in 0..w.len() {
                    let g = if coupled { grad[j] + wd * w[j] } else { grad[j] };
                    if state.decoupled {
                        w[j] -= lr * wd * w[j];
                    }
                    w[j] -= lr * g;
                }
            }
        }
        p.grad = Some(grad);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Tensor {
        Tensor::vector(vec![v]).trainable()
    }

    fn step(w: &mut Tensor, g: f64, st: &mut SgdState, lr: f64) {
        w.grad = Some(vec![g]);
        sgd_step(&mut [w], st, lr).unwrap();
    }

    #[test]
    fn schedule_examples() {
        let s = CosineSchedule::new(0.01, 20);
        assert_eq!(s.lr(0).unwrap(), 0.01);
        assert!(s.lr(20).unwrap().abs() < 1e-18);
        assert!((s.lr(10).unwrap() - 0.005).abs() < 1e-15);
        assert!(matches!(s.lr(21), Err(Error::ScheduleExhausted { .. })));
    }

    #[test]
    fn schedule_is_non_increasing() {
        let s = CosineSchedule::new(0.3, 37);
        let lrs: Vec<f64> = (0..=37).map(|i| s.lr(i).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn plain_descent() {
        let mut w = param(2.0);
        step(&mut w, 0.5, &mut SgdState::new(0.0, 0.0), 1.0);
        assert_eq!(w.values(), &[1.5]);
    }

    #[test]
    fn zero_gradient_keeps_weight_and_decays_velocity() {
        let mut w = param(1.0);
        let mut st = SgdState::new(0.5, 0.0);
        step(&mut w, 2.0, &mut st, 0.0);
        assert_eq!(st.velocity()[0], vec![2.0]);
        step(&mut w, 0.0, &mut st, 0.0);
        assert_eq!(w.values(), &[1.0]);
        assert_eq!(st.velocity()[0], vec![1.0]);
    }

    #[test]
    fn two_momentum_steps() {
        let mut w = param(0.0);
        let mut st = SgdState::new(0.9, 0.0);
        step(&mut w, 1.0, &mut st, 1.0);
        assert_eq!(st.velocity()[0], vec![1.0]);
        assert_eq!(w.values(), &[-1.0]);
        step(&mut w, 1.0, &mut st, 1.0);
        assert!((st.velocity()[0][0] - 1.9).abs() < 1e-15);
        assert!((w.values()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn coupled_decay_adds_scaled_weight() {
        // With momentum 0 and lr 1 the update equals g' = g + wd·w.
        for w0 in [0.0, 3.0, -2.0] {
            let mut w = param(w0);
            step(&mut w, 0.25, &mut SgdState::new(0.0, 0.0005), 1.0);
            let applied = w0 - w.values()[0];
            assert!((applied - (0.25 + 0.0005 * w0)).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut frozen = Tensor::vector(vec![1.0, -2.0]);
        let before = frozen.to_le_bytes();
        let mut live = param(1.0);
        let mut st = SgdState::new(0.9, 0.0005);
        for _ in 0..10 {
            live.grad = Some(vec![0.3]);
            sgd_step(&mut [&mut frozen, &mut live], &mut st, 0.1).unwrap();
        }
        assert_eq!(frozen.to_le_bytes(), before);
    }

    #[test]
    fn converges_on_quadratic() {
        let a = 1.7;
        let mut w = param(-3.0);
        let mut st = SgdState::new(0.0, 0.0);
        let sched = CosineSchedule::new(0.1, 200);
        for s in 0..200 {
            let g = 2.0 * (w.values()[0] - a);
            step(&mut w, g, &mut st, sched.lr(s).unwrap());
        }
        assert!((w.values()[0] - a).abs() <= 1e-3, "w = {}", w.values()[0]);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut w = Tensor::vector(vec![1.0, 2.0]).trainable();
        w.grad = Some(vec![1.0]);
        assert!(matches!(sgd_step(&mut [&mut w], &mut SgdState::new(0.0, 0.0), 0.1), Err(Error::Contract(_))));
    }
}
