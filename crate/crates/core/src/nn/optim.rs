use serde::{Deserialize, Serialize};

use super::layers::Param;

/// Learning-rate multiplier `0.5 * (1 + cos(pi * step / total_steps))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(total_steps: usize) -> Self {
        Self { total_steps }
    }

    pub fn factor(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 1.0;
        }
        if step > self.total_steps {
            log::warn!(
                "cosine schedule step {step} exceeds total {}; clamping factor to 0",
                self.total_steps
            );
            return 0.0;
        }
        let frac = step as f64 / self.total_steps as f64;
        0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Parameters sharing one base learning rate.
pub struct ParamGroup<'a> {
    pub name: &'static str,
    pub learning_rate: f64,
    pub params: Vec<&'a mut Param>,
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamW {
    /// Applies one update. `step` is zero-based; bias correction uses
    /// `step + 1` and the learning rate is scaled by `schedule.factor(step)`.
    pub fn step(&self, groups: &mut [ParamGroup<'_>], step: usize, schedule: &CosineSchedule) {
        let t = (step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let factor = schedule.factor(step);
        for group in groups.iter_mut() {
            let lr = group.learning_rate * factor;
            for p in group.params.iter_mut() {
                let Param { value, grad, m, v } = &mut **p;
                let values = value.data_mut();
                let grads = grad.data();
                let ms = m.data_mut();
                let vs = v.data_mut();
                for i in 0..values.len() {
                    let g = grads[i];
                    ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * g;
                    vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * g * g;
                    let mhat = ms[i] / bc1;
                    let vhat = vs[i] / bc2;
                    values[i] -= lr * self.weight_decay * values[i];
                    values[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor2D;
    use proptest::prelude::*;

    fn scalar(v: f64, g: f64) -> Param {
        let mut p = Param::new(Tensor2D::filled(1, 1, v));
        p.grad = Tensor2D::filled(1, 1, g);
        p
    }

    fn run_step(p: &mut Param, lr: f64, decay: f64, step: usize, sched: CosineSchedule) {
        let opt = AdamW {
            weight_decay: decay,
            ..AdamW::default()
        };
        let mut groups = [ParamGroup {
            name: "p",
            learning_rate: lr,
            params: vec![p],
        }];
        opt.step(&mut groups, step, &sched);
    }

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let mut p = scalar(0.7, 0.0);
        run_step(&mut p, 0.1, 0.0, 0, CosineSchedule::new(10));
        assert_eq!(p.value.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 at t = 1, so the move is lr / (1 + eps).
        let mut p = scalar(1.0, 1.0);
        run_step(&mut p, 0.1, 0.0, 0, CosineSchedule::new(100));
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
        assert!((p.value.data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_is_decoupled_from_moments() {
        // With zero gradient the moments stay zero and only decay acts.
        let mut p = scalar(2.0, 0.0);
        run_step(&mut p, 0.1, 0.5, 0, CosineSchedule::new(100));
        assert!((p.value.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        assert_eq!(p.m.data(), &[0.0]);
    }

    #[test]
    fn cosine_midpoint_is_half() {
        let s = CosineSchedule::new(200);
        assert!((s.factor(100) - 0.5).abs() < 1e-15);
        assert_eq!(s.factor(0), 1.0);
        assert!(s.factor(200).abs() < 1e-15);
        assert_eq!(s.factor(201), 0.0);
    }

    proptest! {
        #[test]
        fn cosine_factor_non_increasing(total in 1usize..5000, a in 0usize..6000, b in 0usize..6000) {
            let s = CosineSchedule::new(total);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.factor(hi) <= s.factor(lo));
        }

        #[test]
        fn zero_grad_zero_decay_identity(values in proptest::collection::vec(-10.0f64..10.0, 1..20), step in 0usize..50) {
            let mut p = Param::new(Tensor2D::from_vec(1, values.len(), values.clone()).unwrap());
            run_step(&mut p, 0.01, 0.0, step, CosineSchedule::new(100));
            prop_assert_eq!(p.value.data(), values.as_slice());
        }
    }
}
