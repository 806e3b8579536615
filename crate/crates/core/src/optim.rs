//! SGD with momentum, Adam, and learning-rate decay.

use std::f64::consts::PI;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::param::{ParamGroup, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrDecay {
    Constant,
    /// Cosine decay to zero over the run.
    Cosine,
    /// ×0.1 at 60% and again at 80% of the run.
    Step,
}

impl FromStr for LrDecay {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrDecay::Constant),
            "cosine" => Ok(LrDecay::Cosine),
            "step" => Ok(LrDecay::Step),
            _ => Err(Error::Config(format!("unknown lr decay `{s}`"))),
        }
    }
}

/// Learning rate at step `t` of `total`.
pub fn lr_at(base: f32, decay: LrDecay, t: u64, total: u64) -> f32 {
    let total = total.max(1);
    match decay {
        LrDecay::Constant => base,
        LrDecay::Cosine => (base as f64 * 0.5 * (1.0 + (PI * t as f64 / total as f64).cos())) as f32,
        LrDecay::Step => {
            let mut lr = base;
            if 10 * t >= 6 * total {
                lr *= 0.1;
            }
            if 10 * t >= 8 * total {
                lr *= 0.1;
            }
            lr
        }
    }
}

/// Optimizer state for one [`ParamSet`]. Frozen parameters are skipped.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f32,
    state1: Vec<Vec<f32>>,
    state2: Vec<Vec<f32>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f32, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f32>> = params.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        let state2 = match kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer { kind, weight_decay, state1: zeros, state2, steps: 0 }
    }

    /// Applies one update with learning rate `lr` using the gradients
    /// currently stored on the parameters. Parameters without a gradient are
    /// left alone.
    pub fn step(&mut self, params: &mut ParamSet, lr: f32) {
        self.steps += 1;
        let wd = self.weight_decay;
        for (i, p) in params.params_mut().iter_mut().enumerate() {
            if p.group == ParamGroup::Frozen {
                continue;
            }
            let Some(g) = p.tensor.grad().map(<[f32]>::to_vec) else { continue };
            let w = p.tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let v = &mut self.state1[i];
                    for ((w, g), v) in w.iter_mut().zip(&g).zip(v.iter_mut()) {
                        let d = g + wd * *w;
                        *v = momentum * *v + d;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2 } => {
                    let bc1 = 1.0 - beta1.powi(self.steps as i32);
                    let bc2 = 1.0 - beta2.powi(self.steps as i32);
                    let (m, s) = (&mut self.state1[i], &mut self.state2[i]);
                    for (((w, g), m), s) in w.iter_mut().zip(&g).zip(m.iter_mut()).zip(s.iter_mut()) {
                        let d = g + wd * *w;
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *s = beta2 * *s + (1.0 - beta2) * d * d;
                        *w -= lr * (*m / bc1) / ((*s / bc2).sqrt() + 1e-8);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn lr_schedules() {
        assert_eq!(lr_at(0.1, LrDecay::Constant, 50, 100), 0.1);
        assert_eq!(lr_at(0.1, LrDecay::Cosine, 0, 100), 0.1);
        assert!(lr_at(0.1, LrDecay::Cosine, 100, 100).abs() < 1e-9);
        assert!((lr_at(0.3, LrDecay::Step, 59, 100) - 0.3).abs() < 1e-7);
        assert!((lr_at(0.3, LrDecay::Step, 60, 100) - 0.03).abs() < 1e-7);
        assert!((lr_at(0.3, LrDecay::Step, 80, 100) - 0.003).abs() < 1e-7);
    }

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::full(&[1], 1.0), ParamGroup::BinaryExtractor).unwrap();
        ps.add("f", Tensor::full(&[1], 1.0), ParamGroup::Frozen).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.9 }, 0.0, &ps);
        for _ in 0..2 {
            ps.params_mut()[0].tensor.accumulate_grad(&[2.0]);
            ps.params_mut()[1].tensor.accumulate_grad(&[2.0]);
            opt.step(&mut ps, 0.1);
            ps.zero_grad();
        }
        // v1 = 2, w = 0.8; v2 = 0.9*2 + 2 = 3.8, w = 0.42
        assert!((ps.param(0).tensor.data()[0] - 0.42).abs() < 1e-6);
        assert_eq!(ps.param(1).tensor.data()[0], 1.0);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::full(&[2], 0.0), ParamGroup::BinaryClassifier).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam { beta1: 0.9, beta2: 0.999 }, 0.0, &ps);
        ps.params_mut()[0].tensor.accumulate_grad(&[3.0, -0.5]);
        opt.step(&mut ps, 0.01);
        let w = ps.param(0).tensor.data();
        assert!((w[0] + 0.01).abs() < 1e-6 && (w[1] - 0.01).abs() < 1e-6);
    }
}
