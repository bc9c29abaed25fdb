//! SGD with Nesterov momentum and a cosine learning-rate schedule.

use anomem_autodiff::Tensor;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: usize) -> Result<Self> {
        if lr_min > lr_max || total_steps == 0 {
            return Err(invalid("schedule needs lr_min <= lr_max and total_steps >= 1"));
        }
        Ok(Self {
            lr_max,
            lr_min,
            total_steps,
        })
    }

    /// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(invalid(format!("step {step} beyond schedule of {}", self.total_steps)));
        }
        let t = step as f64 / self.total_steps as f64;
        Ok(self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

pub fn cosine_lr(schedule: &Schedule, step: usize) -> Result<f64> {
    schedule.lr(step)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdNesterov {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor>,
}

impl SgdNesterov {
    pub fn new(momentum: f64, weight_decay: f64, params: &[&Tensor]) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    /// `v ← μv − lr·g`, `p ← p + μv − lr·g`, with `g` including weight
    /// decay. A parameter whose gradient is zero everywhere is skipped
    /// entirely, velocity and decay included.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(invalid("optimizer: parameter, gradient and velocity counts differ"));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(anomem_autodiff::TensorError::Dimension {
                    op: "sgd_nesterov_step",
                    msg: format!("param {:?}, grad {:?}", p.shape(), g.shape()),
                }
                .into());
            }
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            let mu = self.momentum;
            let wd = self.weight_decay;
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let g = gv + wd * *pv;
                *vv = mu * *vv - lr * g;
                *pv += mu * *vv - lr * g;
            }
        }
        Ok(())
    }
}
