//! AdamW with decoupled weight decay, and the linear warmup/decay schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One AdamW update with bias-corrected moments and decoupled decay.
/// `step` is 1-based. Errors on non-finite gradients.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<S: Scalar>(
    param: &mut Matrix<S>,
    grad: &Matrix<S>,
    m: &mut Matrix<S>,
    v: &mut Matrix<S>,
    step: usize,
    lr: S,
    weight_decay: S,
    hyper: AdamHyper,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != m.shape() || param.shape() != v.shape() {
        return Err(Error::shape("adamw_step", "param/grad/moment shapes differ"));
    }
    if !grad.is_finite() {
        return Err(Error::Training { step, detail: "non-finite gradient".into() });
    }
    let b1 = S::cast(hyper.beta1);
    let b2 = S::cast(hyper.beta2);
    let eps = S::cast(hyper.eps);
    let one = S::one();
    let bc1 = one - S::cast(hyper.beta1.powi(step as i32));
    let bc2 = one - S::cast(hyper.beta2.powi(step as i32));
    for i in 0..param.len() {
        let g = grad.data()[i];
        let mi = b1 * m.data()[i] + (one - b1) * g;
        let vi = b2 * v.data()[i] + (one - b2) * g * g;
        m.data_mut()[i] = mi;
        v.data_mut()[i] = vi;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let p = param.data()[i];
        param.data_mut()[i] = p - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * weight_decay * p;
    }
    Ok(())
}

/// Linear warmup to the peak over `ceil(warmup_ratio * total)` steps, then
/// linear decay to exactly 0 at `total_steps`. Steps are 1-based so the very
/// first step already has a positive rate.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_ratio: f64,
    pub peak_lr: f64,
}

impl Schedule {
    pub fn new(total_steps: usize, warmup_ratio: f64, peak_lr: f64) -> Self {
        Schedule { total_steps, warmup_ratio, peak_lr }
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_ratio * self.total_steps as f64).ceil() as usize).max(1)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step <= warm {
            self.peak_lr * step as f64 / warm as f64
        } else if step >= self.total_steps {
            0.0
        } else {
            self.peak_lr * (self.total_steps - step) as f64
                / (self.total_steps - warm) as f64
        }
    }

    /// lr divided by the peak; lets a parameter group with its own base rate
    /// follow the same shape.
    pub fn shape_at(&self, step: usize) -> f64 {
        self.lr_at(step) / self.peak_lr
    }
}

/// Per-parameter learning rate and decay, resolved by the caller per group.
#[derive(Debug, Clone, Copy)]
pub struct GroupSetting {
    pub lr: f64,
    pub weight_decay: f64,
}

/// Keyed AdamW state. Moment slots are created lazily per parameter name and
/// iterate in name order, so updates are deterministic.
#[derive(Debug, Clone)]
pub struct Optimizer {
    hyper: AdamHyper,
    step: usize,
    slots: BTreeMap<String, (Matrix<f64>, Matrix<f64>)>,
}

impl Optimizer {
    pub fn new(hyper: AdamHyper) -> Self {
        Optimizer { hyper, step: 0, slots: BTreeMap::new() }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Applies one optimization step to every named parameter. `updates`
    /// should already be sorted by name; the slot map keeps state keyed the
    /// same way.
    pub fn apply(
        &mut self,
        updates: Vec<(String, &mut Matrix<f64>, &Matrix<f64>, GroupSetting)>,
    ) -> Result<()> {
        self.step += 1;
        for (name, param, grad, setting) in updates {
            let (m, v) = self
                .slots
                .entry(name)
                .or_insert_with(|| (Matrix::zeros(param.rows(), param.cols()), Matrix::zeros(param.rows(), param.cols())));
            adamw_step(
                param,
                grad,
                m,
                v,
                self.step,
                setting.lr,
                setting.weight_decay,
                self.hyper,
            )?;
        }
        Ok(())
    }
}
