use std::f64::consts::PI;

use crate::autodiff::{ParamStore, Tensor};
use crate::{Error, Result};

/// `base_lr · cos(7π·step / (16·total_steps))`.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("cosine_lr: total_steps must be positive"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!(
            "cosine_lr: step {step} beyond total {total_steps}"
        )));
    }
    Ok(base_lr * (7.0 * PI * step as f64 / (16.0 * total_steps as f64)).cos())
}

fn check_grads(store: &ParamStore, grads: &[Tensor]) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for ((name, p), g) in store.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient shape {:?} for {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient for parameter {name}")));
        }
    }
    Ok(())
}

/// SGD with Nesterov momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdNesterov {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdNesterov {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.velocity
    }

    /// `v ← m·v + g;  p ← p − lr·(g + m·v)`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        check_grads(store, grads)?;
        let (m, wd) = (self.momentum, self.weight_decay);
        for ((p, g), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocity)
        {
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let g = if wd != 0.0 { gi + wd * *pi } else { gi };
                *vi = m * *vi + g;
                *pi -= lr * (g + m * *vi);
            }
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn with_defaults(store: &ParamStore, weight_decay: f64) -> Self {
        Self::new(store, 0.9, 0.999, 1e-8, weight_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Restores moment buffers and step count, e.g. from a checkpoint.
    pub fn restore(
        &mut self,
        step: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    ) -> Result<()> {
        let ok = |b: &[Vec<f64>]| {
            b.len() == self.first.len()
                && b.iter().zip(&self.first).all(|(x, y)| x.len() == y.len())
        };
        if !ok(&first) || !ok(&second) {
            return Err(Error::invalid(
                "AdamW moment buffers do not match parameter shapes",
            ));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        check_grads(store, grads)?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                if wd != 0.0 {
                    *pi -= lr * wd * *pi;
                }
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
