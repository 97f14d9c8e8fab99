use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

const MIN_AVERAGE: f64 = 1e-6;

/// How unlabeled targets are formed from the weak-view prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoLabelMode {
    /// Distribution-aligned soft prediction, no sharpening.
    SoftDa,
    /// One-hot at the argmax, no alignment.
    OneHot,
}

/// Running class-marginal estimate for distribution alignment.
///
/// The running average is the arithmetic mean of the last `capacity`
/// batch-mean predictions, or the target marginal before any observation.
#[derive(Clone, Debug, PartialEq)]
pub struct DaState {
    window: VecDeque<Vec<f64>>,
    capacity: usize,
    target: Vec<f64>,
}

impl DaState {
    /// Uniform target marginal.
    pub fn new(classes: usize, capacity: usize) -> Self {
        Self {
            window: VecDeque::new(),
            capacity: capacity.max(1),
            target: vec![1.0 / classes as f64; classes],
        }
    }

    pub fn with_target(target: Vec<f64>, capacity: usize) -> Result<Self> {
        if target.iter().any(|&t| t <= 0.0) || (target.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("invalid DA target {target:?}")));
        }
        Ok(Self {
            window: VecDeque::new(),
            capacity: capacity.max(1),
            target,
        })
    }

    pub fn classes(&self) -> usize {
        self.target.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn window(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.window.iter()
    }

    pub fn running_average(&self) -> Vec<f64> {
        if self.window.is_empty() {
            return self.target.clone();
        }
        let mut avg = vec![0.0; self.classes()];
        for m in &self.window {
            avg.iter_mut().zip(m).for_each(|(a, v)| *a += v);
        }
        let n = self.window.len() as f64;
        avg.iter_mut().for_each(|a| *a /= n);
        avg
    }

    /// Rescales each row by `target / running_average` and renormalizes.
    pub fn align(&self, p: &Tensor) -> Result<Tensor> {
        let c = self.classes();
        if p.is_matrix() && p.cols() != c {
            return Err(Error::invalid(format!(
                "DA over {c} classes got rows of width {}",
                p.cols()
            )));
        }
        let ratio: Vec<f64> = self
            .running_average()
            .iter()
            .zip(&self.target)
            .map(|(&a, &t)| t / a.max(MIN_AVERAGE))
            .collect();
        let mut out = p.clone();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(&ratio).for_each(|(v, r)| *v *= r);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(out)
    }

    /// Pushes one batch-mean prediction into the sliding window.
    pub fn observe(&mut self, batch_mean: Vec<f64>) -> Result<()> {
        if batch_mean.len() != self.classes() {
            return Err(Error::invalid("DA observation has the wrong class count"));
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(batch_mean);
        Ok(())
    }

    /// Replaces the window, e.g. when resuming.
    pub fn restore_window(&mut self, entries: Vec<Vec<f64>>) -> Result<()> {
        if entries.len() > self.capacity || entries.iter().any(|e| e.len() != self.classes()) {
            return Err(Error::invalid("DA window does not fit this state"));
        }
        self.window = entries.into();
        Ok(())
    }
}

/// Aligns `p` with the current running average, then records `p`'s batch mean.
pub fn distribution_align(p: &Tensor, da: &mut DaState) -> Result<Tensor> {
    let aligned = da.align(p)?;
    if p.rows() > 0 {
        da.observe(p.mean_rows())?;
    }
    Ok(aligned)
}

/// Training targets for the unlabeled branch. Does not update `da`.
pub fn make_pseudo_labels(p_weak: &Tensor, mode: PseudoLabelMode, da: &DaState) -> Result<Tensor> {
    match mode {
        PseudoLabelMode::SoftDa => da.align(p_weak),
        PseudoLabelMode::OneHot => Ok(Tensor::one_hot(&p_weak.argmax_rows(), p_weak.cols())?),
    }
}
