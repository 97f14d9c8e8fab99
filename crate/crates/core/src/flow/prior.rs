use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// One diagonal Gaussian per class in latent space.
///
/// Means and log-variances are trainable; class priors are fixed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmPrior {
    pub means: ParamId,
    pub log_vars: ParamId,
    pub log_priors: Vec<f64>,
    pub classes: usize,
    pub dim: usize,
}

impl GmmPrior {
    /// Means drawn uniformly on the sphere of radius `2·√dim`; unit
    /// variances; uniform class priors.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        classes: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "GMM needs classes and dim > 0, got {classes}, {dim}"
            )));
        }
        let radius = 2.0 * (dim as f64).sqrt();
        let mut means = Vec::with_capacity(classes * dim);
        for _ in 0..classes {
            let v: Vec<f64> = (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            means.extend(v.iter().map(|x| radius * x / norm));
        }
        let means = store.add(
            format!("{prefix}.means"),
            Tensor::matrix(classes, dim, means)?,
        );
        let log_vars = store.add(format!("{prefix}.log_vars"), Tensor::zeros(&[classes, dim]));
        Ok(Self {
            means,
            log_vars,
            log_priors: vec![-(classes as f64).ln(); classes],
            classes,
            dim,
        })
    }

    /// Replaces the fixed class priors; they must be nonnegative and sum to 1.
    pub fn set_priors(&mut self, priors: &[f64]) -> Result<()> {
        if priors.len() != self.classes
            || priors.iter().any(|&p| p < 0.0)
            || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid(format!("invalid class priors {priors:?}")));
        }
        self.log_priors = priors.iter().map(|p| p.ln()).collect();
        Ok(())
    }
}
