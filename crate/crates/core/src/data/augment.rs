use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Weak,
    Strong,
}

/// Label-preserving perturbation of feature rows.
///
/// Weak: additive Gaussian jitter. Strong: per-coordinate random scaling,
/// larger jitter, then coordinate dropout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugPolicy {
    pub kind: AugKind,
    pub sigma: f64,
    #[serde(default)]
    pub scale_jitter: f64,
    #[serde(default)]
    pub drop_prob: f64,
}

impl AugPolicy {
    pub fn weak(sigma: f64) -> Self {
        Self {
            kind: AugKind::Weak,
            sigma,
            scale_jitter: 0.0,
            drop_prob: 0.0,
        }
    }

    pub fn strong(sigma: f64, scale_jitter: f64, drop_prob: f64) -> Self {
        Self {
            kind: AugKind::Strong,
            sigma,
            scale_jitter,
            drop_prob,
        }
    }

    pub fn default_weak() -> Self {
        Self::weak(0.05)
    }

    pub fn default_strong() -> Self {
        Self::strong(0.10, 0.10, 0.0)
    }
}

pub fn augment<R: Rng + ?Sized>(x: &Tensor, policy: &AugPolicy, rng: &mut R) -> Tensor {
    let mut out = x.clone();
    match policy.kind {
        AugKind::Weak => {
            if policy.sigma > 0.0 {
                for v in out.data_mut() {
                    *v += policy.sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        AugKind::Strong => {
            for v in out.data_mut() {
                if policy.scale_jitter > 0.0 {
                    *v *= rng.gen_range(1.0 - policy.scale_jitter..=1.0 + policy.scale_jitter);
                }
                if policy.sigma > 0.0 {
                    *v += policy.sigma * rng.sample::<f64, _>(StandardNormal);
                }
                if policy.drop_prob > 0.0 && rng.gen::<f64>() < policy.drop_prob {
                    *v = 0.0;
                }
            }
        }
    }
    out
}
