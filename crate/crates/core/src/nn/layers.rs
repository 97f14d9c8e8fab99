use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Glorot-uniform `[fan_in, fan_out]` matrix.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-a..a))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("init shape")
}

/// Affine map `x·W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, in_dim, out_dim));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Same layout as [`Linear::new`] with every parameter zero.
    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(params.get(self.weight))?;
        Ok(match self.bias {
            Some(b) => y.add_row(params.get(b))?,
            None => y,
        })
    }
}

/// Fully connected feature extractor with tanh between layers and a linear
/// output layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpBackbone {
    pub layers: Vec<Linear>,
    pub input_dim: usize,
    pub feature_dim: usize,
}

impl MlpBackbone {
    /// `widths` runs from the input dimension to the feature dimension,
    /// e.g. `[2, 64, 64, 8]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!(
                "backbone widths {widths:?} need at least two positive entries"
            )));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}.layer{i}"), w[0], w[1], true, rng))
            .collect();
        Ok(Self {
            layers,
            input_dim: widths[0],
            feature_dim: *widths.last().unwrap(),
        })
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::invalid(format!(
                "backbone expects [batch, {}] input, got {shape:?}",
                self.input_dim
            )));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(params, h)?;
            if i + 1 < self.layers.len() {
                h = h.tanh();
            }
        }
        Ok(h)
    }
}

/// Bias-free linear softmax classifier; column `k` of the weight is the
/// class-`k` direction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SoftmaxHead {
    pub weight: ParamId,
    pub feature_dim: usize,
    pub classes: usize,
}

impl SoftmaxHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        feature_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid(format!(
                "softmax head needs at least 2 classes, got {classes}"
            )));
        }
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, feature_dim, classes),
        );
        Ok(Self {
            weight,
            feature_dim,
            classes,
        })
    }

    /// Row-wise log-probabilities `[batch, classes]`.
    pub fn log_prob<'t>(&self, params: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.feature_dim {
            return Err(Error::invalid(format!(
                "head expects [batch, {}] features, got {shape:?}",
                self.feature_dim
            )));
        }
        Ok(z.matmul(params.get(self.weight))?.log_softmax()?)
    }
}
