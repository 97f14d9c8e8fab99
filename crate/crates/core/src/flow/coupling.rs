use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Tensor, Var};
use crate::nn::Linear;
use crate::{Error, Result};

/// Affine coupling layer over a contiguous half split of the coordinates.
///
/// The conditioning half passes through unchanged; the other half becomes
/// `x·exp(s) + t` with `s = bound·tanh(s_net(cond))` and `t = t_net(cond)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub dim: usize,
    /// Coordinates `0..split` form the first half.
    pub split: usize,
    /// When true the first half conditions and the second half is transformed.
    pub condition_on_first: bool,
    s_hidden: Linear,
    s_out: Linear,
    t_hidden: Linear,
    t_out: Linear,
    bound: ParamId,
}

impl CouplingLayer {
    /// Output layers of both nets start at zero, so the layer starts as the identity.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        condition_on_first: bool,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!(
                "coupling layer needs dim >= 2, got {dim}"
            )));
        }
        let split = dim / 2;
        let (n_cond, n_trans) = if condition_on_first {
            (split, dim - split)
        } else {
            (dim - split, split)
        };
        Ok(Self {
            dim,
            split,
            condition_on_first,
            s_hidden: Linear::new(store, &format!("{name}.s0"), n_cond, hidden, true, rng),
            s_out: Linear::zeros(store, &format!("{name}.s1"), hidden, n_trans, true),
            t_hidden: Linear::new(store, &format!("{name}.t0"), n_cond, hidden, true, rng),
            t_out: Linear::zeros(store, &format!("{name}.t1"), hidden, n_trans, true),
            bound: store.add(format!("{name}.scale_bound"), Tensor::scalar(1.0)),
        })
    }

    fn halves<'t>(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::invalid(format!(
                "coupling layer expects [batch, {}], got {shape:?}",
                self.dim
            )));
        }
        let (a, b) = x.split_cols(self.split)?;
        Ok(if self.condition_on_first {
            (a, b)
        } else {
            (b, a)
        })
    }

    fn join<'t>(&self, cond: Var<'t>, trans: Var<'t>) -> Result<Var<'t>> {
        let parts = if self.condition_on_first {
            [cond, trans]
        } else {
            [trans, cond]
        };
        Ok(Var::concat_cols(&parts)?)
    }

    fn scale_shift<'t>(&self, params: &Bound<'t>, cond: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let h = self.s_hidden.forward(params, cond)?.tanh();
        let s = self
            .s_out
            .forward(params, h)?
            .tanh()
            .mul_scalar(params.get(self.bound))?;
        let h = self.t_hidden.forward(params, cond)?.tanh();
        let t = self.t_out.forward(params, h)?;
        if !s.value().is_finite() {
            return Err(Error::NonFinite("coupling scale output".into()));
        }
        Ok((s, t))
    }

    /// Returns `(y, logdet)` with `logdet` of shape `[batch]`.
    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (cond, trans) = self.halves(x)?;
        let (s, t) = self.scale_shift(params, cond)?;
        let moved = trans.mul(s.exp()?)?.add(t)?;
        Ok((self.join(cond, moved)?, s.sum_rows()?))
    }

    pub fn inverse<'t>(&self, params: &Bound<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let (cond, moved) = self.halves(y)?;
        let (s, t) = self.scale_shift(params, cond)?;
        let trans = moved.sub(t)?.mul(s.neg().exp()?)?;
        self.join(cond, trans)
    }
}

/// Ordered stack of coupling layers with alternating halves.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowStack {
    pub layers: Vec<CouplingLayer>,
    pub dim: usize,
}

impl FlowStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        n_layers: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| {
                CouplingLayer::new(
                    store,
                    &format!("{prefix}.coupling{i}"),
                    dim,
                    i % 2 == 0,
                    hidden,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, dim })
    }

    /// Maps features to latent space; returns `(u, total_logdet)`.
    pub fn transform<'t>(&self, params: &Bound<'t>, z: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let rows = z.shape()[0];
        let mut logdet = z.tape().constant(Tensor::zeros(&[rows]));
        let mut u = z;
        for layer in &self.layers {
            let (next, ld) = layer.forward(params, u)?;
            u = next;
            logdet = logdet.add(ld)?;
        }
        Ok((u, logdet))
    }

    pub fn inverse<'t>(&self, params: &Bound<'t>, u: Var<'t>) -> Result<Var<'t>> {
        let mut z = u;
        for layer in self.layers.iter().rev() {
            z = layer.inverse(params, z)?;
        }
        Ok(z)
    }
}
