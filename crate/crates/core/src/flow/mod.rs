//! Normalizing-flow classifier: affine coupling layers mapping features
//! into a latent space with one Gaussian component per class.

mod coupling;
mod prior;

pub use coupling::{CouplingLayer, FlowStack};
pub use prior::GmmPrior;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::nn::cross_entropy;
use crate::{Error, Result};

/// Flow stack plus class-conditional Gaussian-mixture prior.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowClassifier {
    pub stack: FlowStack,
    pub prior: GmmPrior,
}

impl FlowClassifier {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        classes: usize,
        n_layers: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let stack = FlowStack::new(store, "flow", dim, n_layers, hidden, rng)?;
        let prior = GmmPrior::new(store, "gmm", classes, dim, rng)?;
        Ok(Self { stack, prior })
    }

    pub fn classes(&self) -> usize {
        self.prior.classes
    }

    fn check_features(&self, z: &Var<'_>) -> Result<()> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.stack.dim {
            return Err(Error::invalid(format!(
                "flow expects [batch, {}] features, got {shape:?}",
                self.stack.dim
            )));
        }
        Ok(())
    }

    /// `log p(z | y = k)` for every row and class, `[batch, C]`, including
    /// the change-of-variables term.
    pub fn class_conditional_logprob<'t>(&self, params: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        self.check_features(&z)?;
        let (u, logdet) = self.stack.transform(params, z)?;
        let dens = u.gaussian_logpdf(
            params.get(self.prior.means),
            params.get(self.prior.log_vars),
        )?;
        Ok(dens.add_col(logdet)?)
    }

    /// `log p(z | y) + log p(y)`, `[batch, C]`.
    pub fn joint_logprob<'t>(&self, params: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let cc = self.class_conditional_logprob(params, z)?;
        let priors = z
            .tape()
            .constant(Tensor::vector(self.prior.log_priors.clone()));
        Ok(cc.add_row(priors)?)
    }

    /// `log p(y | z)`, `[batch, C]`.
    pub fn log_posterior<'t>(&self, params: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        Ok(self.joint_logprob(params, z)?.log_softmax()?)
    }

    /// `log p(z)` summed over mixture components, `[batch]`.
    pub fn marginal_logprob<'t>(&self, params: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        Ok(self.joint_logprob(params, z)?.logsumexp_rows()?)
    }

    /// Mean negative log-likelihood of a feature batch.
    pub fn num_loss<'t>(&self, params: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        if z.shape().first() == Some(&0) {
            return Err(Error::invalid("num_loss on an empty batch"));
        }
        Ok(self.marginal_logprob(params, z)?.mean().neg())
    }

    /// Batch-mean cross-entropy of the posterior against integer labels.
    pub fn supervised_loss<'t>(
        &self,
        params: &Bound<'t>,
        z: Var<'t>,
        labels: &[usize],
    ) -> Result<Var<'t>> {
        let target = Tensor::one_hot(labels, self.classes())?;
        cross_entropy(&target, self.log_posterior(params, z)?)
    }

    /// Posterior probabilities for plain feature values.
    pub fn posterior(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = tape.bind_frozen(store);
        Ok(self
            .log_posterior(&params, tape.constant(z.clone()))?
            .value()
            .map(f64::exp))
    }

    /// Inverts the flow on plain latent values.
    pub fn invert(&self, store: &ParamStore, u: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = tape.bind_frozen(store);
        Ok(self
            .stack
            .inverse(&params, tape.constant(u.clone()))?
            .value())
    }
}
