use rand::Rng;

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::flow::FlowClassifier;
use crate::nn::{MlpBackbone, SoftmaxHead};
use crate::Result;

/// Backbone and softmax head (θ_d). The only model used at inference.
#[derive(Clone, Debug)]
pub struct Discriminative {
    pub params: ParamStore,
    pub backbone: MlpBackbone,
    pub head: SoftmaxHead,
}

impl Discriminative {
    /// `widths` runs from the input dimension to the feature dimension.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], classes: usize, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let backbone = MlpBackbone::new(&mut params, "backbone", widths, rng)?;
        let head = SoftmaxHead::new(&mut params, "head", backbone.feature_dim, classes, rng)?;
        Ok(Self {
            params,
            backbone,
            head,
        })
    }

    pub fn classes(&self) -> usize {
        self.head.classes
    }

    /// Features and head log-probabilities.
    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let z = self.backbone.forward(params, x)?;
        let lp = self.head.log_prob(params, z)?;
        Ok((z, lp))
    }

    /// Head probabilities under an arbitrary parameter store with this
    /// layout, e.g. an EMA shadow.
    pub fn predict_with(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = tape.bind_frozen(store);
        let (_, lp) = self.forward(&params, tape.constant(x.clone()))?;
        Ok(lp.value().map(f64::exp))
    }

    pub fn features_with(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = tape.bind_frozen(store);
        Ok(self
            .backbone
            .forward(&params, tape.constant(x.clone()))?
            .value())
    }
}

/// Flow classifier parameters (θ_n).
#[derive(Clone, Debug)]
pub struct NfcModel {
    pub params: ParamStore,
    pub nfc: FlowClassifier,
}

impl NfcModel {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        classes: usize,
        layers: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let nfc = FlowClassifier::new(&mut params, dim, classes, layers, hidden, rng)?;
        Ok(Self { params, nfc })
    }
}
