use crate::autodiff::ParamStore;
use crate::Result;

/// Exponential moving average of a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub decay: f64,
    shadow: ParamStore,
}

impl Ema {
    /// Starts the shadow at the current parameters.
    pub fn new(params: &ParamStore, decay: f64) -> Self {
        Self {
            decay,
            shadow: params.clone(),
        }
    }

    pub fn with_shadow(shadow: ParamStore, decay: f64) -> Self {
        Self { decay, shadow }
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    pub fn shadow_mut(&mut self) -> &mut ParamStore {
        &mut self.shadow
    }

    /// `shadow ← d·shadow + (1 − d)·param`.
    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        if params.names() != self.shadow.names() {
            return Err(crate::Error::invalid(
                "EMA shadow does not match parameter names",
            ));
        }
        let d = self.decay;
        for (s, p) in self.shadow.tensors_mut().iter_mut().zip(params.tensors()) {
            if s.shape() != p.shape() {
                return Err(crate::Error::invalid("EMA shadow shape mismatch"));
            }
            for (si, &pi) in s.data_mut().iter_mut().zip(p.data()) {
                *si = d * *si + (1.0 - d) * pi;
            }
        }
        Ok(())
    }
}
