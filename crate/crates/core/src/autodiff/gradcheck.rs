use super::{AutodiffError, Bound, ParamStore, Tape, Tensor, Var};

/// Below this combined magnitude the error is measured absolutely: central
/// differences at step 1e-5 carry roughly 1e-10 of rounding noise.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of `f` at `x` against central differences.
///
/// Returns the largest relative error over all coordinates.
pub fn grad_check<F, E>(f: F, x: &Tensor, step: f64) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, E>,
    E: From<AutodiffError>,
{
    let mut store = ParamStore::new();
    let id = store.add("x", x.clone());
    grad_check_params(|tape, bound| f(tape, bound.get(id)), &store, step)
}

/// Like [`grad_check`], over every scalar of every tensor in `store`.
pub fn grad_check_params<F, E>(f: F, store: &ParamStore, step: f64) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>, E>,
    E: From<AutodiffError>,
{
    let analytic = {
        let tape = Tape::new();
        let bound = tape.bind(store);
        let loss = f(&tape, &bound)?;
        if !loss.item().is_finite() {
            return Err(AutodiffError::NonFinite { op: "grad_check" }.into());
        }
        let grads = loss.backward()?;
        bound.grads(&grads)
    };

    let eval = |probe: &ParamStore| -> Result<f64, E> {
        let tape = Tape::new();
        let bound = tape.bind_frozen(probe);
        let v = f(&tape, &bound)?.item();
        if !v.is_finite() {
            return Err(AutodiffError::NonFinite { op: "grad_check" }.into());
        }
        Ok(v)
    };

    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (t, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = store.tensors()[t].data()[j];
            probe.tensors_mut()[t].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe.tensors_mut()[t].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe.tensors_mut()[t].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
    }
    Ok(worst)
}
