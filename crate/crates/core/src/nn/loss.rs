use crate::autodiff::{Tensor, Var};
use crate::{Error, Result};

/// Checks that `target` rows are probability vectors.
pub fn validate_targets(target: &Tensor) -> Result<()> {
    if !target.is_matrix() {
        return Err(Error::invalid(format!(
            "targets must be a matrix, got {:?}",
            target.shape()
        )));
    }
    for i in 0..target.rows() {
        let row = target.row(i);
        if let Some(&neg) = row.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid(format!(
                "target row {i} has invalid entry {neg}"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("target row {i} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// `-Σ_y target·logprob` per row, shape `[batch]`.
pub fn per_sample_cross_entropy<'t>(target: &Tensor, logprob: Var<'t>) -> Result<Var<'t>> {
    validate_targets(target)?;
    if target.shape() != logprob.shape().as_slice() {
        return Err(Error::invalid(format!(
            "cross-entropy target {:?} vs logprob {:?}",
            target.shape(),
            logprob.shape()
        )));
    }
    let t = logprob.tape().constant(target.clone());
    Ok(t.mul(logprob)?.sum_rows()?.neg())
}

/// Batch-mean cross-entropy between target distributions and log-probabilities.
pub fn cross_entropy<'t>(target: &Tensor, logprob: Var<'t>) -> Result<Var<'t>> {
    Ok(per_sample_cross_entropy(target, logprob)?.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn uniform_prediction_ten_classes_is_ln10() {
        let tape = Tape::new();
        let lp = tape.constant(Tensor::full(&[1, 10], (0.1f64).ln()));
        let target = Tensor::one_hot(&[3], 10).unwrap();
        let v = cross_entropy(&target, lp).unwrap().item();
        assert!((v - 10f64.ln()).abs() < 1e-12);
        assert!((v - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn self_target_gives_entropy() {
        let tape = Tape::new();
        let p = [0.2, 0.5, 0.3];
        let lp =
            tape.constant(Tensor::matrix(1, 3, p.iter().map(|v: &f64| v.ln()).collect()).unwrap());
        let target = Tensor::matrix(1, 3, p.to_vec()).unwrap();
        let h: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((cross_entropy(&target, lp).unwrap().item() - h).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let tape = Tape::new();
        let lp = tape.constant(Tensor::matrix(1, 2, vec![0.0, f64::MIN]).unwrap());
        let target = Tensor::one_hot(&[0], 2).unwrap();
        assert_eq!(cross_entropy(&target, lp).unwrap().item(), 0.0);
    }

    #[test]
    fn negative_target_rejected() {
        let tape = Tape::new();
        let lp = tape.constant(Tensor::full(&[1, 2], (0.5f64).ln()));
        let target = Tensor::matrix(1, 2, vec![1.5, -0.5]).unwrap();
        assert!(cross_entropy(&target, lp).is_err());
    }
}
