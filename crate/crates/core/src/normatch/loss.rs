use serde::{Deserialize, Serialize};

use super::model::{Discriminative, NfcModel};
use super::{make_pseudo_labels, ncue_weight, DaState, TrainConfig};
use crate::autodiff::{Bound, Tape, Tensor, Var};
use crate::data::BatchPair;
use crate::nn::{cross_entropy, per_sample_cross_entropy};
use crate::{Error, Result};

/// `(1/n)·Σᵢ τᵢ·H(targetᵢ, p(·|strong viewᵢ))`. Targets and τ are constants.
pub fn unlabeled_loss_d<'t>(
    targets: &Tensor,
    tau: &[f64],
    logprob_strong: Var<'t>,
) -> Result<Var<'t>> {
    let rows = logprob_strong.shape()[0];
    if tau.len() != rows || targets.rows() != rows {
        return Err(Error::invalid(format!(
            "unlabeled loss: {} weights, {} targets, {rows} predictions",
            tau.len(),
            targets.rows()
        )));
    }
    let ce = per_sample_cross_entropy(targets, logprob_strong)?;
    let w = logprob_strong.tape().constant(Tensor::vector(tau.to_vec()));
    Ok(ce.mul(w)?.mean())
}

/// Scalar values of each loss term for logging.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub sup_d: f64,
    pub unsup_d: f64,
    pub sup_n: f64,
    /// NUM loss value, reported even when λ = 0 excludes it from the total.
    pub unsup_n: f64,
    pub pl_n: f64,
    pub mean_tau: f64,
}

/// Weak-view predictions and the targets and weights derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    pub p_d: Tensor,
    pub p_n: Tensor,
    pub targets: Tensor,
    pub tau: Vec<f64>,
}

/// The recorded objective. Term handles allow backward passes of single terms.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub sup_d: Var<'t>,
    pub unsup_d: Option<Var<'t>>,
    pub sup_n: Var<'t>,
    pub unsup_n: Option<Var<'t>>,
    pub pl_n: Option<Var<'t>>,
    pub disc_params: Bound<'t>,
    pub nfc_params: Bound<'t>,
    pub report: LossReport,
    pub pseudo: Option<PseudoLabelBatch>,
}

fn finite(name: &str, v: Var<'_>) -> Result<f64> {
    let x = v.item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(format!("loss term {name} is {x}")))
    }
}

/// Records `L_x(d) + L_u(d) + L_x(n) + λ·L_u(n)` (plus the optional
/// pseudo-label term for the flow) on `tape`.
///
/// With `stop_gradient`, every feature entering a flow loss is detached, and
/// the weak unlabeled view is evaluated with frozen parameters since it only
/// produces targets.
pub fn total_loss<'t>(
    tape: &'t Tape,
    disc: &Discriminative,
    nfc: &NfcModel,
    batch: &BatchPair,
    cfg: &TrainConfig,
    da: &DaState,
) -> Result<LossTerms<'t>> {
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::Config(format!(
            "lambda must be finite and non-negative, got {}",
            cfg.lambda
        )));
    }
    let classes = disc.classes();
    let dp = tape.bind(&disc.params);
    let np = tape.bind(&nfc.params);
    let (n_l, n_u) = (batch.labeled_len(), batch.unlabeled_len());
    if n_l == 0 {
        return Err(Error::invalid("labeled batch is empty"));
    }
    if batch.weak.rows() != n_u || batch.strong.rows() != n_u {
        return Err(Error::invalid(
            "weak and strong views must have one row per unlabeled sample",
        ));
    }
    let detach = |v: Var<'t>| if cfg.stop_gradient { v.detach() } else { v };

    let mut parts = vec![&batch.labeled_x];
    if n_u > 0 {
        parts.push(&batch.strong);
        if !cfg.stop_gradient {
            parts.push(&batch.weak);
        }
    }
    let x = tape.constant(Tensor::concat_rows(&parts)?);
    let (z, lp) = disc.forward(&dp, x)?;

    let labels = Tensor::one_hot(&batch.labeled_y, classes)?;
    let sup_d = cross_entropy(&labels, lp.slice_rows(0, n_l)?)?;
    let sup_n = nfc
        .nfc
        .supervised_loss(&np, detach(z.slice_rows(0, n_l)?), &batch.labeled_y)?;
    let mut report = LossReport {
        sup_d: finite("sup_d", sup_d)?,
        sup_n: finite("sup_n", sup_n)?,
        ..LossReport::default()
    };
    let mut total = sup_d.add(sup_n)?;
    let (mut unsup_d, mut unsup_n, mut pl_n, mut pseudo) = (None, None, None, None);

    if n_u > 0 {
        let lp_strong = lp.slice_rows(n_l, n_l + n_u)?;
        let (z_weak, lp_weak) = if cfg.stop_gradient {
            let frozen = tape.bind_frozen(&disc.params);
            disc.forward(&frozen, tape.constant(batch.weak.clone()))?
        } else {
            (
                z.slice_rows(n_l + n_u, n_l + 2 * n_u)?,
                lp.slice_rows(n_l + n_u, n_l + 2 * n_u)?,
            )
        };
        let joint = nfc.nfc.joint_logprob(&np, detach(z_weak))?;
        let log_post_n = joint.log_softmax()?;
        let p_d = lp_weak.value().map(f64::exp);
        let p_n = log_post_n.value().map(f64::exp);
        let targets = make_pseudo_labels(&p_d, cfg.pseudo_label, da)?;
        let tau = ncue_weight(&p_d, &p_n, cfg.policy, cfg.disagreement)?;

        let ud = unlabeled_loss_d(&targets, &tau, lp_strong)?;
        report.unsup_d = finite("unsup_d", ud)?;
        total = total.add(ud)?;
        unsup_d = Some(ud);

        let un = joint.logsumexp_rows()?.mean().neg();
        report.unsup_n = finite("unsup_n", un)?;
        if cfg.lambda > 0.0 {
            total = total.add(un.scale(cfg.lambda))?;
        }
        unsup_n = Some(un);

        if cfg.train_nfc_on_pseudo_labels {
            let pl = unlabeled_loss_d(&targets, &tau, log_post_n)?;
            report.pl_n = finite("pl_n", pl)?;
            total = total.add(pl)?;
            pl_n = Some(pl);
        }
        report.mean_tau = tau.iter().sum::<f64>() / n_u as f64;
        pseudo = Some(PseudoLabelBatch {
            p_d,
            p_n,
            targets,
            tau,
        });
    }
    report.total = finite("total", total)?;
    Ok(LossTerms {
        total,
        sup_d,
        unsup_d,
        sup_n,
        unsup_n,
        pl_n,
        disc_params: dp,
        nfc_params: np,
        report,
        pseudo,
    })
}
