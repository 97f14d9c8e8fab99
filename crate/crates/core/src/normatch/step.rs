use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use super::model::{Discriminative, NfcModel};
use super::{
    total_loss, DaState, DisagreementWeight, LossReport, PseudoLabelMode, WeightPolicy,
    HIGH_CONFIDENCE,
};
use crate::autodiff::Tape;
use crate::data::{sample_batches, AugKind, AugPolicy, BatchPair, LabeledSet, UnlabeledSet};
use crate::nn::{cosine_lr, AdamW, Ema, SgdNesterov};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Everything that determines a training trajectory apart from data and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Unlabeled-to-labeled batch ratio.
    pub mu: usize,
    pub total_steps: usize,
    pub lambda: f64,
    pub policy: WeightPolicy,
    pub disagreement: DisagreementWeight,
    pub pseudo_label: PseudoLabelMode,
    pub stop_gradient: bool,
    pub train_nfc_on_pseudo_labels: bool,
    /// Draws no unlabeled data at all.
    pub supervised_only: bool,
    pub backbone_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub sgd: SgdConfig,
    pub adamw: AdamWConfig,
    pub ema_decay: f64,
    pub da_window: usize,
    pub weak_aug: AugPolicy,
    pub strong_aug: AugPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            mu: 7,
            total_steps: 3000,
            lambda: 1e-6,
            policy: WeightPolicy::Ncue,
            disagreement: DisagreementWeight::MinOfMax,
            pseudo_label: PseudoLabelMode::SoftDa,
            stop_gradient: true,
            train_nfc_on_pseudo_labels: false,
            supervised_only: false,
            backbone_hidden: vec![64, 64],
            feature_dim: 8,
            flow_layers: 6,
            flow_hidden: 32,
            sgd: SgdConfig::default(),
            adamw: AdamWConfig::default(),
            ema_decay: 0.999,
            da_window: 32,
            weak_aug: AugPolicy::default_weak(),
            strong_aug: AugPolicy::default_strong(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.total_steps == 0 {
            return fail("batch_size and total_steps must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            ));
        }
        if self.feature_dim < 2 || self.flow_hidden == 0 || self.backbone_hidden.contains(&0) {
            return fail("feature_dim must be at least 2 and hidden widths positive".into());
        }
        if self.da_window == 0 {
            return fail("da_window must be positive".into());
        }
        if self.weak_aug.kind != AugKind::Weak || self.strong_aug.kind != AugKind::Strong {
            return fail("weak_aug must be kind weak and strong_aug kind strong".into());
        }
        if !(self.weak_aug.sigma < self.strong_aug.sigma) {
            return fail("weak jitter must be smaller than strong jitter".into());
        }
        self.policy
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn unlabeled_batch(&self) -> usize {
        if self.supervised_only {
            0
        } else {
            self.mu * self.batch_size
        }
    }
}

/// Per-step diagnostics; the count fields refer to the weak unlabeled views.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr_d: f64,
    pub lr_n: f64,
    pub loss: LossReport,
    pub unlabeled: usize,
    /// Samples on which the two classifiers' argmaxes agree.
    pub ncue_count: usize,
    /// Samples with `max p_d ≥ 0.95`.
    pub threshold_count: usize,
    /// Samples whose discriminative argmax matches the sealed truth.
    pub correct_count: usize,
    /// Samples with `max p_d > 0.95`.
    pub high_conf_count: usize,
    pub tau_sum: f64,
}

/// Mutable training state: both models, optimizers, EMA, DA and the batch RNG.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub disc: Discriminative,
    pub nfc: NfcModel,
    pub sgd: SgdNesterov,
    pub adamw: AdamW,
    pub ema: Ema,
    pub da: DaState,
    pub rng: ChaCha8Rng,
    /// Completed steps.
    pub step: usize,
}

/// Stream of the batch-sampling generator; stream 0 initializes parameters.
pub const BATCH_STREAM: u64 = 1;

impl TrainState {
    pub fn new(config: TrainConfig, input_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![input_dim];
        widths.extend_from_slice(&config.backbone_hidden);
        widths.push(config.feature_dim);
        let disc = Discriminative::new(&widths, classes, &mut init)?;
        let nfc = NfcModel::new(
            config.feature_dim,
            classes,
            config.flow_layers,
            config.flow_hidden,
            &mut init,
        )?;
        let sgd = SgdNesterov::new(&disc.params, config.sgd.momentum, config.sgd.weight_decay);
        let a = config.adamw;
        let adamw = AdamW::new(&nfc.params, a.beta1, a.beta2, a.eps, a.weight_decay);
        let ema = Ema::new(&disc.params, config.ema_decay);
        let da = DaState::new(classes, config.da_window);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BATCH_STREAM);
        Ok(Self {
            config,
            disc,
            nfc,
            sgd,
            adamw,
            ema,
            da,
            rng,
            step: 0,
        })
    }

    /// Samples a batch from the pools and takes one step. The sealed truth of
    /// `unlabeled` feeds diagnostics only.
    pub fn step_on(
        &mut self,
        labeled: &LabeledSet,
        unlabeled: &UnlabeledSet,
    ) -> Result<StepMetrics> {
        let c = &self.config;
        let mu = if c.supervised_only { 0 } else { c.mu };
        let batch = sample_batches(
            labeled,
            unlabeled,
            c.batch_size,
            mu,
            &c.weak_aug,
            &c.strong_aug,
            &mut self.rng,
        )?;
        let truth: Vec<usize> = {
            let all = unlabeled.truth.reveal_for_diagnostics();
            batch.unlabeled_index.iter().map(|&i| all[i]).collect()
        };
        train_step(self, &batch, Some(&truth))
    }
}

/// One iteration: losses, backward, SGD on θ_d, AdamW on θ_n, EMA, then the
/// DA window update. `truth` (per unlabeled row) only feeds diagnostics.
pub fn train_step(
    state: &mut TrainState,
    batch: &BatchPair,
    truth: Option<&[usize]>,
) -> Result<StepMetrics> {
    let cfg = &state.config;
    if state.step >= cfg.total_steps {
        return Err(Error::invalid(format!(
            "training already finished {} steps",
            cfg.total_steps
        )));
    }
    let lr_d = cosine_lr(cfg.sgd.lr, state.step, cfg.total_steps)?;
    let lr_n = cosine_lr(cfg.adamw.lr, state.step, cfg.total_steps)?;

    let tape = Tape::new();
    let terms = total_loss(&tape, &state.disc, &state.nfc, batch, cfg, &state.da)?;
    let grads = terms.total.backward()?;
    let g_d = terms.disc_params.grads(&grads);
    let g_n = terms.nfc_params.grads(&grads);

    let mut m = StepMetrics {
        step: state.step,
        lr_d,
        lr_n,
        loss: terms.report.clone(),
        ..Default::default()
    };
    let observed = if let Some(pl) = &terms.pseudo {
        let (arg_d, arg_n, max_d) = (
            pl.p_d.argmax_rows(),
            pl.p_n.argmax_rows(),
            pl.p_d.max_rows(),
        );
        m.unlabeled = arg_d.len();
        m.ncue_count = arg_d.iter().zip(&arg_n).filter(|(a, b)| a == b).count();
        m.threshold_count = max_d.iter().filter(|&&v| v >= HIGH_CONFIDENCE).count();
        m.high_conf_count = max_d.iter().filter(|&&v| v > HIGH_CONFIDENCE).count();
        m.tau_sum = pl.tau.iter().sum();
        if let Some(t) = truth {
            if t.len() != arg_d.len() {
                return Err(Error::invalid(
                    "diagnostic truth does not match the unlabeled batch",
                ));
            }
            m.correct_count = arg_d.iter().zip(t).filter(|(a, b)| a == b).count();
        }
        (cfg.pseudo_label == PseudoLabelMode::SoftDa).then(|| pl.p_d.mean_rows())
    } else {
        None
    };
    drop(terms);

    state.sgd.step(&mut state.disc.params, &g_d, lr_d)?;
    state.adamw.step(&mut state.nfc.params, &g_n, lr_n)?;
    state.ema.update(&state.disc.params)?;
    if let Some(mean) = observed {
        state.da.observe(mean)?;
    }
    state.step += 1;
    Ok(m)
}
