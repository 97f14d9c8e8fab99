//! The semi-supervised objective: pseudo-labels with distribution
//! alignment, consensus weighting between the softmax head and the flow
//! classifier, the weighted unlabeled loss, and the full training step.

mod align;
mod loss;
mod model;
mod step;
mod weights;

pub use align::{distribution_align, make_pseudo_labels, DaState, PseudoLabelMode};
pub use loss::{total_loss, unlabeled_loss_d, LossReport, LossTerms, PseudoLabelBatch};
pub use step::{
    train_step, AdamWConfig, Discriminative, NfcModel, SgdConfig, StepMetrics, TrainConfig,
    TrainState, BATCH_STREAM,
};
pub use weights::{ncue_weight, DisagreementWeight, WeightPolicy};

/// Confidence level behind the high-confidence ratio and the default threshold baseline.
pub const HIGH_CONFIDENCE: f64 = 0.95;
