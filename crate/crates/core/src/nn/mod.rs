//! Discriminative building blocks: MLP backbone, softmax head, losses,
//! optimizers, learning-rate schedule and weight averaging.

mod ema;
mod layers;
mod loss;
mod optim;

pub use ema::Ema;
pub use layers::{init_uniform, Linear, MlpBackbone, SoftmaxHead};
pub use loss::{cross_entropy, per_sample_cross_entropy, validate_targets};
pub use optim::{cosine_lr, AdamW, SgdNesterov};
