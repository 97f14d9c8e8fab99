//! Synthetic datasets, labeled/unlabeled splits, augmentation and batching.

mod augment;
mod batch;
mod synth;

pub use augment::{augment, AugKind, AugPolicy};
pub use batch::{sample_batches, BatchPair};
pub use synth::{
    all_labeled, make_blobs, make_circles, make_two_moons, split_labels, write_csv, Dataset,
    LabeledSet, SealedLabels, Split, UnlabeledSet,
};
