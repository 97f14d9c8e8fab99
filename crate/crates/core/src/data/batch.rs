use rand::seq::index;
use rand::Rng;

use super::{augment, AugPolicy, LabeledSet, UnlabeledSet};
use crate::autodiff::Tensor;
use crate::{Error, Result};

/// One training iteration's data: `B` labeled rows and `μB` unlabeled
/// samples, each with a weak and a strong view.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPair {
    pub labeled_x: Tensor,
    pub labeled_y: Vec<usize>,
    /// Weak view of unlabeled sample `i` is row `i`, as is its strong view.
    pub weak: Tensor,
    pub strong: Tensor,
    /// Row indices into the unlabeled pool.
    pub unlabeled_index: Vec<usize>,
}

impl BatchPair {
    pub fn labeled_len(&self) -> usize {
        self.labeled_y.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled_index.len()
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, pool: usize, want: usize) -> Vec<usize> {
    if want <= pool {
        index::sample(rng, pool, want).into_vec()
    } else {
        (0..want).map(|_| rng.gen_range(0..pool)).collect()
    }
}

/// Samples `batch` labeled rows and `mu·batch` unlabeled rows, with
/// replacement only when a pool is smaller than the request.
pub fn sample_batches<R: Rng + ?Sized>(
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    batch: usize,
    mu: usize,
    weak: &AugPolicy,
    strong: &AugPolicy,
    rng: &mut R,
) -> Result<BatchPair> {
    if labeled.is_empty() {
        return Err(Error::invalid("labeled pool is empty"));
    }
    // Indices first, so sample identity never depends on the augmentation draws.
    let l_idx = draw(rng, labeled.len(), batch);
    let want = if unlabeled.is_empty() { 0 } else { mu * batch };
    let u_idx = if want == 0 {
        Vec::new()
    } else {
        draw(rng, unlabeled.len(), want)
    };

    let labeled_x = augment(&labeled.features.select_rows(&l_idx), weak, rng);
    let labeled_y = l_idx.iter().map(|&i| labeled.labels[i]).collect();
    let source = if u_idx.is_empty() {
        Tensor::zeros(&[0, labeled.features.cols()])
    } else {
        unlabeled.features.select_rows(&u_idx)
    };
    let weak_view = augment(&source, weak, rng);
    let strong_view = augment(&source, strong, rng);
    Ok(BatchPair {
        labeled_x,
        labeled_y,
        weak: weak_view,
        strong: strong_view,
        unlabeled_index: u_idx,
    })
}
