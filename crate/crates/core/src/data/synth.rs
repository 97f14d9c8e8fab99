use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, input_dim]`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

fn per_class_counts(n: usize, classes: usize) -> Result<Vec<usize>> {
    if classes == 0 || n < 2 * classes {
        return Err(Error::invalid(format!(
            "need n >= 2·classes, got n={n}, classes={classes}"
        )));
    }
    Ok((0..classes)
        .map(|k| n / classes + usize::from(k < n % classes))
        .collect())
}

/// Assembles a dataset from per-class point generators and shuffles it.
fn assemble(
    n: usize,
    classes: usize,
    seed: u64,
    mut point: impl FnMut(usize, &mut ChaCha8Rng) -> [f64; 2],
) -> Result<Dataset> {
    let counts = per_class_counts(n, classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for (k, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            rows.push((point(k, &mut rng), k));
        }
    }
    rows.shuffle(&mut rng);
    let features = Tensor::matrix(n, 2, rows.iter().flat_map(|(p, _)| *p).collect())?;
    Ok(Dataset {
        features,
        labels: rows.iter().map(|r| r.1).collect(),
        classes,
        split: Split::Train,
        seed,
    })
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        sigma * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Two interleaving unit half-circles: class 0 is `(cos t, sin t)`, class 1
/// is `(1 − cos t, 0.5 − sin t)`, `t ~ U[0, π]`, plus isotropic noise.
pub fn make_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    assemble(n, 2, seed, |k, rng| {
        let t = rng.gen_range(0.0..=PI);
        let (x, y) = if k == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        [x + gauss(rng, noise), y + gauss(rng, noise)]
    })
}

/// Blob centers sit evenly on a circle of radius 2.
pub fn blob_center(k: usize, classes: usize) -> [f64; 2] {
    let a = 2.0 * PI * k as f64 / classes as f64;
    [2.0 * a.cos(), 2.0 * a.sin()]
}

/// Isotropic Gaussian clusters with standard deviation `spread`.
pub fn make_blobs(n: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    assemble(n, classes, seed, |k, rng| {
        let c = blob_center(k, classes);
        [c[0] + gauss(rng, spread), c[1] + gauss(rng, spread)]
    })
}

/// Concentric rings: class 0 at radius 1, class 1 at radius 0.5.
pub fn make_circles(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    assemble(n, 2, seed, |k, rng| {
        let t = rng.gen_range(0.0..2.0 * PI);
        let r = if k == 0 { 1.0 } else { 0.5 };
        [
            r * t.cos() + gauss(rng, noise),
            r * t.sin() + gauss(rng, noise),
        ]
    })
}

/// Ground-truth labels of unlabeled samples, for diagnostics only.
#[derive(Clone, Debug, PartialEq)]
pub struct SealedLabels(Vec<usize>);

impl SealedLabels {
    /// Never feed these into training.
    pub fn reveal_for_diagnostics(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Row indices into the source dataset.
    pub source_index: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    pub features: Tensor,
    pub truth: SealedLabels,
    pub source_index: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.source_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_index.is_empty()
    }
}

/// Draws exactly `per_class` labeled samples from each class; the rest are unlabeled.
pub fn split_labels(
    ds: &Dataset,
    per_class: usize,
    seed: u64,
) -> Result<(LabeledSet, UnlabeledSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = Vec::new();
    for k in 0..ds.classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == k).collect();
        if idx.len() < per_class {
            return Err(Error::invalid(format!(
                "class {k} has {} samples, cannot take {per_class} labels",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        labeled.extend_from_slice(&idx[..per_class]);
    }
    labeled.sort_unstable();
    let mut is_labeled = vec![false; ds.len()];
    labeled.iter().for_each(|&i| is_labeled[i] = true);
    let unlabeled: Vec<usize> = (0..ds.len()).filter(|&i| !is_labeled[i]).collect();
    Ok((
        LabeledSet {
            features: ds.features.select_rows(&labeled),
            labels: labeled.iter().map(|&i| ds.labels[i]).collect(),
            source_index: labeled,
        },
        UnlabeledSet {
            features: ds.features.select_rows(&unlabeled),
            truth: SealedLabels(unlabeled.iter().map(|&i| ds.labels[i]).collect()),
            source_index: unlabeled,
        },
    ))
}

/// Every sample labeled; the unlabeled pool is empty.
pub fn all_labeled(ds: &Dataset) -> (LabeledSet, UnlabeledSet) {
    let d = ds.input_dim();
    (
        LabeledSet {
            features: ds.features.clone(),
            labels: ds.labels.clone(),
            source_index: (0..ds.len()).collect(),
        },
        UnlabeledSet {
            features: Tensor::zeros(&[0, d]),
            truth: SealedLabels(Vec::new()),
            source_index: Vec::new(),
        },
    )
}

/// Rows of `x1,...,xd,label,split`.
pub fn write_csv<W: Write>(out: W, sets: &[&Dataset]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let dim = sets.first().map_or(0, |d| d.input_dim());
    let mut header: Vec<String> = (1..=dim).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    header.push("split".into());
    w.write_record(&header)?;
    for ds in sets {
        if ds.input_dim() != dim {
            return Err(Error::invalid("datasets with different input dims"));
        }
        for i in 0..ds.len() {
            let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(ds.labels[i].to_string());
            rec.push(ds.split.as_str().into());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
