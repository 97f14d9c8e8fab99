use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{make_blobs, make_circles, make_two_moons, Dataset, Split};
use crate::normatch::TrainConfig;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Offset between a run seed and the seed of its test set.
const TEST_SEED_OFFSET: u64 = 0x5eed_7e57;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    TwoMoons,
    Blobs,
    Circles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Training-set size.
    pub n: usize,
    pub test_n: usize,
    /// Gaussian noise for moons and circles, cluster spread for blobs.
    pub noise: f64,
    /// Only used by blobs.
    pub classes: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::TwoMoons,
            n: 2000,
            test_n: 2000,
            noise: 0.1,
            classes: 2,
        }
    }
}

impl DatasetSpec {
    fn make(&self, n: usize, seed: u64) -> Result<Dataset> {
        match self.kind {
            DatasetKind::TwoMoons => make_two_moons(n, self.noise, seed),
            DatasetKind::Blobs => make_blobs(n, self.classes, self.noise, seed),
            DatasetKind::Circles => make_circles(n, self.noise, seed),
        }
    }

    /// Train and test sets for one run seed.
    pub fn build(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let train = self.make(self.n, seed)?;
        let test = self
            .make(self.test_n, seed.wrapping_add(TEST_SEED_OFFSET))?
            .with_split(Split::Test);
        Ok((train, test))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllLabels {
    All,
}

/// Labeled samples per class, or `"all"` for a fully labeled training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelBudget {
    PerClass(usize),
    Everything(AllLabels),
}

impl LabelBudget {
    pub const ALL: LabelBudget = LabelBudget::Everything(AllLabels::All);
}

fn default_labels() -> LabelBudget {
    LabelBudget::PerClass(4)
}

fn default_eval_interval() -> usize {
    100
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default = "default_labels")]
    pub labels_per_class: LabelBudget,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Write `seed<k>.ckpt` every this many steps.
    #[serde(default)]
    pub checkpoint_interval: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetSpec::default(),
            labels_per_class: default_labels(),
            training: TrainConfig::default(),
            eval_interval: default_eval_interval(),
            seeds: default_seeds(),
            out_dir: default_out_dir(),
            checkpoint_interval: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.eval_interval == 0 || self.checkpoint_interval == Some(0) {
            return Err(Error::Config(
                "eval and checkpoint intervals must be positive".into(),
            ));
        }
        if self.labels_per_class == LabelBudget::PerClass(0) {
            return Err(Error::Config("labels_per_class must be positive".into()));
        }
        let d = &self.dataset;
        if d.test_n == 0 || !(d.noise >= 0.0 && d.noise.is_finite()) {
            return Err(Error::Config(
                "test_n must be positive and noise finite and non-negative".into(),
            ));
        }
        self.training.validate()
    }
}
