#![allow(dead_code)]

use std::path::Path;

use normatch_lab::data::AugPolicy;
use normatch_lab::harness::{DatasetSpec, ExperimentConfig};
use normatch_lab::normatch::TrainConfig;

/// A config that trains in well under a second.
pub fn tiny_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec {
            n: 200,
            test_n: 200,
            ..DatasetSpec::default()
        },
        training: TrainConfig {
            batch_size: 8,
            mu: 2,
            total_steps: 60,
            backbone_hidden: vec![16],
            feature_dim: 4,
            flow_layers: 2,
            flow_hidden: 8,
            strong_aug: AugPolicy::strong(0.2, 0.15, 0.0),
            ..TrainConfig::default()
        },
        eval_interval: 20,
        seeds: vec![0],
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}
