use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::{ExperimentConfig, LabelBudget};
use super::metrics::{write_metrics_csv, IntervalAccumulator, MetricsRow};
use crate::autodiff::ParamStore;
use crate::data::{all_labeled, split_labels, write_csv, Dataset, LabeledSet, UnlabeledSet};
use crate::normatch::{Discriminative, TrainState, WeightPolicy};
use crate::{Error, Result};

/// Fraction of rows whose head argmax matches the label. Uses the backbone
/// and head only, with the given parameters (live or EMA).
pub fn eval_accuracy(disc: &Discriminative, params: &ParamStore, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let pred = disc.predict_with(params, &ds.features)?.argmax_rows();
    let hits = pred.iter().zip(&ds.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / ds.len() as f64)
}

/// The data of one seeded run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: Dataset,
    pub test: Dataset,
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
}

impl RunData {
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let (train, test) = cfg.dataset.build(seed)?;
        let (labeled, unlabeled) = match cfg.labels_per_class {
            LabelBudget::PerClass(k) => split_labels(&train, k, seed)?,
            LabelBudget::Everything(_) => all_labeled(&train),
        };
        Ok(Self {
            train,
            test,
            labeled,
            unlabeled,
        })
    }
}

/// One seed's training run with its interval bookkeeping.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub data: RunData,
    pub state: TrainState,
    pub acc: IntervalAccumulator,
    pub rows: Vec<MetricsRow>,
}

impl SeedRun {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let data = RunData::build(config, seed)?;
        let state = TrainState::new(
            config.training.clone(),
            data.train.input_dim(),
            data.train.classes,
            seed,
        )?;
        Ok(Self {
            config: config.clone(),
            seed,
            data,
            state,
            acc: IntervalAccumulator::default(),
            rows: Vec::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.training.total_steps
    }

    /// One training step; closes and evaluates the interval when due.
    pub fn step(&mut self) -> Result<()> {
        let m = self
            .state
            .step_on(&self.data.labeled, &self.data.unlabeled)?;
        self.acc.add(&m);
        let k = self.state.step;
        if k % self.config.eval_interval == 0 || self.is_done() {
            let mut row = self.acc.take_row(k);
            let (disc, live, ema) = (
                &self.state.disc,
                &self.state.disc.params,
                self.state.ema.shadow(),
            );
            row.train_acc_live = eval_accuracy(disc, live, &self.data.train)?;
            row.train_acc_ema = eval_accuracy(disc, ema, &self.data.train)?;
            row.test_acc_live = eval_accuracy(disc, live, &self.data.test)?;
            row.test_acc_ema = eval_accuracy(disc, ema, &self.data.test)?;
            self.rows.push(row);
        }
        Ok(())
    }

    /// Trains until `step` steps are complete (or the schedule ends).
    pub fn run_until(&mut self, step: usize) -> Result<()> {
        while self.state.step < step && !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    /// Trains to the end, writing a checkpoint every `checkpoint_interval` steps.
    pub fn run_to_end(&mut self) -> Result<()> {
        let total = self.config.training.total_steps;
        match self.config.checkpoint_interval {
            None => self.run_until(total),
            Some(every) => {
                while !self.is_done() {
                    let next = (self.state.step / every + 1) * every;
                    self.run_until(next)?;
                    save_checkpoint(&self.checkpoint_path(), self)?;
                }
                Ok(())
            }
        }
    }

    pub fn csv_path(&self) -> PathBuf {
        self.config.out_dir.join(format!("seed{}.csv", self.seed))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.config.out_dir.join(format!("seed{}.ckpt", self.seed))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_metrics_csv(BufWriter::new(File::create(path)?), &self.rows)
    }

    pub fn summary(&self) -> SeedSummary {
        let last = self.rows.last().cloned().unwrap_or_default();
        SeedSummary {
            seed: self.seed,
            test_acc_ema: last.test_acc_ema,
            test_acc_live: last.test_acc_live,
            rows: self.rows.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub test_acc_ema: f64,
    pub test_acc_live: f64,
    #[serde(skip)]
    pub rows: Vec<MetricsRow>,
}

/// Final EMA test accuracy across seeds; `std` is the sample deviation, 0 for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub mean: f64,
    pub std: f64,
    pub seeds: Vec<SeedSummary>,
}

impl ExperimentSummary {
    pub fn from_seeds(seeds: Vec<SeedSummary>) -> Self {
        let n = seeds.len() as f64;
        let mean = seeds.iter().map(|s| s.test_acc_ema).sum::<f64>() / n;
        let std = if seeds.len() < 2 {
            0.0
        } else {
            (seeds
                .iter()
                .map(|s| (s.test_acc_ema - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0))
                .sqrt()
        };
        Self { mean, std, seeds }
    }
}

/// Creates `dir` and proves it is writable.
pub fn prepare_out_dir(dir: &Path) -> Result<()> {
    let probe = dir.join(".write-probe");
    fs::create_dir_all(dir)
        .and_then(|_| fs::write(&probe, b""))
        .and_then(|_| fs::remove_file(&probe))
        .map_err(|e| {
            Error::Config(format!(
                "output directory {} is not writable: {e}",
                dir.display()
            ))
        })
}

/// Trains every seed, writing `seed<k>.csv`, `config.json` and `summary.json` into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    prepare_out_dir(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.json"), cfg.to_json())?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut run = SeedRun::new(cfg, seed)?;
        run.run_to_end()?;
        run.write_csv(&run.csv_path())?;
        seeds.push(run.summary());
    }
    let summary = ExperimentSummary::from_seeds(seeds);
    fs::write(
        cfg.out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

fn sub_config(cfg: &ExperimentConfig, dir: String) -> ExperimentConfig {
    ExperimentConfig {
        out_dir: cfg.out_dir.join(dir),
        ..cfg.clone()
    }
}

/// Runs the same seeds and data under each policy, one subdirectory per policy.
pub fn compare_policies(
    cfg: &ExperimentConfig,
    policies: &[WeightPolicy],
) -> Result<Vec<(WeightPolicy, ExperimentSummary)>> {
    prepare_out_dir(&cfg.out_dir)?;
    let mut out = Vec::new();
    for &p in policies {
        let mut sub = sub_config(cfg, format!("policy-{}", p.to_string().replace(':', "-")));
        sub.training.policy = p;
        out.push((p, run_experiment(&sub)?));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(cfg.out_dir.join("comparison.csv"))?;
    w.write_record(["policy", "mean_test_acc", "std_test_acc"])?;
    for (p, s) in &out {
        w.write_record([p.to_string(), s.mean.to_string(), s.std.to_string()])?;
    }
    w.flush()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean: f64,
    pub std: f64,
}

/// One experiment per λ, one subdirectory each, plus `sweep.csv`.
pub fn lambda_sweep(cfg: &ExperimentConfig, values: &[f64]) -> Result<Vec<SweepRow>> {
    prepare_out_dir(&cfg.out_dir)?;
    let mut rows = Vec::new();
    for &lambda in values {
        let mut sub = sub_config(cfg, format!("lambda-{lambda:e}"));
        sub.training.lambda = lambda;
        let s = run_experiment(&sub)?;
        rows.push(SweepRow {
            lambda,
            mean: s.mean,
            std: s.std,
        });
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(cfg.out_dir.join("sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Writes `data_seed<k>.csv` (train and test rows) for every seed.
pub fn export_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    prepare_out_dir(&cfg.out_dir)?;
    cfg.seeds
        .iter()
        .map(|&seed| {
            let (train, test) = cfg.dataset.build(seed)?;
            let path = cfg.out_dir.join(format!("data_seed{seed}.csv"));
            write_csv(BufWriter::new(File::create(&path)?), &[&train, &test])?;
            Ok(path)
        })
        .collect()
}
