use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::normatch::StepMetrics;
use crate::{Error, Result};

/// First line of every metrics CSV; the column set below belongs to this version.
pub const METRICS_HEADER_COMMENT: &str =
    "# normatch-metrics v1: losses are interval means; counts are sums over the steps of the interval";

/// One row per eval interval.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Completed training steps.
    pub step: usize,
    pub lr_d: f64,
    pub lr_n: f64,
    pub loss_total: f64,
    pub loss_sup_d: f64,
    pub loss_unsup_d: f64,
    pub loss_sup_n: f64,
    pub loss_unsup_n: f64,
    pub loss_pl_n: f64,
    pub train_acc_live: f64,
    pub train_acc_ema: f64,
    pub test_acc_live: f64,
    pub test_acc_ema: f64,
    /// Fraction of weak-view pseudo-labels matching the sealed truth.
    pub pseudo_label_acc: f64,
    pub unlabeled_seen: usize,
    pub ncue_count: usize,
    pub threshold_count: usize,
    pub correct_count: usize,
    pub high_conf_count: usize,
    pub mean_tau: f64,
    /// Fraction of unlabeled samples with `max p_d > 0.95`.
    pub r_hc: f64,
}

/// Running sums over the steps of the current eval interval.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalAccumulator {
    pub steps: usize,
    pub last_lr_d: f64,
    pub last_lr_n: f64,
    pub loss_total: f64,
    pub loss_sup_d: f64,
    pub loss_unsup_d: f64,
    pub loss_sup_n: f64,
    pub loss_unsup_n: f64,
    pub loss_pl_n: f64,
    pub unlabeled: usize,
    pub ncue: usize,
    pub threshold: usize,
    pub correct: usize,
    pub high_conf: usize,
    pub tau_sum: f64,
}

fn ratio(num: f64, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

impl IntervalAccumulator {
    pub fn add(&mut self, m: &StepMetrics) {
        self.steps += 1;
        self.last_lr_d = m.lr_d;
        self.last_lr_n = m.lr_n;
        self.loss_total += m.loss.total;
        self.loss_sup_d += m.loss.sup_d;
        self.loss_unsup_d += m.loss.unsup_d;
        self.loss_sup_n += m.loss.sup_n;
        self.loss_unsup_n += m.loss.unsup_n;
        self.loss_pl_n += m.loss.pl_n;
        self.unlabeled += m.unlabeled;
        self.ncue += m.ncue_count;
        self.threshold += m.threshold_count;
        self.correct += m.correct_count;
        self.high_conf += m.high_conf_count;
        self.tau_sum += m.tau_sum;
    }

    /// Closes the interval. Accuracies are filled in by the caller.
    pub fn take_row(&mut self, step: usize) -> MetricsRow {
        let a = std::mem::take(self);
        let n = a.steps;
        MetricsRow {
            step,
            lr_d: a.last_lr_d,
            lr_n: a.last_lr_n,
            loss_total: ratio(a.loss_total, n),
            loss_sup_d: ratio(a.loss_sup_d, n),
            loss_unsup_d: ratio(a.loss_unsup_d, n),
            loss_sup_n: ratio(a.loss_sup_n, n),
            loss_unsup_n: ratio(a.loss_unsup_n, n),
            loss_pl_n: ratio(a.loss_pl_n, n),
            pseudo_label_acc: ratio(a.correct as f64, a.unlabeled),
            unlabeled_seen: a.unlabeled,
            ncue_count: a.ncue,
            threshold_count: a.threshold,
            correct_count: a.correct,
            high_conf_count: a.high_conf,
            mean_tau: ratio(a.tau_sum, a.unlabeled),
            r_hc: ratio(a.high_conf as f64, a.unlabeled),
            ..MetricsRow::default()
        }
    }
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER_COMMENT}")?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    if rows.is_empty() {
        // serde only emits the header alongside the first record
        w.write_record(csv_columns())?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_columns() -> Vec<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(MetricsRow::default()).expect("row serializes");
    let bytes = w.into_inner().expect("in-memory writer");
    let text = String::from_utf8(bytes).expect("utf-8");
    text.lines()
        .next()
        .unwrap_or_default()
        .split(',')
        .map(str::to_owned)
        .collect()
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut input = BufReader::new(input);
    let mut first = String::new();
    input.read_line(&mut first)?;
    if first.trim_end() != METRICS_HEADER_COMMENT {
        return Err(Error::invalid(format!(
            "unrecognized metrics header {:?}",
            first.trim_end()
        )));
    }
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().collect::<Vec<_>>() != csv_columns() {
        return Err(Error::invalid("metrics columns do not match this version"));
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
