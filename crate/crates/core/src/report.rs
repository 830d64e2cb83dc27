//! Run reports and metric tables.
//!
//! A report is self-describing: the exact config, the seed, per-epoch
//! metrics, the full per-step trace (losses, task weights, alignment loss,
//! lr, events), and the final per-dataset per-task test accuracies.
//! Everything except the `timing` block is a pure function of
//! (config, seed) and reproduces bit-for-bit.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::LrEvent;
use crate::write_atomic;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Per-task masked loss; `None` for tasks inactive in this stage.
    pub task_losses: Vec<Option<f64>>,
    /// Per-task GradNorm weight at the time of the step.
    pub omega: Vec<Option<f64>>,
    /// Reported objective: Σω·L − λ·L_DA.
    pub total: f64,
    pub da_loss: f64,
    pub triplets: usize,
    /// lr used by this step's optimizer update.
    pub lr: f64,
    pub event: LrEvent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskEpochMetric {
    pub task: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub tasks: Vec<TaskEpochMetric>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalEntry {
    pub dataset_id: usize,
    pub domain_id: usize,
    pub task: usize,
    pub task_name: String,
    pub accuracy: f64,
    pub holdout: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    /// "teacher" for the distillation first stage, "final" otherwise.
    pub stage: String,
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
    pub best_val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Timing {
    /// Wall clock of the whole run; NOT deterministic and excluded from
    /// bit-identity comparisons.
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub seed: u64,
    /// Exact config echo for auditability.
    pub config: serde_json::Value,
    pub task_names: Vec<String>,
    pub stages: Vec<StageReport>,
    /// Test accuracy per dataset per (originally) labeled task, including
    /// the held-out cross-domain dataset.
    pub final_eval: Vec<EvalEntry>,
    pub diverged: bool,
    pub timing: Timing,
}

impl RunReport {
    pub fn final_stage(&self) -> &StageReport {
        self.stages.last().expect("at least one stage")
    }

    pub fn accuracy(&self, dataset_id: usize, task: usize) -> Option<f64> {
        self.final_eval
            .iter()
            .find(|e| e.dataset_id == dataset_id && e.task == task)
            .map(|e| e.accuracy)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("report serialize: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: 0,
            message: format!("report: {e}"),
        })
    }

    /// JSON with the timing block zeroed; equal across reruns of the same
    /// (config, seed).
    pub fn deterministic_json(&self) -> Result<String> {
        let mut clone = self.clone();
        clone.timing = Timing::default();
        clone.to_json()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    /// Per-step CSV of the final stage:
    /// step, per-task losses, per-task ω, total, da_loss, triplets, lr, event.
    pub fn trace_csv(&self) -> String {
        stage_trace_csv(self.final_stage(), &self.task_names)
    }
}

pub fn stage_trace_csv(stage: &StageReport, task_names: &[String]) -> String {
    let mut out = String::new();
    out.push_str("step");
    for name in task_names {
        write!(out, ",loss_{name}").unwrap();
    }
    for name in task_names {
        write!(out, ",omega_{name}").unwrap();
    }
    out.push_str(",total,da_loss,triplets,lr,event\n");
    for s in &stage.steps {
        write!(out, "{}", s.step).unwrap();
        for l in &s.task_losses {
            match l {
                Some(v) => write!(out, ",{v}").unwrap(),
                None => out.push(','),
            }
        }
        for w in &s.omega {
            match w {
                Some(v) => write!(out, ",{v}").unwrap(),
                None => out.push(','),
            }
        }
        writeln!(
            out,
            ",{},{},{},{},{}",
            s.total, s.da_loss, s.triplets, s.lr, s.event
        )
        .unwrap();
    }
    out
}

/// Plot-ready lr trace: step, loss, lr, event.
pub fn lr_trace_csv(report: &RunReport) -> String {
    let mut out = String::from("step,loss,lr,event\n");
    for s in &report.final_stage().steps {
        writeln!(out, "{},{},{},{}", s.step, s.total, s.lr, s.event).unwrap();
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

/// One ablation-grid row: seed statistics per metric for one variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub variant: String,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub metrics: BTreeMap<String, MeanStd>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridTable {
    pub columns: Vec<String>,
    pub rows: Vec<GridRow>,
}

impl GridTable {
    /// CSV with mean and std columns per metric, one row per variant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seeds_ok,seeds_failed");
        for c in &self.columns {
            write!(out, ",{c}_mean,{c}_std").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            write!(out, "{},{},{}", row.variant, row.seeds_ok, row.seeds_failed).unwrap();
            for c in &self.columns {
                match row.metrics.get(c) {
                    Some(m) => write!(out, ",{},{}", m.mean, m.std).unwrap(),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Confusion matrix CSV: header row of predicted classes, one row per true
/// class with counts.
pub fn confusion_csv(matrix: &[Vec<usize>]) -> String {
    let classes = matrix.len();
    let mut out = String::from("true\\pred");
    for c in 0..classes {
        write!(out, ",{c}").unwrap();
    }
    out.push('\n');
    for (t, row) in matrix.iter().enumerate() {
        write!(out, "{t}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_basics() {
        let m = MeanStd::from_samples(&[1.0, 2.0, 3.0]);
        assert!((m.mean - 2.0).abs() < 1e-15);
        assert!((m.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn trace_csv_shape() {
        let stage = StageReport {
            stage: "final".into(),
            epochs: vec![],
            steps: vec![StepRecord {
                step: 0,
                task_losses: vec![Some(1.5), None],
                omega: vec![Some(1.0), None],
                total: 1.5,
                da_loss: 0.0,
                triplets: 0,
                lr: 0.01,
                event: LrEvent::None,
            }],
            best_val_accuracy: 0.0,
        };
        let csv = stage_trace_csv(&stage, &["a".into(), "b".into()]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,loss_a,loss_b,omega_a,omega_b,total,da_loss,triplets,lr,event"
        );
        assert_eq!(lines.next().unwrap(), "0,1.5,,1,,1.5,0,0,0.01,none");
    }
}
