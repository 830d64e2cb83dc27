//! Ablation grids: every (variant, seed) cell runs the full pipeline in an
//! isolated worker, failures are recorded without stopping the grid, and
//! the table reports mean ± std per variant with one row per variant.

use rayon::prelude::*;
use std::collections::BTreeMap;
use std::time::Instant;

use crate::data::Suite;
use crate::error::Result;
use crate::report::{GridRow, GridTable, MeanStd, RunReport};
use crate::trainer::{train, TrainConfig, Variant};

/// Metric columns extracted from one run: each task's accuracy on its own
/// source dataset's test split, plus the target task on the held-out
/// domain.
pub fn cell_metrics(report: &RunReport, suite: &Suite, target_task: usize) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for entry in &report.final_eval {
        if entry.holdout {
            if entry.task == target_task {
                out.insert(format!("holdout_{}", entry.task_name), entry.accuracy);
            }
        } else {
            out.insert(entry.task_name.clone(), entry.accuracy);
        }
    }
    let _ = suite;
    out
}

/// Stable metric column order: tasks in id order, then the holdout column.
pub fn metric_columns(suite: &Suite, target_task: usize) -> Vec<String> {
    let mut cols: Vec<String> = suite.registry.tasks.iter().map(|t| t.name.clone()).collect();
    cols.push(format!(
        "holdout_{}",
        suite.registry.tasks[target_task].name
    ));
    cols
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub variant: Variant,
    pub seed: u64,
    pub outcome: std::result::Result<BTreeMap<String, f64>, String>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub table: GridTable,
    pub cells: Vec<CellResult>,
    pub elapsed_secs: f64,
}

/// Runs variants × seeds in parallel. `base` provides every knob except
/// the variant and seed, which are overridden per cell.
pub fn run_ablation_grid(
    suite: &Suite,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<GridOutcome> {
    let started = Instant::now();
    let cells_spec: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();

    let cells: Vec<CellResult> = cells_spec
        .par_iter()
        .map(|&(variant, seed)| {
            let mut cfg = base.clone();
            cfg.variant = variant;
            cfg.seed = seed;
            cfg.da.enabled = variant.uses_da();
            let outcome = match train(&cfg, suite) {
                Ok(out) if out.report.diverged => Err("diverged".to_string()),
                Ok(out) => Ok(cell_metrics(&out.report, suite, cfg.target_task)),
                Err(e) => Err(e.to_string()),
            };
            CellResult {
                variant,
                seed,
                outcome,
            }
        })
        .collect();

    let columns = metric_columns(suite, base.target_task);
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let ok: Vec<&BTreeMap<String, f64>> = cells
            .iter()
            .filter(|c| c.variant == variant)
            .filter_map(|c| c.outcome.as_ref().ok())
            .collect();
        let failed = cells
            .iter()
            .filter(|c| c.variant == variant && c.outcome.is_err())
            .count();
        let mut metrics = BTreeMap::new();
        for col in &columns {
            let samples: Vec<f64> = ok.iter().filter_map(|m| m.get(col)).copied().collect();
            if !samples.is_empty() {
                metrics.insert(col.clone(), MeanStd::from_samples(&samples));
            }
        }
        rows.push(GridRow {
            variant: variant.slug().into(),
            seeds_ok: ok.len(),
            seeds_failed: failed,
            metrics,
        });
    }

    Ok(GridOutcome {
        table: GridTable { columns, rows },
        cells,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}
