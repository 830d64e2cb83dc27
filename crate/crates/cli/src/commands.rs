//! Command implementations. Every command is deterministic given
//! (config, seed), never mutates its inputs, and writes all outputs under
//! the out directory via atomic temp+rename.

use std::path::{Path, PathBuf};

use mdmt_core::data::{generate_suite, load_dataset, load_suite, save_distilled, save_suite, Suite};
use mdmt_core::distill::{build_union, teacher_label, TransformSet};
use mdmt_core::error::Error;
use mdmt_core::experiment::run_ablation_grid;
use mdmt_core::model::Model;
use mdmt_core::report::{confusion_csv, lr_trace_csv, RunReport};
use mdmt_core::trainer::{
    eval_confusion, evaluate, retrain_student, train, RetrainMode, TrainOutcome, Variant,
};
use mdmt_core::write_atomic;

use crate::config::ExperimentConfig;
use crate::CliError;

fn load_suite_checked(cfg: &ExperimentConfig) -> Result<Suite, CliError> {
    let dir = cfg.suite_dir();
    load_suite(&dir).map_err(|e| match e {
        Error::Io { .. } => CliError::runtime(format!(
            "suite not found under {} (run `gen` first): {e}",
            dir.display()
        )),
        other => CliError::from(other),
    })
}

pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let dir = cfg.suite_dir();
    let (suite, _) = generate_suite(&cfg.suite.gen, cfg.suite.seed)?;
    let written = save_suite(&suite, &cfg.suite.gen, cfg.suite.seed, &dir)?;
    println!(
        "suite: {} tasks, {} domains, {} datasets (seed {})",
        suite.registry.tasks.len(),
        cfg.suite.gen.domains.len(),
        suite.registry.datasets.len(),
        cfg.suite.seed
    );
    for task in &suite.registry.tasks {
        println!("  task {} `{}`: {} classes", task.id, task.name, task.classes);
    }
    for ds in &suite.registry.datasets {
        let marker = if Some(ds.dataset_id) == suite.holdout_dataset {
            "  [held-out]"
        } else {
            ""
        };
        println!(
            "  dataset {} domain {} tasks {:?}: {} samples ({} train / {} test){}",
            ds.dataset_id,
            ds.domain_id,
            ds.labeled_tasks,
            ds.len(),
            ds.train_idx.len(),
            ds.test_idx.len(),
            marker
        );
    }
    println!("wrote {} files under {}", written.len(), dir.display());
    Ok(())
}

fn write_run_outputs(
    cfg: &ExperimentConfig,
    outcome: &TrainOutcome,
    stem: &str,
) -> Result<PathBuf, CliError> {
    let report_path = cfg.out_dir.join(format!("{stem}.report"));
    outcome.report.save(&report_path)?;
    write_atomic(
        &cfg.out_dir.join(format!("{stem}.csv")),
        outcome.report.trace_csv().as_bytes(),
    )?;
    outcome.model.save(&cfg.out_dir.join(format!("{stem}.ckpt")))?;
    Ok(report_path)
}

fn print_final_eval(report: &RunReport) {
    for e in &report.final_eval {
        println!(
            "  {}{} on dataset {} (domain {}): {:.4}",
            e.task_name,
            if e.holdout { " [held-out]" } else { "" },
            e.dataset_id,
            e.domain_id,
            e.accuracy
        );
    }
}

pub fn cmd_train(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> Result<(), CliError> {
    let suite = load_suite_checked(cfg)?;
    let train_cfg = cfg.train_config(variant, seed);
    let outcome = train(&train_cfg, &suite)?;
    let stem = format!("{}_{}", variant.slug(), seed);
    let report_path = write_run_outputs(cfg, &outcome, &stem)?;
    println!("report: {}", report_path.display());
    print_final_eval(&outcome.report);
    if outcome.report.diverged {
        return Err(CliError::diverged(format!(
            "run {stem} diverged; partial report written"
        )));
    }
    Ok(())
}

pub fn cmd_distill(
    cfg: &ExperimentConfig,
    teacher_path: &Path,
    seed: u64,
) -> Result<(), CliError> {
    let suite = load_suite_checked(cfg)?;
    let teacher = Model::load(teacher_path)?;
    let variant = cfg.train.variant;
    let train_cfg = cfg.train_config(variant, seed);

    let mode = if variant == Variant::DistillBaseline {
        RetrainMode::SingleTask
    } else {
        cfg.distill.mode
    };
    let fill_universe: Vec<usize> = match mode {
        RetrainMode::SingleTask => vec![train_cfg.target_task],
        RetrainMode::Mtl => (0..suite.registry.num_tasks()).collect(),
    };
    let transforms = TransformSet::with_flip(suite.flip.clone());

    let mut distilled = Vec::new();
    for ds in &suite.registry.datasets {
        if Some(ds.dataset_id) == suite.holdout_dataset {
            continue;
        }
        let fill: Vec<usize> = fill_universe
            .iter()
            .copied()
            .filter(|&t| !ds.labels_task(t))
            .collect();
        if fill.is_empty() {
            continue;
        }
        let d = teacher_label(
            &teacher,
            &suite.registry.tasks,
            ds,
            &fill,
            &transforms,
            cfg.distill.threshold,
        )?;
        let path = cfg
            .out_dir
            .join(format!("distilled_{}_{}.ds", ds.dataset_id, seed));
        save_distilled(&d, &suite.registry.tasks, &path)?;
        println!("distilled dataset {} -> {}", ds.dataset_id, path.display());
        distilled.push(d);
    }

    let originals: Vec<_> = suite
        .registry
        .datasets
        .iter()
        .filter(|d| Some(d.dataset_id) != suite.holdout_dataset)
        .cloned()
        .collect();
    let union = build_union(&suite.registry.tasks, &originals, &distilled)?;
    let outcome = retrain_student(&train_cfg, &suite, union, mode)?;
    let stem = format!("{}_student_{}", variant.slug(), seed);
    let report_path = write_run_outputs(cfg, &outcome, &stem)?;
    println!("student report: {}", report_path.display());
    print_final_eval(&outcome.report);
    if outcome.report.diverged {
        return Err(CliError::diverged(format!(
            "student run {stem} diverged; partial report written"
        )));
    }
    Ok(())
}

pub fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    task: usize,
    confusion_out: Option<&Path>,
) -> Result<(), CliError> {
    let model = Model::load(checkpoint)?;
    let loaded = load_dataset(dataset)?;
    let accuracy = evaluate(&model, &loaded.spec, task)?;
    println!("accuracy {accuracy:.6}");
    let matrix = eval_confusion(&model, &loaded.spec, task)?;
    let csv = confusion_csv(&matrix);
    if let Some(path) = confusion_out {
        write_atomic(path, csv.as_bytes())?;
        println!("confusion matrix: {}", path.display());
    } else {
        print!("{csv}");
    }
    Ok(())
}

pub fn cmd_grid(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let suite = load_suite_checked(cfg)?;
    let base = cfg.train_config(cfg.train.variant, 0);
    let outcome = run_ablation_grid(&suite, &base, &cfg.grid.variants, &cfg.seeds)?;
    let csv = outcome.table.to_csv();
    let path = cfg.out_dir.join("grid.csv");
    write_atomic(&path, csv.as_bytes())?;
    print!("{csv}");
    println!(
        "grid: {} variants x {} seeds in {:.1}s -> {}",
        cfg.grid.variants.len(),
        cfg.seeds.len(),
        outcome.elapsed_secs,
        path.display()
    );
    let failures: Vec<String> = outcome
        .cells
        .iter()
        .filter_map(|c| {
            c.outcome
                .as_ref()
                .err()
                .map(|e| format!("{}/{}: {e}", c.variant.slug(), c.seed))
        })
        .collect();
    if !failures.is_empty() {
        eprintln!("failed cells:");
        for f in &failures {
            eprintln!("  {f}");
        }
        return Err(CliError::runtime(format!(
            "{} grid cells failed",
            failures.len()
        )));
    }
    Ok(())
}

pub fn cmd_lr_trace(report_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(report_path)
        .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", report_path.display())))?;
    let report = RunReport::from_json(&text)?;
    let csv = lr_trace_csv(&report);
    match out {
        Some(path) => {
            write_atomic(path, csv.as_bytes())?;
            println!("lr trace: {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
