//! End-to-end training: the per-step loop binding batch composition,
//! masked losses, GradNorm, adversarial alignment, the optimizer, and the
//! lr controller; plus the variant pipeline (plain runs and two-stage
//! distillation runs) behind the ablation grid.
//!
//! Step order per batch: compose → trunk forward → all active heads →
//! per-sample losses → mask → weighted total → (optional) discriminator +
//! triplet loss with sign-reversed routing → one backward → GradNorm
//! weight update → momentum step → lr feedback.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

use crate::data::{BatchQuota, DatasetSpec, EpochComposer, Registry, Suite};
use crate::distill::{build_union, teacher_label, TransformSet};
use crate::domain_adapt::{adversarial_total, mine_triplets, triplet_loss, DaConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{masked_task_loss, weighted_total, GradNormConfig, Reduction, TaskWeights};
use crate::model::{HeadConfig, Model, ModelConfig};
use crate::optim::{GradStore, LrController, LrSchedule};
use crate::report::{
    EpochMetrics, EvalEntry, RunReport, StageReport, StepRecord, TaskEpochMetric, Timing,
};

// stream tags for seed derivation
const STREAM_INIT: u64 = 1;
const STREAM_STAGE: u64 = 2;
const STREAM_STUDENT: u64 = 3;
const STREAM_VAL: u64 = 4;
const STREAM_COMPOSER: u64 = 5;
const STREAM_MINING: u64 = 6;

/// The ablation variants. The `DA` prefix adds the adversarial
/// discriminator, `Distill` a teacher/student pseudo-labeling stage, and
/// `DR` the dynamic learning-rate controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    #[serde(rename = "2md-mtl")]
    MdMtl,
    #[serde(rename = "da-2md-mtl")]
    DaMdMtl,
    DistillBaseline,
    #[serde(rename = "distill-2md-mtl")]
    DistillMdMtl,
    #[serde(rename = "distill-da-2md-mtl")]
    DistillDaMdMtl,
    #[serde(rename = "dr-distill-da-2md-mtl")]
    DrDistillDaMdMtl,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::MdMtl,
        Variant::DaMdMtl,
        Variant::DistillBaseline,
        Variant::DistillMdMtl,
        Variant::DistillDaMdMtl,
        Variant::DrDistillDaMdMtl,
    ];

    pub fn slug(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::MdMtl => "2md-mtl",
            Variant::DaMdMtl => "da-2md-mtl",
            Variant::DistillBaseline => "distill-baseline",
            Variant::DistillMdMtl => "distill-2md-mtl",
            Variant::DistillDaMdMtl => "distill-da-2md-mtl",
            Variant::DrDistillDaMdMtl => "dr-distill-da-2md-mtl",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    /// The single-stage variant a distillation teacher trains as.
    pub fn teacher_variant(&self) -> Option<Variant> {
        match self {
            Variant::DistillBaseline => Some(Variant::Baseline),
            Variant::DistillMdMtl => Some(Variant::MdMtl),
            Variant::DistillDaMdMtl | Variant::DrDistillDaMdMtl => Some(Variant::DaMdMtl),
            _ => None,
        }
    }

    pub fn uses_distill(&self) -> bool {
        self.teacher_variant().is_some()
    }

    pub fn uses_da(&self) -> bool {
        matches!(
            self,
            Variant::DaMdMtl | Variant::DistillDaMdMtl | Variant::DrDistillDaMdMtl
        )
    }

    pub fn multi_task(&self) -> bool {
        !matches!(self, Variant::Baseline | Variant::DistillBaseline)
    }

    /// DR variants force the dynamic lr schedule on every stage.
    pub fn forces_dynamic_lr(&self) -> bool {
        matches!(self, Variant::DrDistillDaMdMtl)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.slug())
    }
}

/// How the distillation student retrains on the union.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RetrainMode {
    SingleTask,
    #[default]
    Mtl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSettings {
    /// Minimum averaged-softmax confidence for a slot to fill; 0 fills
    /// everything.
    pub threshold: f64,
    /// Student mode for MTL-teacher variants (distill-baseline always
    /// retrains single-task).
    pub mode: RetrainMode,
    /// Student epochs; defaults to the teacher's epoch count.
    pub epochs: Option<usize>,
}

impl Default for DistillSettings {
    fn default() -> Self {
        DistillSettings {
            threshold: 0.0,
            mode: RetrainMode::Mtl,
            epochs: None,
        }
    }
}

/// Network architecture knobs; class counts come from the registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub trunk: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub disc_embed: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            trunk: vec![48, 32],
            head_hidden: vec![16],
            disc_hidden: vec![24],
            disc_embed: 12,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, registry: &Registry, seed: u64) -> ModelConfig {
        ModelConfig {
            input_dim: registry.feature_dim(),
            trunk: self.trunk.clone(),
            heads: registry
                .tasks
                .iter()
                .map(|t| HeadConfig {
                    hidden: self.head_hidden.clone(),
                    classes: t.classes,
                })
                .collect(),
            disc_hidden: self.disc_hidden.clone(),
            disc_embed: self.disc_embed,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    /// Per-task samples per batch (mapped onto each task's source dataset).
    pub task_quota: Vec<usize>,
    pub momentum: f64,
    pub lr: LrSchedule,
    pub gradnorm: Option<GradNormConfig>,
    pub da: DaConfig,
    pub distill: DistillSettings,
    pub arch: ArchConfig,
    /// The main task evaluated cross-domain.
    pub target_task: usize,
    pub seed: u64,
    /// Fraction of each training pool carved out for validation.
    pub val_fraction: f64,
    pub reduction: Reduction,
}

impl TrainConfig {
    pub fn defaults_for(variant: Variant, seed: u64) -> Self {
        TrainConfig {
            variant,
            epochs: 30,
            task_quota: vec![8, 8, 16],
            momentum: 0.9,
            lr: LrSchedule::default(),
            gradnorm: None,
            da: DaConfig {
                enabled: variant.uses_da(),
                ..DaConfig::default()
            },
            distill: DistillSettings::default(),
            arch: ArchConfig::default(),
            target_task: 2,
            seed,
            val_fraction: 0.1,
            reduction: Reduction::Mean,
        }
    }

    pub fn validate(&self, registry: &Registry) -> Result<()> {
        let t = registry.num_tasks();
        if self.target_task >= t {
            return Err(Error::UnknownTask(self.target_task));
        }
        if self.task_quota.len() != t {
            return Err(Error::shape("task quota", &[t], &[self.task_quota.len()]));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0,1)".into()));
        }
        self.da.validate()?;
        if self.variant.uses_da() && !self.da.enabled {
            return Err(Error::Config(format!(
                "variant {} requires the domain-adaptation block enabled",
                self.variant
            )));
        }
        Ok(())
    }

    fn effective_lr(&self) -> LrSchedule {
        if self.variant.forces_dynamic_lr() {
            match self.lr {
                LrSchedule::Dynamic(_) => self.lr,
                LrSchedule::Exponential { .. } => LrSchedule::Dynamic(Default::default()),
            }
        } else {
            self.lr
        }
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub report: RunReport,
}

/// The run seed the distillation student stage derives from a pipeline's
/// seed. A plain run launched with this seed reproduces the student stage
/// exactly when the union carries no filled labels.
pub fn student_seed(seed: u64) -> u64 {
    crate::rng::derive_seed(seed, STREAM_STUDENT)
}

/// The freshly initialized network a run of this config starts from
/// (first stage; the student stage re-inits from the derived seed).
pub fn initial_model(cfg: &TrainConfig, registry: &Registry) -> Result<Model> {
    Model::init(
        cfg.arch
            .model_config(registry, crate::rng::derive_seed(cfg.seed, STREAM_INIT)),
    )
}

/// Test-split accuracy of one task on one dataset.
pub fn evaluate(model: &Model, ds: &DatasetSpec, task: usize) -> Result<f64> {
    if !ds.labels_task(task) {
        return Err(Error::Config(format!(
            "dataset {} does not label task {task}",
            ds.dataset_id
        )));
    }
    accuracy_on(model, ds, &ds.test_idx, task)
}

/// Test-split confusion matrix (true class × predicted class counts).
pub fn eval_confusion(model: &Model, ds: &DatasetSpec, task: usize) -> Result<Vec<Vec<usize>>> {
    if !ds.labels_task(task) {
        return Err(Error::Config(format!(
            "dataset {} does not label task {task}",
            ds.dataset_id
        )));
    }
    let classes = model.config().heads[task].classes;
    let mut matrix = vec![vec![0usize; classes]; classes];
    let rows: Vec<Vec<f64>> = ds
        .test_idx
        .iter()
        .map(|&i| ds.samples[i].features.clone())
        .collect();
    if rows.is_empty() {
        return Ok(matrix);
    }
    let preds = model.predict(task, &crate::tensor::Tensor::from_rows(&rows)?)?;
    for (&i, &pred) in ds.test_idx.iter().zip(&preds) {
        if let Some(truth) = ds.samples[i].labels[task] {
            matrix[truth as usize][pred] += 1;
        }
    }
    Ok(matrix)
}

fn accuracy_on(model: &Model, ds: &DatasetSpec, indices: &[usize], task: usize) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let rows: Vec<Vec<f64>> = indices.iter().map(|&i| ds.samples[i].features.clone()).collect();
    let preds = model.predict(task, &crate::tensor::Tensor::from_rows(&rows)?)?;
    let mut hits = 0usize;
    let mut counted = 0usize;
    for (&i, &pred) in indices.iter().zip(&preds) {
        if let Some(truth) = ds.samples[i].labels[task] {
            counted += 1;
            if truth as usize == pred {
                hits += 1;
            }
        }
    }
    if counted == 0 {
        return Err(Error::Config(format!(
            "no labeled samples for task {task} in dataset {}",
            ds.dataset_id
        )));
    }
    Ok(hits as f64 / counted as f64)
}

struct StageSetup<'a> {
    registry: &'a Registry,
    /// Tasks whose losses are computed each step.
    active_tasks: Vec<usize>,
    quota: BatchQuota,
    /// Drawable sample indices per quota dataset (train minus val).
    pools: BTreeMap<usize, Vec<usize>>,
    /// (task, dataset) pairs to report per-epoch metrics on; the first
    /// pair is the checkpoint-selection metric.
    eval_pairs: Vec<(usize, usize)>,
    /// Validation indices per dataset (subset of its train split).
    val: BTreeMap<usize, Vec<usize>>,
    epochs: usize,
    lr: LrSchedule,
    gradnorm: Option<GradNormConfig>,
    da: DaConfig,
    momentum: f64,
    reduction: Reduction,
    stage_seed: u64,
    stage_name: String,
}

struct StageOutcome {
    report: StageReport,
    /// Snapshot with the best validation accuracy on the selection metric.
    best: Model,
    diverged: bool,
}

fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Carves a validation slice out of each dataset's pool, deterministically
/// in `seed`.
fn carve_validation(
    pool_source: &BTreeMap<usize, Vec<usize>>,
    val_fraction: f64,
    seed: u64,
) -> (BTreeMap<usize, Vec<usize>>, BTreeMap<usize, Vec<usize>>) {
    use rand::Rng;
    let mut pools = BTreeMap::new();
    let mut vals = BTreeMap::new();
    for (&id, indices) in pool_source {
        let mut shuffled = indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(
            seed,
            STREAM_VAL.wrapping_add((id as u64) << 8),
        ));
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        let n_val = ((shuffled.len() as f64) * val_fraction).floor() as usize;
        let mut val: Vec<usize> = shuffled[..n_val].to_vec();
        let mut pool: Vec<usize> = shuffled[n_val..].to_vec();
        val.sort_unstable();
        pool.sort_unstable();
        pools.insert(id, pool);
        vals.insert(id, val);
    }
    (pools, vals)
}

fn train_stage(model: &mut Model, setup: &StageSetup) -> Result<StageOutcome> {
    let t = setup.registry.num_tasks();
    let mut composer = EpochComposer::new(
        setup.registry,
        setup.quota.clone(),
        &setup.pools,
        crate::rng::derive_seed(setup.stage_seed, STREAM_COMPOSER),
    )?;
    let mut mine_rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(
        setup.stage_seed,
        STREAM_MINING,
    ));
    let mut lrc = LrController::new(&setup.lr)?;
    let mut opt = crate::optim::MomentumSgd::new(setup.momentum, model.param_count());
    let mut weights = setup
        .gradnorm
        .filter(|_| setup.active_tasks.len() > 1)
        .map(|cfg| TaskWeights::uniform(setup.active_tasks.len(), cfg));

    let mut steps: Vec<StepRecord> = Vec::new();
    let mut epochs_out: Vec<EpochMetrics> = Vec::new();
    let mut best = model.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut step: u64 = 0;
    let mut diverged = false;

    'epochs: for epoch in 0..setup.epochs {
        composer.begin_epoch();
        while let Some(batch) = composer.next_batch()? {
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let features = g.leaf(&batch.features);
            let trunk_out = model.forward_shared(&mut g, &vars, features)?;

            let mut task_loss_vars = Vec::with_capacity(setup.active_tasks.len());
            for &task in &setup.active_tasks {
                let logits = model.forward_task_head(&mut g, &vars, task, trunk_out)?;
                let per_sample = g.softmax_xent(logits, &batch.targets(task))?;
                let masked = masked_task_loss(
                    &mut g,
                    per_sample,
                    &batch.mask.column(task),
                    setup.reduction,
                )?;
                task_loss_vars.push(masked);
            }
            let omega: Vec<f64> = match &weights {
                Some(w) => w.omega().to_vec(),
                None => vec![1.0; setup.active_tasks.len()],
            };
            let task_total = weighted_total(&mut g, &task_loss_vars, &omega)?;

            let (seed_var, total_value, da_value, n_triplets) = if setup.da.enabled {
                let reversed = g.grad_scale(trunk_out, -setup.da.lambda);
                let embeddings = model.forward_discriminator(&mut g, &vars, reversed)?;
                let triplets = mine_triplets(&batch.dataset_ids, &setup.da, &mut mine_rng);
                let l_da = triplet_loss(&mut g, embeddings, &triplets, setup.da.margin)?;
                let adv = adversarial_total(&mut g, task_total, l_da, setup.da.lambda)?;
                (adv.seed, adv.total_value, adv.da_value, triplets.len())
            } else {
                (task_total, g.scalar_value(task_total), 0.0, 0)
            };

            // GradNorm norm measurement: auxiliary reverse sweeps before the
            // parameter backward; G_i = ω_i · ‖dL_i/dW_last‖.
            let task_loss_values: Vec<f64> = task_loss_vars
                .iter()
                .map(|&v| g.scalar_value(v))
                .collect();
            let grad_norms = if weights.is_some() {
                let wvar = vars.var(model.last_trunk_weight());
                let mut norms = Vec::with_capacity(task_loss_vars.len());
                for (i, &lv) in task_loss_vars.iter().enumerate() {
                    g.backward(lv)?;
                    let norm = g.grad(wvar).map(|t| l2_norm(t.data())).unwrap_or(0.0);
                    norms.push(omega[i] * norm);
                }
                Some(norms)
            } else {
                None
            };

            g.backward(seed_var)?;
            let grads: GradStore = (0..model.param_count())
                .map(|id| g.grad(vars.var(id)))
                .collect();

            if let (Some(w), Some(norms)) = (&mut weights, &grad_norms) {
                w.update(&task_loss_values, norms)?;
            }

            let lr = lrc.lr();
            opt.step(model, &grads, lr, |_| true)?;
            let event = match lrc.observe(total_value) {
                Ok(ev) => ev,
                Err(Error::Divergence { .. }) => {
                    diverged = true;
                    steps.push(step_record(
                        step, t, &setup.active_tasks, &task_loss_values, &omega, total_value,
                        da_value, n_triplets, lr, crate::optim::LrEvent::None,
                    ));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };

            steps.push(step_record(
                step, t, &setup.active_tasks, &task_loss_values, &omega, total_value, da_value,
                n_triplets, lr, event,
            ));
            step += 1;
        }

        // per-epoch metrics + checkpoint selection on the first eval pair
        let mut task_metrics = Vec::new();
        for &(task, dataset_id) in &setup.eval_pairs {
            let ds = setup.registry.dataset(dataset_id)?;
            let train_pool = &setup.pools[&dataset_id];
            let train_acc = accuracy_on(model, ds, train_pool, task)?;
            let val_idx = &setup.val[&dataset_id];
            let val_acc = if val_idx.is_empty() {
                train_acc
            } else {
                accuracy_on(model, ds, val_idx, task)?
            };
            task_metrics.push(TaskEpochMetric {
                task,
                train_accuracy: train_acc,
                val_accuracy: val_acc,
            });
        }
        if let Some(first) = task_metrics.first() {
            if first.val_accuracy > best_val {
                best_val = first.val_accuracy;
                best = model.clone();
            }
        }
        epochs_out.push(EpochMetrics {
            epoch,
            tasks: task_metrics,
        });
    }

    if best_val == f64::NEG_INFINITY {
        best = model.clone();
        best_val = 0.0;
    }
    Ok(StageOutcome {
        report: StageReport {
            stage: setup.stage_name.clone(),
            epochs: epochs_out,
            steps,
            best_val_accuracy: best_val,
        },
        best,
        diverged,
    })
}

#[allow(clippy::too_many_arguments)]
fn step_record(
    step: u64,
    num_tasks: usize,
    active: &[usize],
    losses: &[f64],
    omega: &[f64],
    total: f64,
    da_loss: f64,
    triplets: usize,
    lr: f64,
    event: crate::optim::LrEvent,
) -> StepRecord {
    let mut task_losses = vec![None; num_tasks];
    let mut omegas = vec![None; num_tasks];
    for (slot, &task) in active.iter().enumerate() {
        task_losses[task] = Some(losses[slot]);
        omegas[task] = Some(omega[slot]);
    }
    StepRecord {
        step,
        task_losses,
        omega: omegas,
        total,
        da_loss,
        triplets,
        lr,
        event,
    }
}

/// Original task→dataset map over the training (non-holdout) datasets.
fn training_dataset_ids(suite: &Suite) -> Vec<usize> {
    suite
        .registry
        .datasets
        .iter()
        .map(|d| d.dataset_id)
        .filter(|&id| Some(id) != suite.holdout_dataset)
        .collect()
}

fn pool_for(
    registry: &Registry,
    dataset_id: usize,
    required_tasks: &[usize],
) -> Result<Vec<usize>> {
    let ds = registry.dataset(dataset_id)?;
    Ok(ds
        .train_idx
        .iter()
        .copied()
        .filter(|&i| {
            required_tasks.is_empty()
                || required_tasks
                    .iter()
                    .any(|&t| ds.samples[i].labels[t].is_some())
        })
        .collect())
}

struct StagePlan {
    registry: Registry,
    active_tasks: Vec<usize>,
    quota: BatchQuota,
    required_label_tasks: Vec<usize>,
    /// (task, dataset) pairs for per-epoch metrics, first = checkpoint
    /// selection metric. Always the tasks' ORIGINAL source datasets so the
    /// accuracies are against ground truth, never pseudo-labels.
    eval_pairs: Vec<(usize, usize)>,
    da_enabled: bool,
    epochs: usize,
    name: String,
}

/// Per-epoch eval pairs from the original registry: the target first (it
/// drives checkpoint selection), then each other active task on its own
/// source dataset.
fn original_eval_pairs(
    suite: &Suite,
    active_tasks: &[usize],
    target_task: usize,
) -> Result<Vec<(usize, usize)>> {
    let train_ids = training_dataset_ids(suite);
    let mut pairs = vec![(
        target_task,
        suite.registry.unique_source_for(target_task, &train_ids)?,
    )];
    for &task in active_tasks {
        if task != target_task {
            pairs.push((task, suite.registry.unique_source_for(task, &train_ids)?));
        }
    }
    Ok(pairs)
}

impl TrainConfig {
    /// Quota over the original per-task source datasets.
    fn mtl_quota(&self, suite: &Suite) -> Result<BatchQuota> {
        BatchQuota::by_task(
            &suite.registry,
            &training_dataset_ids(suite),
            &self.task_quota,
        )
    }

    fn baseline_quota(&self, suite: &Suite) -> Result<BatchQuota> {
        let total: usize = self.task_quota.iter().sum();
        let source = suite
            .registry
            .unique_source_for(self.target_task, &training_dataset_ids(suite))?;
        BatchQuota::new(vec![(source, total)])
    }
}

fn run_stage(
    cfg: &TrainConfig,
    plan: StagePlan,
    lr: LrSchedule,
    run_seed: u64,
    model: &mut Model,
) -> Result<StageOutcome> {
    let stage_seed = crate::rng::derive_seed(run_seed, STREAM_STAGE);
    let mut pool_source = BTreeMap::new();
    for &(id, _) in &plan.quota.per_dataset {
        pool_source.insert(id, pool_for(&plan.registry, id, &plan.required_label_tasks)?);
    }
    let (pools, val) = carve_validation(&pool_source, cfg.val_fraction, stage_seed);

    let setup = StageSetup {
        registry: &plan.registry,
        active_tasks: plan.active_tasks,
        quota: plan.quota,
        pools,
        eval_pairs: plan.eval_pairs,
        val,
        epochs: plan.epochs,
        lr,
        gradnorm: cfg.gradnorm,
        da: DaConfig {
            enabled: plan.da_enabled,
            ..cfg.da
        },
        momentum: cfg.momentum,
        reduction: cfg.reduction,
        stage_seed,
        stage_name: plan.name,
    };
    train_stage(model, &setup)
}

/// Runs the full variant pipeline on a suite and reports the final model's
/// metrics (including held-out cross-domain accuracy).
pub fn train(cfg: &TrainConfig, suite: &Suite) -> Result<TrainOutcome> {
    cfg.validate(&suite.registry)?;
    let started = Instant::now();
    let lr = cfg.effective_lr();
    let train_ids = training_dataset_ids(suite);
    if train_ids.is_empty() {
        return Err(Error::Config("no training datasets in suite".into()));
    }
    let all_tasks: Vec<usize> = (0..suite.registry.num_tasks()).collect();
    let mut stages: Vec<StageReport> = Vec::new();

    let first_variant = cfg.variant.teacher_variant().unwrap_or(cfg.variant);
    let first_plan = if first_variant.multi_task() {
        StagePlan {
            registry: suite.registry.clone(),
            active_tasks: all_tasks.clone(),
            quota: cfg.mtl_quota(suite)?,
            required_label_tasks: vec![],
            eval_pairs: original_eval_pairs(suite, &all_tasks, cfg.target_task)?,
            da_enabled: first_variant.uses_da() && cfg.da.enabled,
            epochs: cfg.epochs,
            name: if cfg.variant.uses_distill() { "teacher" } else { "final" }.into(),
        }
    } else {
        StagePlan {
            registry: suite.registry.clone(),
            active_tasks: vec![cfg.target_task],
            quota: cfg.baseline_quota(suite)?,
            required_label_tasks: vec![cfg.target_task],
            eval_pairs: original_eval_pairs(suite, &[cfg.target_task], cfg.target_task)?,
            da_enabled: false,
            epochs: cfg.epochs,
            name: if cfg.variant.uses_distill() { "teacher" } else { "final" }.into(),
        }
    };

    let mut model = Model::init(cfg.arch.model_config(
        &suite.registry,
        crate::rng::derive_seed(cfg.seed, STREAM_INIT),
    ))?;
    let first = run_stage(cfg, first_plan, lr, cfg.seed, &mut model)?;
    let mut final_model = first.best.clone();
    let mut diverged = first.diverged;
    stages.push(first.report);

    if cfg.variant.uses_distill() && !diverged {
        let teacher = first.best;
        // Fill missing labels on every training dataset. The baseline
        // teacher only knows the target task; MTL teachers fill everything.
        let fill_universe: Vec<usize> = if cfg.variant == Variant::DistillBaseline {
            vec![cfg.target_task]
        } else {
            all_tasks.clone()
        };
        let transforms = TransformSet::with_flip(suite.flip.clone());
        let mut distilled = Vec::new();
        for &id in &train_ids {
            let ds = suite.registry.dataset(id)?;
            let fill: Vec<usize> = fill_universe
                .iter()
                .copied()
                .filter(|&t| !ds.labels_task(t))
                .collect();
            if fill.is_empty() {
                continue;
            }
            distilled.push(teacher_label(
                &teacher,
                &suite.registry.tasks,
                ds,
                &fill,
                &transforms,
                cfg.distill.threshold,
            )?);
        }
        let originals: Vec<DatasetSpec> = train_ids
            .iter()
            .map(|&id| suite.registry.dataset(id).cloned())
            .collect::<Result<_>>()?;
        let union = build_union(&suite.registry.tasks, &originals, &distilled)?;

        let mode = if cfg.variant == Variant::DistillBaseline {
            RetrainMode::SingleTask
        } else {
            cfg.distill.mode
        };
        let student_plan = match mode {
            RetrainMode::Mtl => StagePlan {
                registry: union,
                active_tasks: all_tasks.clone(),
                quota: cfg.mtl_quota(suite)?,
                required_label_tasks: vec![],
                eval_pairs: original_eval_pairs(suite, &all_tasks, cfg.target_task)?,
                da_enabled: cfg.variant.uses_da() && cfg.da.enabled,
                epochs: cfg.distill.epochs.unwrap_or(cfg.epochs),
                name: "final".into(),
            },
            RetrainMode::SingleTask => StagePlan {
                registry: union,
                active_tasks: vec![cfg.target_task],
                quota: cfg.mtl_quota(suite)?,
                required_label_tasks: vec![cfg.target_task],
                eval_pairs: original_eval_pairs(suite, &[cfg.target_task], cfg.target_task)?,
                da_enabled: false,
                epochs: cfg.distill.epochs.unwrap_or(cfg.epochs),
                name: "final".into(),
            },
        };
        let student_seed = crate::rng::derive_seed(cfg.seed, STREAM_STUDENT);
        let mut student = Model::init(cfg.arch.model_config(
            &suite.registry,
            crate::rng::derive_seed(student_seed, STREAM_INIT),
        ))?;
        let second = run_stage(cfg, student_plan, lr, student_seed, &mut student)?;
        diverged |= second.diverged;
        final_model = second.best;
        stages.push(second.report);
    }

    // final test metrics per dataset per originally-labeled task,
    // held-out cross-domain set included
    let mut final_eval = Vec::new();
    for ds in &suite.registry.datasets {
        for &task in &ds.labeled_tasks {
            final_eval.push(EvalEntry {
                dataset_id: ds.dataset_id,
                domain_id: ds.domain_id,
                task,
                task_name: suite.registry.tasks[task].name.clone(),
                accuracy: evaluate(&final_model, ds, task)?,
                holdout: Some(ds.dataset_id) == suite.holdout_dataset,
            });
        }
    }

    let report = RunReport {
        variant: cfg.variant.slug().into(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?,
        task_names: suite.registry.tasks.iter().map(|t| t.name.clone()).collect(),
        stages,
        final_eval,
        diverged,
        timing: Timing {
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    };
    Ok(TrainOutcome {
        model: final_model,
        report,
    })
}

/// Retrains a fresh student on a prebuilt union registry; the entry point
/// behind `train`'s second stage, exposed for the distillation CLI path.
pub fn retrain_student(
    cfg: &TrainConfig,
    suite: &Suite,
    union: Registry,
    mode: RetrainMode,
) -> Result<TrainOutcome> {
    cfg.validate(&suite.registry)?;
    let started = Instant::now();
    let lr = cfg.effective_lr();
    let all_tasks: Vec<usize> = (0..suite.registry.num_tasks()).collect();
    let plan = match mode {
        RetrainMode::Mtl => StagePlan {
            registry: union,
            active_tasks: all_tasks.clone(),
            quota: cfg.mtl_quota(suite)?,
            required_label_tasks: vec![],
            eval_pairs: original_eval_pairs(suite, &all_tasks, cfg.target_task)?,
            da_enabled: cfg.da.enabled,
            epochs: cfg.distill.epochs.unwrap_or(cfg.epochs),
            name: "final".into(),
        },
        RetrainMode::SingleTask => StagePlan {
            registry: union,
            active_tasks: vec![cfg.target_task],
            quota: cfg.mtl_quota(suite)?,
            required_label_tasks: vec![cfg.target_task],
            eval_pairs: original_eval_pairs(suite, &[cfg.target_task], cfg.target_task)?,
            da_enabled: false,
            epochs: cfg.distill.epochs.unwrap_or(cfg.epochs),
            name: "final".into(),
        },
    };
    let student_seed = crate::rng::derive_seed(cfg.seed, STREAM_STUDENT);
    let mut student = Model::init(cfg.arch.model_config(
        &suite.registry,
        crate::rng::derive_seed(student_seed, STREAM_INIT),
    ))?;
    let outcome = run_stage(cfg, plan, lr, student_seed, &mut student)?;
    let mut final_eval = Vec::new();
    for ds in &suite.registry.datasets {
        for &task in &ds.labeled_tasks {
            final_eval.push(EvalEntry {
                dataset_id: ds.dataset_id,
                domain_id: ds.domain_id,
                task,
                task_name: suite.registry.tasks[task].name.clone(),
                accuracy: evaluate(&outcome.best, ds, task)?,
                holdout: Some(ds.dataset_id) == suite.holdout_dataset,
            });
        }
    }
    let report = RunReport {
        variant: cfg.variant.slug().into(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?,
        task_names: suite.registry.tasks.iter().map(|t| t.name.clone()).collect(),
        stages: vec![outcome.report],
        final_eval,
        diverged: outcome.diverged,
        timing: Timing {
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    };
    Ok(TrainOutcome {
        model: outcome.best,
        report,
    })
}
