//! Masked multi-task loss reduction and GradNorm task weighting.
//!
//! Per-sample per-task losses form a b×t matrix; the binary mask selects
//! the valid cells and everything else contributes nothing, to values or
//! gradients. By default each task reduces by the MEAN over its valid
//! cells so unequal batch quotas do not silently reweight tasks; the raw
//! masked SUM is available as a config switch.

use serde::{Deserialize, Serialize};

use crate::data::MaskMatrix;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Reduces one task's per-sample loss vector over its mask column.
///
/// Masked-out samples are multiplied by an exact 0.0, so they cannot leak
/// into the value or the gradient. A column with no valid samples is a
/// composition error: the caller promised a nonzero quota for every task
/// it computes a loss for.
pub fn masked_task_loss(
    g: &mut Graph,
    per_sample: Var,
    mask_col: &[f64],
    reduction: Reduction,
) -> Result<Var> {
    let n = g.value(per_sample).len();
    if n != mask_col.len() {
        return Err(Error::shape("masked loss", &[n], &[mask_col.len()]));
    }
    let valid: f64 = mask_col.iter().sum();
    if valid == 0.0 {
        return Err(Error::Composition(
            "mask column has no valid samples for a task with nonzero quota".into(),
        ));
    }
    let picked = g.mul_const(per_sample, mask_col)?;
    let total = g.sum(picked);
    Ok(match reduction {
        Reduction::Mean => g.scale(total, 1.0 / valid),
        Reduction::Sum => total,
    })
}

/// Reduces every task column of a loss matrix. `loss_cols[j]` is the
/// unreduced per-sample loss vector of task j over the same batch.
pub fn masked_task_losses(
    g: &mut Graph,
    loss_cols: &[Var],
    mask: &MaskMatrix,
    reduction: Reduction,
) -> Result<Vec<Var>> {
    if loss_cols.len() != mask.tasks() {
        return Err(Error::shape(
            "loss columns vs mask",
            &[mask.tasks()],
            &[loss_cols.len()],
        ));
    }
    loss_cols
        .iter()
        .enumerate()
        .map(|(j, &col)| masked_task_loss(g, col, &mask.column(j), reduction))
        .collect()
}

/// Σ ω_i · L_i with the weights treated as constants; GradNorm updates
/// them between steps.
pub fn weighted_total(g: &mut Graph, task_losses: &[Var], omega: &[f64]) -> Result<Var> {
    if task_losses.is_empty() || task_losses.len() != omega.len() {
        return Err(Error::shape(
            "weighted total",
            &[task_losses.len()],
            &[omega.len()],
        ));
    }
    let mut acc = g.scale(task_losses[0], omega[0]);
    for (l, &w) in task_losses.iter().zip(omega).skip(1) {
        let term = g.scale(*l, w);
        acc = g.add(acc, term)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradNormConfig {
    /// Asymmetry exponent on the inverse training rates.
    pub alpha: f64,
    /// Step size of the weight update.
    pub lr: f64,
}

impl Default for GradNormConfig {
    fn default() -> Self {
        GradNormConfig { alpha: 1.5, lr: 0.025 }
    }
}

/// GradNorm state: per-task weights ω, the initial losses recorded at the
/// first update, and the update hyperparameters. Invariant: ω_i > 0 and
/// Σω_i = t after every update.
#[derive(Debug, Clone)]
pub struct TaskWeights {
    omega: Vec<f64>,
    initial_losses: Option<Vec<f64>>,
    cfg: GradNormConfig,
}

const OMEGA_FLOOR: f64 = 1e-3;
const INITIAL_LOSS_FLOOR: f64 = 1e-8;

impl TaskWeights {
    pub fn uniform(tasks: usize, cfg: GradNormConfig) -> Self {
        TaskWeights {
            omega: vec![1.0; tasks],
            initial_losses: None,
            cfg,
        }
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// One GradNorm step.
    ///
    /// `grad_norms[i]` is G_i = ‖∇_W (ω_i·L_i)‖ measured at the last shared
    /// trunk weight, i.e. the weighted per-task gradient norm, so
    /// dG_i/dω_i = G_i/ω_i. The update descends Σ_i |G_i − T_i| with the
    /// targets T_i = Ḡ·r_i^α treated as constants, then clamps each ω_i to
    /// at least 1e-3 and renormalizes so Σω_i = t.
    pub fn update(&mut self, task_losses: &[f64], grad_norms: &[f64]) -> Result<()> {
        let t = self.omega.len();
        if task_losses.len() != t || grad_norms.len() != t {
            return Err(Error::shape(
                "gradnorm update",
                &[t],
                &[task_losses.len().max(grad_norms.len())],
            ));
        }
        if grad_norms.iter().any(|&gn| gn < 0.0) {
            return Err(Error::Config("gradient norms must be nonnegative".into()));
        }
        let initial = self.initial_losses.get_or_insert_with(|| {
            task_losses
                .iter()
                .map(|&l| {
                    if l == 0.0 {
                        log::warn!("zero initial task loss; falling back to {INITIAL_LOSS_FLOOR}");
                        INITIAL_LOSS_FLOOR
                    } else {
                        l
                    }
                })
                .collect()
        });

        let ratios: Vec<f64> = task_losses
            .iter()
            .zip(initial.iter())
            .map(|(&l, &l0)| l / l0)
            .collect();
        let mean_ratio = ratios.iter().sum::<f64>() / t as f64;
        let mean_norm = grad_norms.iter().sum::<f64>() / t as f64;

        for i in 0..t {
            let r = ratios[i] / mean_ratio;
            let target = mean_norm * r.powf(self.cfg.alpha);
            let diff = grad_norms[i] - target;
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            let grad = sign * (grad_norms[i] / self.omega[i]);
            self.omega[i] = (self.omega[i] - self.cfg.lr * grad).max(OMEGA_FLOOR);
        }
        let sum: f64 = self.omega.iter().sum();
        let scale = t as f64 / sum;
        for w in &mut self.omega {
            *w *= scale;
        }
        Ok(())
    }
}
