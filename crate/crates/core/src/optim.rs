//! Momentum SGD plus the two learning-rate regimes: classic exponential
//! decay and the feedback-driven dynamic schedule with cyclic reset.
//!
//! The dynamic controller watches the recent loss window. When the loss
//! stops improving it multiplies the lr by 0.1^(step/10^k); on every k-th
//! such event it instead restores the initial lr (lr_mux), so the minimum
//! lr of each cycle tracks the classic exponential-decay envelope.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup};
use crate::tensor::Tensor;

/// Gradients per ParamId as collected from one backward pass; `None` means
/// the parameter was unreachable (gradient zero) or filtered out.
pub type GradStore = Vec<Option<Tensor>>;

/// Classic heavy-ball momentum: v ← m·v + g; θ ← θ − lr·v.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl MomentumSgd {
    pub fn new(momentum: f64, param_count: usize) -> Self {
        MomentumSgd {
            momentum,
            velocity: vec![None; param_count],
        }
    }

    /// Applies one update to every parameter with a gradient that passes
    /// `trainable`. Parameters without gradients are left untouched,
    /// velocity included, so frozen groups keep their exact values.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &GradStore,
        lr: f64,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Result<()> {
        if grads.len() != model.param_count() {
            return Err(Error::shape(
                "optimizer step",
                &[model.param_count()],
                &[grads.len()],
            ));
        }
        for (id, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            if !trainable(model.param_group(id)) {
                continue;
            }
            let param = model.param_mut(id);
            if grad.shape() != param.shape() {
                return Err(Error::shape("gradient", param.shape(), grad.shape()));
            }
            let v = self.velocity[id].get_or_insert_with(|| vec![0.0; param.len()]);
            let data = param.data_mut();
            for i in 0..data.len() {
                v[i] = self.momentum * v[i] + grad.data()[i];
                data[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

/// lr0 · rate^(step / decay_steps) with a continuous exponent.
pub fn exponential_lr(step: u64, lr0: f64, decay_rate: f64, decay_steps: u64) -> f64 {
    lr0 * decay_rate.powf(step as f64 / decay_steps as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicLrConfig {
    /// Initial learning rate, restored at every cycle reset.
    pub lr_mux: f64,
    /// Events per cycle; the k-th event resets instead of dropping.
    pub k: u32,
    /// Loss window size for stall detection (two halves are compared).
    pub window: usize,
    /// Relative-improvement threshold: an event fires when
    /// (mean_old − mean_new) < tau · mean_old over a full window.
    pub tau: f64,
    /// Whether the drop exponent counts global steps or steps within the
    /// current cycle.
    #[serde(default)]
    pub step_basis: StepBasis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StepBasis {
    #[default]
    Global,
    CycleLocal,
}

impl Default for DynamicLrConfig {
    fn default() -> Self {
        DynamicLrConfig {
            lr_mux: 1e-2,
            k: 5,
            window: 50,
            tau: 0.01,
            step_basis: StepBasis::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrEvent {
    None,
    Drop,
    Reset,
}

impl std::fmt::Display for LrEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LrEvent::None => write!(f, "none"),
            LrEvent::Drop => write!(f, "drop"),
            LrEvent::Reset => write!(f, "reset"),
        }
    }
}

/// Feedback-driven learning-rate controller. A pure function of
/// (state, loss): identical call sequences produce identical lr traces.
#[derive(Debug, Clone)]
pub struct DynamicLr {
    cfg: DynamicLrConfig,
    lr: f64,
    drop_events: u32,
    window: VecDeque<f64>,
    step: u64,
    cycle_start: u64,
    diverged: bool,
}

impl DynamicLr {
    pub fn new(cfg: DynamicLrConfig) -> Result<Self> {
        if cfg.lr_mux <= 0.0 || cfg.k == 0 || cfg.window < 2 || cfg.window % 2 != 0 {
            return Err(Error::Config(
                "dynamic lr needs lr_mux > 0, k >= 1, even window >= 2".into(),
            ));
        }
        Ok(DynamicLr {
            cfg,
            lr: cfg.lr_mux,
            drop_events: 0,
            window: VecDeque::with_capacity(cfg.window + 1),
            step: 0,
            cycle_start: 0,
            diverged: false,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Feeds one step's total loss; returns which event (if any) fired.
    /// A non-finite loss freezes the schedule and surfaces a divergence
    /// error; every later call repeats it.
    pub fn update(&mut self, loss: f64) -> Result<LrEvent> {
        if self.diverged {
            return Err(Error::Divergence {
                step: self.step,
                loss,
            });
        }
        self.step += 1;
        if !loss.is_finite() {
            self.diverged = true;
            return Err(Error::Divergence {
                step: self.step,
                loss,
            });
        }
        self.window.push_back(loss);
        if self.window.len() > self.cfg.window {
            self.window.pop_front();
        }
        if self.window.len() < self.cfg.window {
            return Ok(LrEvent::None);
        }
        let half = self.cfg.window / 2;
        let mean_old: f64 = self.window.iter().take(half).sum::<f64>() / half as f64;
        let mean_new: f64 = self.window.iter().skip(half).sum::<f64>() / half as f64;
        if (mean_old - mean_new) >= self.cfg.tau * mean_old {
            return Ok(LrEvent::None);
        }
        // stalled: fire an event and clear the window
        self.window.clear();
        if self.drop_events < self.cfg.k - 1 {
            let basis = match self.cfg.step_basis {
                StepBasis::Global => self.step,
                StepBasis::CycleLocal => self.step - self.cycle_start,
            };
            let factor = 0.1_f64.powf(basis as f64 / 10_f64.powi(self.cfg.k as i32));
            self.lr *= factor;
            self.drop_events += 1;
            Ok(LrEvent::Drop)
        } else {
            self.lr = self.cfg.lr_mux;
            self.drop_events = 0;
            self.cycle_start = self.step;
            Ok(LrEvent::Reset)
        }
    }
}

/// Which lr regime a training stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Exponential {
        lr0: f64,
        decay_rate: f64,
        decay_steps: u64,
    },
    Dynamic(DynamicLrConfig),
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Exponential {
            lr0: 1e-2,
            decay_rate: 0.1,
            decay_steps: 20_000,
        }
    }
}

/// Uniform driver over both schedules: `lr()` before the optimizer step,
/// `observe(loss)` strictly after it.
#[derive(Debug, Clone)]
pub enum LrController {
    Exponential {
        lr0: f64,
        decay_rate: f64,
        decay_steps: u64,
        step: u64,
    },
    Dynamic(DynamicLr),
}

impl LrController {
    pub fn new(schedule: &LrSchedule) -> Result<Self> {
        Ok(match *schedule {
            LrSchedule::Exponential {
                lr0,
                decay_rate,
                decay_steps,
            } => {
                if lr0 <= 0.0 || decay_steps == 0 {
                    return Err(Error::Config(
                        "exponential lr needs lr0 > 0 and decay_steps >= 1".into(),
                    ));
                }
                LrController::Exponential {
                    lr0,
                    decay_rate,
                    decay_steps,
                    step: 0,
                }
            }
            LrSchedule::Dynamic(cfg) => LrController::Dynamic(DynamicLr::new(cfg)?),
        })
    }

    pub fn lr(&self) -> f64 {
        match self {
            LrController::Exponential {
                lr0,
                decay_rate,
                decay_steps,
                step,
            } => exponential_lr(*step, *lr0, *decay_rate, *decay_steps),
            LrController::Dynamic(d) => d.lr(),
        }
    }

    pub fn observe(&mut self, loss: f64) -> Result<LrEvent> {
        match self {
            LrController::Exponential { step, .. } => {
                if !loss.is_finite() {
                    return Err(Error::Divergence { step: *step, loss });
                }
                *step += 1;
                Ok(LrEvent::None)
            }
            LrController::Dynamic(d) => d.update(loss),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadConfig, ModelConfig};

    fn tiny_model() -> Model {
        Model::init(ModelConfig {
            input_dim: 2,
            trunk: vec![3],
            heads: vec![HeadConfig { hidden: vec![], classes: 2 }],
            disc_hidden: vec![],
            disc_embed: 2,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut model = tiny_model();
        let before: Vec<Vec<f64>> = (0..model.param_count())
            .map(|id| model.param(id).data().to_vec())
            .collect();
        let grads: GradStore = (0..model.param_count())
            .map(|id| Some(Tensor::zeros(model.param(id).shape().to_vec())))
            .collect();
        let mut opt = MomentumSgd::new(0.9, model.param_count());
        opt.step(&mut model, &grads, 0.1, |_| true).unwrap();
        for id in 0..model.param_count() {
            assert_eq!(model.param(id).data(), before[id].as_slice());
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_grad() {
        let mut model = tiny_model();
        let id = 0;
        let before = model.param(id).data().to_vec();
        let mut grads: GradStore = vec![None; model.param_count()];
        let g: Vec<f64> = (0..model.param(id).len()).map(|i| 0.1 * (i + 1) as f64).collect();
        grads[id] = Some(Tensor::new(model.param(id).shape().to_vec(), g.clone()).unwrap());
        let mut opt = MomentumSgd::new(0.9, model.param_count());
        opt.step(&mut model, &grads, 0.5, |_| true).unwrap();
        for i in 0..before.len() {
            assert_eq!(model.param(id).data()[i], before[i] - 0.5 * g[i]);
        }
    }

    #[test]
    fn three_steps_match_scalar_recurrence() {
        // 1-d quadratic f(x) = x², gradient 2x, against a hand recurrence
        let mut model = tiny_model();
        let id = model.param_count() - 1; // a bias vector
        let dim = model.param(id).len();
        for v in model.param_mut(id).data_mut() {
            *v = 2.0;
        }
        let mut opt = MomentumSgd::new(0.9, model.param_count());
        let lr = 0.1;

        let mut x = 2.0;
        let mut v = 0.0;
        for _ in 0..3 {
            let mut grads: GradStore = vec![None; model.param_count()];
            let gvec: Vec<f64> = model.param(id).data().iter().map(|&p| 2.0 * p).collect();
            grads[id] = Some(Tensor::new(model.param(id).shape().to_vec(), gvec).unwrap());
            opt.step(&mut model, &grads, lr, |_| true).unwrap();

            v = 0.9 * v + 2.0 * x;
            x -= lr * v;
            for i in 0..dim {
                assert!((model.param(id).data()[i] - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_groups_keep_exact_values() {
        let mut model = tiny_model();
        let frozen: Vec<Vec<f64>> = (0..model.param_count())
            .filter(|&id| model.param_group(id) == ParamGroup::Discriminator)
            .map(|id| model.param(id).data().to_vec())
            .collect();
        let grads: GradStore = (0..model.param_count())
            .map(|id| {
                Some(Tensor::new(
                    model.param(id).shape().to_vec(),
                    vec![1.0; model.param(id).len()],
                ).unwrap())
            })
            .collect();
        let mut opt = MomentumSgd::new(0.9, model.param_count());
        opt.step(&mut model, &grads, 0.1, |gr| gr != ParamGroup::Discriminator)
            .unwrap();
        let after: Vec<Vec<f64>> = (0..model.param_count())
            .filter(|&id| model.param_group(id) == ParamGroup::Discriminator)
            .map(|id| model.param(id).data().to_vec())
            .collect();
        assert_eq!(frozen, after);
    }

    #[test]
    fn exponential_lr_basics() {
        assert_eq!(exponential_lr(0, 0.01, 0.1, 100), 0.01);
        let at_decay = exponential_lr(100, 0.01, 0.1, 100);
        assert!((at_decay - 0.001).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for step in 0..500 {
            let lr = exponential_lr(step, 0.01, 0.1, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn improving_stream_never_changes_lr() {
        let mut d = DynamicLr::new(DynamicLrConfig::default()).unwrap();
        let mut loss = 100.0;
        for _ in 0..10_000 {
            let ev = d.update(loss).unwrap();
            assert_eq!(ev, LrEvent::None);
            assert_eq!(d.lr(), 0.01);
            loss *= 0.999;
        }
    }

    #[test]
    fn stall_fires_drop_then_reset_cycle() {
        let cfg = DynamicLrConfig {
            window: 10,
            ..DynamicLrConfig::default()
        };
        let mut d = DynamicLr::new(cfg).unwrap();
        let mut events = Vec::new();
        for _ in 0..1000 {
            match d.update(1.0).unwrap() {
                LrEvent::None => {}
                ev => events.push((d.step_count(), ev, d.lr())),
            }
            if events.len() == 5 {
                break;
            }
        }
        assert_eq!(events.len(), 5);
        for (_, ev, _) in &events[..4] {
            assert_eq!(*ev, LrEvent::Drop);
        }
        assert_eq!(events[4].1, LrEvent::Reset);
        assert_eq!(events[4].2, 0.01);
        // lr strictly decreases on every drop
        let mut prev = 0.01;
        for (_, _, lr) in &events[..4] {
            assert!(*lr < prev);
            prev = *lr;
        }
    }

    #[test]
    fn non_finite_loss_freezes_and_signals_divergence() {
        let mut d = DynamicLr::new(DynamicLrConfig::default()).unwrap();
        d.update(1.0).unwrap();
        assert!(matches!(
            d.update(f64::NAN),
            Err(Error::Divergence { .. })
        ));
        assert!(matches!(d.update(0.5), Err(Error::Divergence { .. })));
    }

    #[test]
    fn controller_is_pure_in_its_inputs() {
        let stream: Vec<f64> = (0..300)
            .map(|i| if i % 7 == 0 { 2.0 } else { 2.0 - (i as f64) * 1e-4 })
            .collect();
        let run = || {
            let mut d = DynamicLr::new(DynamicLrConfig {
                window: 20,
                ..DynamicLrConfig::default()
            })
            .unwrap();
            stream
                .iter()
                .map(|&l| {
                    let ev = d.update(l).unwrap();
                    (ev, d.lr().to_bits())
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
