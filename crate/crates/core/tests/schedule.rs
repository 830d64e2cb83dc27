//! Scripted-stream oracle for the dynamic learning-rate controller: an
//! independent scalar simulation of the window/event rules must reproduce
//! the controller's full lr sequence bit-for-bit, including the factor-0.1
//! drop at step 10^5 and the reset to the initial lr on the 5th event.

use mdmt_core::optim::{DynamicLr, DynamicLrConfig, LrEvent};

const LR_MUX: f64 = 1e-2;
const K: u32 = 5;
const WINDOW: usize = 50;
const TAU: f64 = 0.01;

/// Losses decay geometrically through step 99950 (comfortably above the
/// stall threshold), then halve once and stay flat. The first full-plateau
/// window completes at step 100000 exactly.
fn scripted_loss(step: u64) -> f64 {
    let plateau_start = 99_951;
    if step < plateau_start {
        1000.0 * 0.999_f64.powi(step as i32)
    } else {
        1000.0 * 0.999_f64.powi(99_950) / 2.0
    }
}

/// Independent scalar re-implementation: a plain Vec window, the same
/// halves comparison, the same event arithmetic.
struct ScalarSim {
    lr: f64,
    drops: u32,
    window: Vec<f64>,
    step: u64,
}

impl ScalarSim {
    fn new() -> Self {
        ScalarSim {
            lr: LR_MUX,
            drops: 0,
            window: Vec::new(),
            step: 0,
        }
    }

    fn update(&mut self, loss: f64) -> LrEvent {
        self.step += 1;
        self.window.push(loss);
        if self.window.len() > WINDOW {
            self.window.remove(0);
        }
        if self.window.len() < WINDOW {
            return LrEvent::None;
        }
        let half = WINDOW / 2;
        let mean_old: f64 = self.window[..half].iter().sum::<f64>() / half as f64;
        let mean_new: f64 = self.window[half..].iter().sum::<f64>() / half as f64;
        if (mean_old - mean_new) >= TAU * mean_old {
            return LrEvent::None;
        }
        self.window.clear();
        if self.drops < K - 1 {
            let factor = 0.1_f64.powf(self.step as f64 / 10_f64.powi(K as i32));
            self.lr *= factor;
            self.drops += 1;
            LrEvent::Drop
        } else {
            self.lr = LR_MUX;
            self.drops = 0;
            LrEvent::Reset
        }
    }
}

#[test]
fn scripted_stall_schedule_matches_scalar_oracle_bit_for_bit() {
    let cfg = DynamicLrConfig {
        lr_mux: LR_MUX,
        k: K,
        window: WINDOW,
        tau: TAU,
        ..DynamicLrConfig::default()
    };
    let mut controller = DynamicLr::new(cfg).unwrap();
    let mut oracle = ScalarSim::new();

    let mut events: Vec<(u64, LrEvent, f64)> = Vec::new();
    let total_steps = 100_200u64;
    for step in 1..=total_steps {
        let loss = scripted_loss(step);
        let got = controller.update(loss).unwrap();
        let expect = oracle.update(loss);
        assert_eq!(got, expect, "event mismatch at step {step}");
        assert_eq!(
            controller.lr().to_bits(),
            oracle.lr.to_bits(),
            "lr diverged from the scalar oracle at step {step}: {} vs {}",
            controller.lr(),
            oracle.lr
        );
        if got != LrEvent::None {
            events.push((step, got, controller.lr()));
        }
    }

    // five events: four drops then the cycle reset
    assert_eq!(events.len(), 5, "events: {events:?}");
    let steps: Vec<u64> = events.iter().map(|e| e.0).collect();
    assert_eq!(steps, vec![100_000, 100_050, 100_100, 100_150, 100_200]);

    // the drop at step 10^5 with k=5 applies factor 0.1^(10^5/10^5) = 0.1,
    // taking the lr from 1e-2 to 1e-3
    assert_eq!(events[0].1, LrEvent::Drop);
    let lr_after_first = events[0].2;
    assert!(
        (lr_after_first - 1e-3).abs() / 1e-3 < 1e-12,
        "expected 1e-3 after the step-10^5 drop, got {lr_after_first}"
    );

    // between events the lr is constant and every drop strictly decreases it
    let mut prev = LR_MUX;
    for (_, ev, lr) in &events[..4] {
        assert_eq!(*ev, LrEvent::Drop);
        assert!(*lr < prev);
        prev = *lr;
    }

    // the 5th event restores exactly lr_mux
    assert_eq!(events[4].1, LrEvent::Reset);
    assert_eq!(events[4].2.to_bits(), LR_MUX.to_bits());

    // cycle minimum equals the closed-form product of the applied factors
    let drop_steps: f64 = steps[..4].iter().map(|&s| s as f64).sum();
    let closed_form = LR_MUX * 0.1_f64.powf(drop_steps / 1e5);
    let cycle_min = events[3].2;
    assert!(
        (cycle_min - closed_form).abs() / closed_form < 1e-9,
        "cycle minimum {cycle_min} vs closed form {closed_form}"
    );
}

#[test]
fn improving_stream_never_fires_over_ten_thousand_steps() {
    let mut controller = DynamicLr::new(DynamicLrConfig::default()).unwrap();
    for step in 1..=10_000u64 {
        let ev = controller.update(scripted_loss(step)).unwrap();
        assert_eq!(ev, LrEvent::None);
        assert_eq!(controller.lr(), LR_MUX);
    }
}
