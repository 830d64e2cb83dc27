//! Shared test support: the central finite-difference oracle and small
//! suite/model constructors. The oracle re-evaluates a scalar forward
//! function and never touches the reverse-mode path it checks.

#![allow(dead_code)]

use mdmt_core::data::{generate_suite, GenConfig, Suite, SuiteOracle};
use mdmt_core::model::{HeadConfig, Model, ModelConfig};
use mdmt_core::tensor::Tensor;

pub const FD_H: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a floor so near-zero gradient pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of `f` at `inputs`, one tensor per input.
pub fn finite_diff(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut grads = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut grad = Tensor::zeros(input.shape().to_vec());
        for k in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= h;
            grad.data_mut()[k] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grads.push(grad);
    }
    grads
}

/// Max relative error between analytic and finite-difference gradients.
pub fn max_grad_err(
    f: &dyn Fn(&[Tensor]) -> f64,
    inputs: &[Tensor],
    analytic: &[Option<Tensor>],
) -> f64 {
    let fd = finite_diff(f, inputs, FD_H);
    let mut worst: f64 = 0.0;
    for (i, fd_grad) in fd.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape().to_vec());
        let an = analytic[i].as_ref().unwrap_or(&zero);
        for k in 0..fd_grad.len() {
            worst = worst.max(rel_err(an.data()[k], fd_grad.data()[k]));
        }
    }
    worst
}

/// A small fast suite for functional tests (same structure as the default:
/// three single-task sources plus a held-out target-task domain).
pub fn small_suite(seed: u64, per_dataset: usize) -> (Suite, SuiteOracle) {
    let mut cfg = GenConfig::default_suite();
    for ds in &mut cfg.datasets {
        ds.size = per_dataset;
    }
    let (suite, oracle) = generate_suite(&cfg, seed).unwrap();
    (suite, oracle)
}

/// A compact model for gradient checks: full structure (trunk, three
/// heads, discriminator) at toy widths.
pub fn small_model_config(input_dim: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        input_dim,
        trunk: vec![10, 8],
        heads: vec![
            HeadConfig { hidden: vec![6], classes: 2 },
            HeadConfig { hidden: vec![], classes: 2 },
            HeadConfig { hidden: vec![6], classes: 7 },
        ],
        disc_hidden: vec![6],
        disc_embed: 4,
        seed,
    }
}

/// Copies a flat parameter vector into a model (for whole-network FD).
pub fn set_params_from_flat(model: &mut Model, flat: &[f64]) {
    let mut cursor = 0;
    for id in 0..model.param_count() {
        let p = model.param_mut(id);
        let n = p.len();
        p.data_mut().copy_from_slice(&flat[cursor..cursor + n]);
        cursor += n;
    }
    assert_eq!(cursor, flat.len());
}

pub fn flat_params(model: &Model) -> Vec<f64> {
    let mut flat = Vec::new();
    for id in 0..model.param_count() {
        flat.extend_from_slice(model.param(id).data());
    }
    flat
}
