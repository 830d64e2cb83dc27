//! End-to-end pipeline contracts: variant degeneracies, distillation
//! equivalences, evaluation oracles, and bit-for-bit reproducibility.

mod common;

use mdmt_core::data::{generate_suite, DatasetGen, DatasetSpec, DomainGen, GenConfig, SampleRecord, TaskGen};
use mdmt_core::model::{HeadConfig, Model, ModelConfig, ParamGroup};
use mdmt_core::trainer::{evaluate, student_seed, train, TrainConfig, Variant};

fn small_gen(per_dataset: usize) -> GenConfig {
    let mut gen = GenConfig::default_suite();
    for ds in &mut gen.datasets {
        ds.size = per_dataset;
    }
    gen
}

fn fast_cfg(variant: Variant, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::defaults_for(variant, seed);
    cfg.epochs = 3;
    cfg.arch.trunk = vec![16, 12];
    cfg.arch.head_hidden = vec![];
    cfg.arch.disc_hidden = vec![];
    cfg
}

fn total_trace(report: &mdmt_core::report::RunReport) -> Vec<u64> {
    report
        .final_stage()
        .steps
        .iter()
        .map(|s| s.total.to_bits())
        .collect()
}

#[test]
fn mtl_with_one_task_degenerates_to_baseline() {
    let gen = GenConfig {
        tasks: vec![TaskGen { name: "only".into(), classes: 3 }],
        domains: vec![
            DomainGen { shift: 0.3, offset: 0.3, scale: 1.0, blend_prior: 0.0, mixture: vec![] },
            DomainGen { shift: 0.3, offset: 0.3, scale: 1.0, blend_prior: 0.0, mixture: vec![] },
        ],
        datasets: vec![
            DatasetGen { dataset_id: 0, domain: 0, labeled_tasks: vec![0], size: 120, holdout: false },
            DatasetGen { dataset_id: 1, domain: 1, labeled_tasks: vec![0], size: 80, holdout: true },
        ],
        ..GenConfig::default_suite()
    };
    let (suite, _) = generate_suite(&gen, 5).unwrap();
    let mut cfg = fast_cfg(Variant::MdMtl, 9);
    cfg.task_quota = vec![16];
    cfg.target_task = 0;
    let mtl = train(&cfg, &suite).unwrap();
    let mut cfg_b = cfg.clone();
    cfg_b.variant = Variant::Baseline;
    cfg_b.da.enabled = false;
    let baseline = train(&cfg_b, &suite).unwrap();
    assert_eq!(total_trace(&mtl.report), total_trace(&baseline.report));
}

#[test]
fn one_epoch_trains_trunk_and_every_head_but_not_disc() {
    let (suite, _) = common::small_suite(4, 80);
    let mut cfg = fast_cfg(Variant::MdMtl, 3);
    cfg.task_quota = vec![2, 2, 2];
    cfg.epochs = 1;
    let init = mdmt_core::trainer::initial_model(&cfg, &suite.registry).unwrap();
    let out = train(&cfg, &suite).unwrap();
    // trained model differs from init in the trunk and every task head;
    // the discriminator head never received a gradient (DA off)
    let mut changed = std::collections::HashMap::new();
    for id in 0..init.param_count() {
        let diff = init.param(id).data() != out.model.param(id).data();
        *changed.entry(out.model.param_group(id)).or_insert(false) |= diff;
    }
    assert_eq!(changed[&ParamGroup::Trunk], true);
    for task in 0..3 {
        assert_eq!(changed[&ParamGroup::Head(task)], true, "head {task}");
    }
    assert_eq!(changed[&ParamGroup::Discriminator], false);
}

#[test]
fn baseline_fits_separable_single_task_data() {
    // noiseless identity generator: labels are a deterministic linear
    // argmax of the features, so the baseline should nearly interpolate
    let gen = GenConfig {
        latent_dim: 8,
        feature_dim: 8,
        tasks: vec![TaskGen { name: "bin".into(), classes: 2 }],
        domains: vec![
            DomainGen { shift: 0.0, offset: 0.0, scale: 1.0, blend_prior: 0.0, mixture: vec![] },
        ],
        datasets: vec![DatasetGen {
            dataset_id: 0,
            domain: 0,
            labeled_tasks: vec![0],
            size: 400,
            holdout: false,
        }],
        label_noise: 0.0,
        feature_noise: 0.0,
        identity_base: true,
        task_coupling: 0.0,
        ..GenConfig::default_suite()
    };
    let (suite, _) = generate_suite(&gen, 12).unwrap();
    let mut cfg = TrainConfig::defaults_for(Variant::Baseline, 4);
    cfg.task_quota = vec![32];
    cfg.target_task = 0;
    cfg.epochs = 50;
    cfg.gradnorm = None;
    let out = train(&cfg, &suite).unwrap();
    let last = out.report.final_stage().epochs.last().unwrap();
    let train_acc = last.tasks[0].train_accuracy;
    assert!(train_acc >= 0.99, "train accuracy {train_acc}");
}

#[test]
fn evaluate_is_chance_level_for_random_model_on_balanced_labels() {
    // balanced 7-class labels constructed by hand; predictions of an
    // untrained model are label-independent, so accuracy ~ 1/7
    let n = 700;
    let classes = 7;
    let samples: Vec<SampleRecord> = (0..n)
        .map(|i| SampleRecord {
            features: vec![
                (i as f64 * 0.37).sin(),
                (i as f64 * 0.11).cos(),
                (i as f64 * 0.053).sin(),
                (i as f64 * 0.29).cos(),
            ],
            labels: vec![Some((i % classes) as u32)],
            dataset_id: 0,
            domain_id: 0,
        })
        .collect();
    let ds = DatasetSpec {
        dataset_id: 0,
        domain_id: 0,
        labeled_tasks: vec![0],
        samples,
        train_idx: vec![],
        test_idx: (0..n).collect(),
    };
    let model = Model::init(ModelConfig {
        input_dim: 4,
        trunk: vec![8],
        heads: vec![HeadConfig { hidden: vec![], classes }],
        disc_hidden: vec![],
        disc_embed: 2,
        seed: 99,
    })
    .unwrap();
    let acc = evaluate(&model, &ds, 0).unwrap();
    let p = 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!(
        (acc - p).abs() <= 3.0 * sigma,
        "accuracy {acc} vs chance {p} (3 sigma = {})",
        3.0 * sigma
    );
    // evaluate is pure
    assert_eq!(acc, evaluate(&model, &ds, 0).unwrap());
}

/// A hand-built model implementing the generator's own linear readout via
/// relu(z) − relu(−z) must score exactly the oracle accuracy.
#[test]
fn evaluate_matches_generator_oracle_for_oracle_model() {
    let l = 6;
    let classes = 4;
    let gen = GenConfig {
        latent_dim: l,
        feature_dim: l,
        tasks: vec![TaskGen { name: "c4".into(), classes }],
        domains: vec![
            DomainGen { shift: 0.0, offset: 0.0, scale: 1.0, blend_prior: 0.0, mixture: vec![] },
        ],
        datasets: vec![DatasetGen {
            dataset_id: 0,
            domain: 0,
            labeled_tasks: vec![0],
            size: 500,
            holdout: false,
        }],
        label_noise: 0.3,
        feature_noise: 0.0,
        identity_base: true,
        task_coupling: 0.0,
        ..GenConfig::default_suite()
    };
    let (suite, oracle) = generate_suite(&gen, 21).unwrap();
    let ds = suite.registry.dataset(0).unwrap();

    // trunk [2L]: rows are [I; -I] so relu(x) - relu(-x) reconstructs x;
    // head combines with +W / -W
    let mut model = Model::init(ModelConfig {
        input_dim: l,
        trunk: vec![2 * l],
        heads: vec![HeadConfig { hidden: vec![], classes }],
        disc_hidden: vec![],
        disc_embed: 2,
        seed: 1,
    })
    .unwrap();
    let w = oracle.task_weights[0].clone(); // classes x l
    for id in 0..model.param_count() {
        let name = model.param_name(id).to_string();
        let p = model.param_mut(id);
        for v in p.data_mut() {
            *v = 0.0;
        }
        if name == "trunk.0.weight" {
            // shape l x 2l
            for i in 0..l {
                p.data_mut()[i * 2 * l + i] = 1.0;
                p.data_mut()[i * 2 * l + l + i] = -1.0;
            }
        } else if name == "head.0.0.weight" {
            // shape 2l x classes
            for c in 0..classes {
                for k in 0..l {
                    p.data_mut()[k * classes + c] = w[c * l + k];
                    p.data_mut()[(l + k) * classes + c] = -w[c * l + k];
                }
            }
        }
    }

    let accuracy = evaluate(&model, ds, 0).unwrap();
    let mut hits = 0;
    let mut total = 0;
    for &i in &ds.test_idx {
        let z = &oracle.latents[0][i];
        if ds.samples[i].labels[0] == Some(oracle.bayes_label(0, z) as u32) {
            hits += 1;
        }
        total += 1;
    }
    let oracle_acc = hits as f64 / total as f64;
    assert_eq!(accuracy, oracle_acc);
    assert!(oracle_acc > 0.8, "oracle accuracy suspiciously low: {oracle_acc}");
}

#[test]
fn distill_with_impossible_threshold_reduces_to_plain_training() {
    let (suite, _) = common::small_suite(6, 120);
    let mut cfg = fast_cfg(Variant::DistillMdMtl, 17);
    cfg.task_quota = vec![4, 4, 8];
    cfg.distill.threshold = 1.0 + 1e-9;
    let distilled = train(&cfg, &suite).unwrap();

    let mut plain = fast_cfg(Variant::MdMtl, 0);
    plain.task_quota = vec![4, 4, 8];
    plain.seed = student_seed(17);
    let plain_out = train(&plain, &suite).unwrap();

    assert_eq!(distilled.report.stages.len(), 2);
    assert_eq!(
        total_trace(&distilled.report),
        total_trace(&plain_out.report),
        "student stage must equal a plain run with the derived seed"
    );
}

#[test]
fn lambda_zero_da_variant_reproduces_mtl_trace() {
    let (suite, _) = common::small_suite(8, 120);
    let mut cfg = fast_cfg(Variant::DaMdMtl, 23);
    cfg.task_quota = vec![4, 4, 8];
    cfg.da.enabled = true;
    cfg.da.lambda = 0.0;
    let da = train(&cfg, &suite).unwrap();

    let mut cfg_mtl = fast_cfg(Variant::MdMtl, 23);
    cfg_mtl.task_quota = vec![4, 4, 8];
    let mtl = train(&cfg_mtl, &suite).unwrap();

    assert_eq!(total_trace(&da.report), total_trace(&mtl.report));
    // per-task loss traces must agree too
    let a = &da.report.final_stage().steps;
    let b = &mtl.report.final_stage().steps;
    for (x, y) in a.iter().zip(b) {
        for (la, lb) in x.task_losses.iter().zip(&y.task_losses) {
            assert_eq!(
                la.map(f64::to_bits),
                lb.map(f64::to_bits),
                "task loss diverged at step {}",
                x.step
            );
        }
    }
}

#[test]
fn rerun_reproduces_report_and_trace_bit_for_bit() {
    let (suite, _) = common::small_suite(10, 100);
    let mut cfg = fast_cfg(Variant::DistillDaMdMtl, 31);
    cfg.task_quota = vec![3, 3, 6];
    cfg.da.enabled = true;
    let a = train(&cfg, &suite).unwrap();
    let b = train(&cfg, &suite).unwrap();
    assert_eq!(
        a.report.deterministic_json().unwrap(),
        b.report.deterministic_json().unwrap()
    );
    assert_eq!(a.report.trace_csv(), b.report.trace_csv());
    for id in 0..a.model.param_count() {
        assert_eq!(a.model.param(id).data(), b.model.param(id).data());
    }
}
