//! Data distillation: a trained teacher fills missing task labels with
//! hard pseudo-labels (argmax of softmax probabilities averaged over a
//! small set of input transforms), and a fresh student retrains on the
//! union of original and filled datasets.
//!
//! Ground-truth labels are never overwritten; slots whose averaged
//! confidence falls below the threshold stay missing and remain masked
//! out during retraining exactly as before distillation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, Registry, TaskSpec};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// An input transform whose effect a classifier prediction should be
/// invariant to. The feature flip is a fixed involutive
/// permutation-with-sign map standing in for a horizontal image flip on
/// feature vectors; it is chosen at suite-generation time and stored with
/// the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureTransform {
    Identity,
    SignedPermutation { perm: Vec<usize>, signs: Vec<i8> },
}

impl FeatureTransform {
    /// Random involutive signed permutation: indices are paired into
    /// 2-cycles (plus fixed points), paired entries share a sign so that
    /// applying the transform twice is the identity.
    pub fn random_involution(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..dim).collect();
        for i in (1..dim).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut perm: Vec<usize> = (0..dim).collect();
        let mut signs: Vec<i8> = vec![1; dim];
        let mut it = order.chunks_exact(2);
        for pair in &mut it {
            let (a, b) = (pair[0], pair[1]);
            perm[a] = b;
            perm[b] = a;
            let s: i8 = if rng.gen_bool(0.5) { 1 } else { -1 };
            signs[a] = s;
            signs[b] = s;
        }
        for &rest in it.remainder() {
            signs[rest] = if rng.gen_bool(0.5) { 1 } else { -1 };
        }
        FeatureTransform::SignedPermutation { perm, signs }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FeatureTransform::Identity => x.to_vec(),
            FeatureTransform::SignedPermutation { perm, signs } => (0..x.len())
                .map(|i| f64::from(signs[i]) * x[perm[i]])
                .collect(),
        }
    }

    pub fn is_involution(&self, dim: usize) -> bool {
        match self {
            FeatureTransform::Identity => true,
            FeatureTransform::SignedPermutation { perm, signs } => {
                perm.len() == dim
                    && signs.len() == dim
                    && (0..dim).all(|i| {
                        perm[i] < dim
                            && perm[perm[i]] == i
                            && i32::from(signs[i]) * i32::from(signs[perm[i]]) == 1
                    })
            }
        }
    }
}

/// The transforms a teacher ensembles over. Always contains the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSet {
    transforms: Vec<FeatureTransform>,
}

impl TransformSet {
    pub fn new(transforms: Vec<FeatureTransform>) -> Result<Self> {
        if !transforms.contains(&FeatureTransform::Identity) {
            return Err(Error::Config(
                "transform set must contain the identity".into(),
            ));
        }
        Ok(TransformSet { transforms })
    }

    pub fn identity_only() -> Self {
        TransformSet {
            transforms: vec![FeatureTransform::Identity],
        }
    }

    /// Identity plus the suite's feature flip.
    pub fn with_flip(flip: FeatureTransform) -> Self {
        TransformSet {
            transforms: vec![FeatureTransform::Identity, flip],
        }
    }

    pub fn transforms(&self) -> &[FeatureTransform] {
        &self.transforms
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }
}

/// Where a label slot's value came from after distillation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SlotProvenance {
    Ground,
    /// Filled by the teacher; carries the max averaged softmax probability.
    Distilled(f64),
    Missing,
}

/// A dataset with teacher-filled label slots. Original labels are
/// preserved verbatim; provenance records the origin of every slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DistilledDataset {
    pub dataset: DatasetSpec,
    /// provenance[sample][task]
    pub provenance: Vec<Vec<SlotProvenance>>,
}

impl DistilledDataset {
    /// Tasks that now appear in at least one sample (nominal label set).
    pub fn labeled_tasks(&self) -> Vec<usize> {
        self.dataset.labeled_tasks.clone()
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// Fills the `tasks_to_fill` label slots of `dataset` with the teacher's
/// transform-averaged hard labels.
///
/// For each sample and task, softmax probabilities are computed under
/// every transform and averaged; the argmax becomes the label and the max
/// averaged probability its confidence. Slots whose confidence falls below
/// `threshold` stay missing.
pub fn teacher_label(
    teacher: &Model,
    tasks: &[TaskSpec],
    dataset: &DatasetSpec,
    tasks_to_fill: &[usize],
    transforms: &TransformSet,
    threshold: f64,
) -> Result<DistilledDataset> {
    for &j in tasks_to_fill {
        if j >= tasks.len() {
            return Err(Error::UnknownTask(j));
        }
        if dataset.labels_task(j) {
            return Err(Error::Config(format!(
                "refusing to overwrite ground-truth labels of task {j} in dataset {}",
                dataset.dataset_id
            )));
        }
    }
    let n = dataset.len();
    let feature_rows: Vec<Vec<f64>> = dataset.samples.iter().map(|s| s.features.clone()).collect();

    // averaged probabilities per fill task: [n][classes]
    let mut averaged: Vec<Vec<Vec<f64>>> = tasks_to_fill
        .iter()
        .map(|&j| vec![vec![0.0; tasks[j].classes]; n])
        .collect();
    let weight = 1.0 / transforms.len() as f64;
    for transform in transforms.transforms() {
        let transformed: Vec<Vec<f64>> =
            feature_rows.iter().map(|r| transform.apply(r)).collect();
        let batch = Tensor::from_rows(&transformed)?;
        for (slot, &j) in tasks_to_fill.iter().enumerate() {
            let logits = teacher.logits(j, &batch)?;
            for (i, avg_row) in averaged[slot].iter_mut().enumerate() {
                let probs = softmax(logits.row(i));
                for (a, p) in avg_row.iter_mut().zip(&probs) {
                    *a += weight * p;
                }
            }
        }
    }

    let mut out = dataset.clone();
    let mut provenance: Vec<Vec<SlotProvenance>> = dataset
        .samples
        .iter()
        .map(|s| {
            s.labels
                .iter()
                .map(|slot| {
                    if slot.is_some() {
                        SlotProvenance::Ground
                    } else {
                        SlotProvenance::Missing
                    }
                })
                .collect()
        })
        .collect();

    for (slot, &j) in tasks_to_fill.iter().enumerate() {
        let mut filled = 0usize;
        for i in 0..n {
            let probs = &averaged[slot][i];
            let mut best = 0;
            for c in 1..probs.len() {
                if probs[c] > probs[best] {
                    best = c;
                }
            }
            let confidence = probs[best];
            if confidence >= threshold {
                out.samples[i].labels[j] = Some(best as u32);
                provenance[i][j] = SlotProvenance::Distilled(confidence);
                filled += 1;
            }
        }
        // below-threshold slots stay missing; a task joins the nominal
        // label set only if something actually filled
        if filled > 0 && !out.labeled_tasks.contains(&j) {
            out.labeled_tasks.push(j);
        }
    }
    out.labeled_tasks.sort_unstable();

    Ok(DistilledDataset {
        dataset: out,
        provenance,
    })
}

/// Merges originals and their distilled versions into one registry.
/// Datasets with a distilled version are replaced by it; everything else
/// passes through untouched. Sample counts are conserved.
pub fn build_union(
    tasks: &[TaskSpec],
    originals: &[DatasetSpec],
    distilled: &[DistilledDataset],
) -> Result<Registry> {
    let mut seen = std::collections::HashSet::new();
    for ds in originals {
        if !seen.insert(ds.dataset_id) {
            return Err(Error::Config(format!(
                "dataset id {} appears twice among originals",
                ds.dataset_id
            )));
        }
    }
    let mut replacement: std::collections::HashMap<usize, &DistilledDataset> =
        std::collections::HashMap::new();
    for d in distilled {
        if !seen.contains(&d.dataset.dataset_id) {
            return Err(Error::UnknownDataset(d.dataset.dataset_id));
        }
        if replacement.insert(d.dataset.dataset_id, d).is_some() {
            return Err(Error::Config(format!(
                "dataset id {} distilled twice",
                d.dataset.dataset_id
            )));
        }
        if d.dataset.len() != originals
            .iter()
            .find(|o| o.dataset_id == d.dataset.dataset_id)
            .expect("checked membership")
            .len()
        {
            return Err(Error::Config(format!(
                "distilled dataset {} changed its sample count",
                d.dataset.dataset_id
            )));
        }
    }
    let datasets: Vec<DatasetSpec> = originals
        .iter()
        .map(|ds| match replacement.get(&ds.dataset_id) {
            Some(d) => d.dataset.clone(),
            None => ds.clone(),
        })
        .collect();
    let registry = Registry {
        tasks: tasks.to_vec(),
        datasets,
    };
    registry.validate(false)?;
    Ok(registry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_suite, GenConfig};
    use crate::model::{HeadConfig, Model, ModelConfig};

    fn suite() -> (crate::data::Suite, Model) {
        let mut cfg = GenConfig::default_suite();
        for ds in &mut cfg.datasets {
            ds.size = 60;
        }
        let (suite, _) = generate_suite(&cfg, 1).unwrap();
        let model = Model::init(ModelConfig {
            input_dim: 16,
            trunk: vec![12],
            heads: vec![
                HeadConfig { hidden: vec![], classes: 2 },
                HeadConfig { hidden: vec![], classes: 2 },
                HeadConfig { hidden: vec![], classes: 7 },
            ],
            disc_hidden: vec![],
            disc_embed: 4,
            seed: 2,
        })
        .unwrap();
        (suite, model)
    }

    #[test]
    fn involution_applies_twice_to_identity() {
        for dim in [1, 2, 5, 16] {
            let t = FeatureTransform::random_involution(dim, 99);
            assert!(t.is_involution(dim), "dim {dim}");
            let x: Vec<f64> = (0..dim).map(|i| i as f64 * 0.3 - 1.0).collect();
            assert_eq!(t.apply(&t.apply(&x)), x);
        }
    }

    #[test]
    fn transform_set_requires_identity() {
        assert!(TransformSet::new(vec![FeatureTransform::random_involution(4, 1)]).is_err());
        assert!(TransformSet::new(vec![FeatureTransform::Identity]).is_ok());
    }

    #[test]
    fn constant_teacher_fills_constant_label() {
        let (suite, mut model) = suite();
        // make head 2's logits constant with class 2 dominant: zero the
        // weights, set the bias
        for id in 0..model.param_count() {
            if model.param_group(id) == crate::model::ParamGroup::Head(2) {
                let name = model.param_name(id).to_string();
                let p = model.param_mut(id);
                for v in p.data_mut() {
                    *v = 0.0;
                }
                if name.ends_with("bias") {
                    p.data_mut()[2] = 3.0;
                }
            }
        }
        let ds = suite.registry.dataset(0).unwrap();
        let out = teacher_label(
            &model,
            &suite.registry.tasks,
            ds,
            &[2],
            &TransformSet::identity_only(),
            0.0,
        )
        .unwrap();
        let expected_conf = {
            let probs = softmax(&[0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
            probs[2]
        };
        for (i, sample) in out.dataset.samples.iter().enumerate() {
            assert_eq!(sample.labels[2], Some(2));
            match out.provenance[i][2] {
                SlotProvenance::Distilled(c) => {
                    assert!((c - expected_conf).abs() < 1e-12);
                    assert!(c > 1.0 / 7.0 && c <= 1.0);
                }
                other => panic!("expected distilled slot, got {other:?}"),
            }
            assert_eq!(out.provenance[i][0], SlotProvenance::Ground);
        }
    }

    #[test]
    fn duplicated_transform_does_not_change_output() {
        let (suite, model) = suite();
        let ds = suite.registry.dataset(1).unwrap();
        let once = teacher_label(
            &model,
            &suite.registry.tasks,
            ds,
            &[0, 2],
            &TransformSet::identity_only(),
            0.0,
        )
        .unwrap();
        let twice = teacher_label(
            &model,
            &suite.registry.tasks,
            ds,
            &[0, 2],
            &TransformSet::new(vec![FeatureTransform::Identity, FeatureTransform::Identity])
                .unwrap(),
            0.0,
        )
        .unwrap();
        assert_eq!(once.dataset.samples, twice.dataset.samples);
        for (a, b) in once.provenance.iter().flatten().zip(twice.provenance.iter().flatten()) {
            match (a, b) {
                (SlotProvenance::Distilled(x), SlotProvenance::Distilled(y)) => {
                    assert!((x - y).abs() < 1e-12)
                }
                _ => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn averaging_two_transforms_hand_oracle() {
        // two transforms with per-class probs (0.6, 0.4) and (0.2, 0.8)
        // average to (0.4, 0.6): label 1, confidence 0.6
        let avg: [f64; 2] = [(0.6 + 0.2) / 2.0, (0.4 + 0.8) / 2.0];
        assert!((avg[1] - 0.6).abs() < 1e-15);
        assert!(avg[1] > avg[0]);
    }

    #[test]
    fn refuses_to_overwrite_ground_truth() {
        let (suite, model) = suite();
        let ds = suite.registry.dataset(0).unwrap(); // labels task 0
        let err = teacher_label(
            &model,
            &suite.registry.tasks,
            ds,
            &[0],
            &TransformSet::identity_only(),
            0.0,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn threshold_above_one_leaves_everything_missing() {
        let (suite, model) = suite();
        let ds = suite.registry.dataset(0).unwrap();
        let out = teacher_label(
            &model,
            &suite.registry.tasks,
            ds,
            &[1, 2],
            &TransformSet::identity_only(),
            1.0 + 1e-9,
        )
        .unwrap();
        for (i, sample) in out.dataset.samples.iter().enumerate() {
            assert_eq!(sample.labels[1], None);
            assert_eq!(sample.labels[2], None);
            assert_eq!(sample.labels[0], ds.samples[i].labels[0]);
        }
    }

    #[test]
    fn union_preserves_counts_and_grows_mask_density() {
        let (suite, model) = suite();
        let originals = &suite.registry.datasets;
        let total_before: usize = originals.iter().map(|d| d.len()).sum();
        let present_before: usize = originals
            .iter()
            .flat_map(|d| &d.samples)
            .flat_map(|s| &s.labels)
            .filter(|l| l.is_some())
            .count();

        let mut distilled = Vec::new();
        for ds in originals {
            let fill: Vec<usize> = (0..3).filter(|j| !ds.labels_task(*j)).collect();
            distilled.push(
                teacher_label(
                    &model,
                    &suite.registry.tasks,
                    ds,
                    &fill,
                    &TransformSet::identity_only(),
                    0.0,
                )
                .unwrap(),
            );
        }
        let union = build_union(&suite.registry.tasks, originals, &distilled).unwrap();
        let total_after: usize = union.datasets.iter().map(|d| d.len()).sum();
        assert_eq!(total_before, total_after);
        let present_after: usize = union
            .datasets
            .iter()
            .flat_map(|d| &d.samples)
            .flat_map(|s| &s.labels)
            .filter(|l| l.is_some())
            .count();
        assert!(present_after > present_before);
        // with threshold 0 every slot fills
        assert_eq!(present_after, total_after * 3);

        // ground truth bit-identical
        for (orig, merged) in originals.iter().zip(&union.datasets) {
            for (a, b) in orig.samples.iter().zip(&merged.samples) {
                for j in 0..3 {
                    if a.labels[j].is_some() {
                        assert_eq!(a.labels[j], b.labels[j]);
                    }
                }
                assert_eq!(a.features, b.features);
            }
        }
    }

    #[test]
    fn empty_distilled_list_is_identity() {
        let (suite, _) = suite();
        let union = build_union(&suite.registry.tasks, &suite.registry.datasets, &[]).unwrap();
        assert_eq!(union.datasets, suite.registry.datasets);
    }

    #[test]
    fn union_rejects_duplicate_ids() {
        let (suite, _) = suite();
        let mut dup = suite.registry.datasets.clone();
        dup.push(dup[0].clone());
        assert!(build_union(&suite.registry.tasks, &dup, &[]).is_err());
    }
}
