//! Mixed-task batch composition.
//!
//! A batch draws a fixed quota of samples from each source dataset and
//! stacks them with a b×t validity mask: m[i][j] = 1 iff sample i carries a
//! label for task j. Sampling is without replacement per dataset
//! permutation; the epoch boundary is the exhaustion of the largest source
//! pool, while smaller pools reshuffle and recycle within the epoch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Registry;

/// Per-source-dataset sample counts for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchQuota {
    /// (dataset id, samples per batch), in draw order.
    pub per_dataset: Vec<(usize, usize)>,
}

impl BatchQuota {
    pub fn new(per_dataset: Vec<(usize, usize)>) -> Result<Self> {
        if per_dataset.is_empty() || per_dataset.iter().any(|&(_, n)| n == 0) {
            return Err(Error::Composition(
                "every quota entry needs a count >= 1".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for &(id, _) in &per_dataset {
            if !seen.insert(id) {
                return Err(Error::Composition(format!(
                    "dataset {id} appears twice in the quota"
                )));
            }
        }
        Ok(BatchQuota { per_dataset })
    }

    /// Maps per-task counts onto each task's unique source dataset among
    /// `candidates`. counts[j] is the number of task-j samples per batch.
    pub fn by_task(registry: &Registry, candidates: &[usize], counts: &[usize]) -> Result<Self> {
        if counts.len() != registry.num_tasks() {
            return Err(Error::shape(
                "per-task quota",
                &[registry.num_tasks()],
                &[counts.len()],
            ));
        }
        let mut per_dataset = Vec::new();
        for (task, &n) in counts.iter().enumerate() {
            if n == 0 {
                return Err(Error::Composition(format!(
                    "task {task} quota must be >= 1"
                )));
            }
            per_dataset.push((registry.unique_source_for(task, candidates)?, n));
        }
        BatchQuota::new(per_dataset)
    }

    pub fn batch_size(&self) -> usize {
        self.per_dataset.iter().map(|&(_, n)| n).sum()
    }
}

/// b×t binary validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    rows: usize,
    tasks: usize,
    data: Vec<f64>,
}

impl MaskMatrix {
    pub fn new(rows: usize, tasks: usize) -> Self {
        MaskMatrix {
            rows,
            tasks,
            data: vec![0.0; rows * tasks],
        }
    }

    pub fn set(&mut self, row: usize, task: usize) {
        self.data[row * self.tasks + task] = 1.0;
    }

    pub fn get(&self, row: usize, task: usize) -> f64 {
        self.data[row * self.tasks + task]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    /// Column as a weight vector for masked loss reduction.
    pub fn column(&self, task: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, task)).collect()
    }

    pub fn column_sum(&self, task: usize) -> usize {
        self.column(task).iter().map(|&v| v as usize).sum()
    }
}

/// One composed mixed-task batch.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub features: Tensor,
    /// b×t label matrix; `None` marks a missing slot (never an in-band
    /// class index).
    pub labels: Vec<Vec<Option<u32>>>,
    pub mask: MaskMatrix,
    pub dataset_ids: Vec<usize>,
    /// (dataset id, sample index) per row, for coverage audits.
    pub provenance: Vec<(usize, usize)>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.dataset_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset_ids.is_empty()
    }

    /// Class targets for one task with missing slots mapped to 0. Masked
    /// rows never contribute to the loss, so the placeholder is never read
    /// through; it only keeps the full-batch loss computation well formed.
    pub fn targets(&self, task: usize) -> Vec<usize> {
        self.labels
            .iter()
            .map(|row| row[task].map(|c| c as usize).unwrap_or(0))
            .collect()
    }
}

struct DrawState {
    pool: Vec<usize>,
    perm: Vec<usize>,
    cursor: usize,
}

impl DrawState {
    fn remaining(&self) -> usize {
        self.perm.len() - self.cursor
    }

    fn reshuffle(&mut self, rng: &mut ChaCha8Rng) {
        self.perm = self.pool.clone();
        for i in (1..self.perm.len()).rev() {
            let j = rng.gen_range(0..=i);
            self.perm.swap(i, j);
        }
        self.cursor = 0;
    }
}

/// Draws batches for one training run. Sampling is without replacement per
/// permutation cycle, with an independent permutation per dataset.
pub struct EpochComposer<'r> {
    registry: &'r Registry,
    quota: BatchQuota,
    states: BTreeMap<usize, DrawState>,
    rng: ChaCha8Rng,
    /// Dataset whose pool exhaustion defines the epoch boundary.
    pacer: usize,
}

impl<'r> EpochComposer<'r> {
    /// `pools` lists the drawable sample indices per quota dataset (the
    /// train split, minus any validation carve-out).
    pub fn new(
        registry: &'r Registry,
        quota: BatchQuota,
        pools: &BTreeMap<usize, Vec<usize>>,
        seed: u64,
    ) -> Result<Self> {
        let mut states = BTreeMap::new();
        for &(id, count) in &quota.per_dataset {
            let pool = pools
                .get(&id)
                .ok_or_else(|| Error::Composition(format!("no sample pool for dataset {id}")))?;
            if pool.len() < count {
                return Err(Error::Composition(format!(
                    "dataset {id} pool ({} samples) smaller than its quota {count}",
                    pool.len()
                )));
            }
            registry.dataset(id)?;
            states.insert(
                id,
                DrawState {
                    pool: pool.clone(),
                    perm: Vec::new(),
                    cursor: 0,
                },
            );
        }
        // Largest pool paces the epoch; among equal pools, the one
        // consumed fastest (biggest per-batch count) so one epoch means
        // one pass over it without recycling.
        let pacer = quota
            .per_dataset
            .iter()
            .map(|&(id, count)| (id, count))
            .max_by_key(|&(id, count)| (states[&id].pool.len(), count, usize::MAX - id))
            .map(|(id, _)| id)
            .expect("quota nonempty");
        let mut composer = EpochComposer {
            registry,
            quota,
            states,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pacer,
        };
        for (_, state) in composer.states.iter_mut() {
            state.reshuffle(&mut composer.rng);
        }
        Ok(composer)
    }

    /// Reshuffles the pacer's permutation; call at each epoch start after
    /// `next_batch` returned `None`. The first epoch needs no call.
    pub fn begin_epoch(&mut self) {
        let pacer = self.pacer;
        let count = self.pacer_count();
        let state = self.states.get_mut(&pacer).expect("pacer exists");
        if state.remaining() < count {
            state.reshuffle(&mut self.rng);
        }
    }

    fn pacer_count(&self) -> usize {
        self.quota
            .per_dataset
            .iter()
            .find(|&&(id, _)| id == self.pacer)
            .map(|&(_, n)| n)
            .expect("pacer in quota")
    }

    /// Composes the next batch, or `None` when the pacer pool is exhausted
    /// for this epoch.
    pub fn next_batch(&mut self) -> Result<Option<MaskedBatch>> {
        if self.states[&self.pacer].remaining() < self.pacer_count() {
            return Ok(None);
        }
        let t = self.registry.num_tasks();
        let mut rows: Vec<(usize, usize)> = Vec::with_capacity(self.quota.batch_size());
        for &(id, count) in &self.quota.per_dataset {
            let state = self.states.get_mut(&id).expect("state exists");
            for _ in 0..count {
                if state.cursor >= state.perm.len() {
                    // smaller pool recycles within the epoch
                    state.reshuffle(&mut self.rng);
                }
                let sample = state.perm[state.cursor];
                state.cursor += 1;
                rows.push((id, sample));
            }
        }
        // shuffle within the batch
        for i in (1..rows.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            rows.swap(i, j);
        }

        let b = rows.len();
        let mut mask = MaskMatrix::new(b, t);
        let mut labels = Vec::with_capacity(b);
        let mut dataset_ids = Vec::with_capacity(b);
        let mut feature_rows = Vec::with_capacity(b);
        for (r, &(id, idx)) in rows.iter().enumerate() {
            let sample = &self.registry.dataset(id)?.samples[idx];
            for (j, slot) in sample.labels.iter().enumerate() {
                if slot.is_some() {
                    mask.set(r, j);
                }
            }
            labels.push(sample.labels.clone());
            dataset_ids.push(id);
            feature_rows.push(sample.features.clone());
        }
        Ok(Some(MaskedBatch {
            features: Tensor::from_rows(&feature_rows)?,
            labels,
            mask,
            dataset_ids,
            provenance: rows,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetSpec, SampleRecord, TaskSpec};

    /// t single-task datasets with `size` samples each.
    fn toy_registry(t: usize, size: usize) -> Registry {
        let tasks: Vec<TaskSpec> = (0..t)
            .map(|id| TaskSpec {
                id,
                name: format!("t{id}"),
                classes: 2 + id,
            })
            .collect();
        let datasets = (0..t)
            .map(|id| {
                let samples: Vec<SampleRecord> = (0..size)
                    .map(|i| {
                        let mut labels = vec![None; t];
                        labels[id] = Some((i % (2 + id)) as u32);
                        SampleRecord {
                            features: vec![i as f64, id as f64],
                            labels,
                            dataset_id: id,
                            domain_id: id,
                        }
                    })
                    .collect();
                DatasetSpec {
                    dataset_id: id,
                    domain_id: id,
                    labeled_tasks: vec![id],
                    samples,
                    train_idx: (0..size).collect(),
                    test_idx: vec![],
                }
            })
            .collect();
        Registry { tasks, datasets }
    }

    fn full_pools(reg: &Registry) -> BTreeMap<usize, Vec<usize>> {
        reg.datasets
            .iter()
            .map(|d| (d.dataset_id, d.train_idx.clone()))
            .collect()
    }

    #[test]
    fn quota_2_2_2_gives_batch_6_with_matching_column_sums() {
        let reg = toy_registry(3, 30);
        let quota = BatchQuota::by_task(&reg, &[0, 1, 2], &[2, 2, 2]).unwrap();
        assert_eq!(quota.batch_size(), 6);
        let pools = full_pools(&reg);
        let mut comp = EpochComposer::new(&reg, quota, &pools, 1).unwrap();
        let batch = comp.next_batch().unwrap().unwrap();
        assert_eq!(batch.len(), 6);
        for task in 0..3 {
            assert_eq!(batch.mask.column_sum(task), 2);
        }
    }

    #[test]
    fn paper_style_quota_32_32_64() {
        let reg = toy_registry(3, 200);
        let quota = BatchQuota::by_task(&reg, &[0, 1, 2], &[32, 32, 64]).unwrap();
        assert_eq!(quota.batch_size(), 128);
        let pools = full_pools(&reg);
        let mut comp = EpochComposer::new(&reg, quota, &pools, 1).unwrap();
        let batch = comp.next_batch().unwrap().unwrap();
        assert_eq!(batch.len(), 128);
        assert_eq!(batch.mask.column_sum(0), 32);
        assert_eq!(batch.mask.column_sum(1), 32);
        assert_eq!(batch.mask.column_sum(2), 64);
    }

    #[test]
    fn epoch_covers_every_sample_exactly_once_when_rates_match() {
        let reg = toy_registry(3, 60);
        let quota = BatchQuota::by_task(&reg, &[0, 1, 2], &[2, 2, 2]).unwrap();
        let pools = full_pools(&reg);
        let mut comp = EpochComposer::new(&reg, quota, &pools, 7).unwrap();
        let mut seen: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        while let Some(batch) = comp.next_batch().unwrap() {
            for &(id, idx) in &batch.provenance {
                seen.entry(id).or_default().push(idx);
            }
        }
        for id in 0..3 {
            let mut got = seen.remove(&id).unwrap();
            got.sort_unstable();
            let expected: Vec<usize> = (0..60).collect();
            assert_eq!(got, expected, "dataset {id}");
        }
    }

    #[test]
    fn mask_matches_registry_label_presence() {
        let reg = toy_registry(3, 40);
        let quota = BatchQuota::by_task(&reg, &[0, 1, 2], &[3, 4, 5]).unwrap();
        let pools = full_pools(&reg);
        let mut comp = EpochComposer::new(&reg, quota, &pools, 3).unwrap();
        let batch = comp.next_batch().unwrap().unwrap();
        for (r, &(id, idx)) in batch.provenance.iter().enumerate() {
            let sample = &reg.dataset(id).unwrap().samples[idx];
            for task in 0..3 {
                let expect = if sample.labels[task].is_some() { 1.0 } else { 0.0 };
                assert_eq!(batch.mask.get(r, task), expect);
            }
            assert!((0..3).any(|task| batch.mask.get(r, task) == 1.0));
        }
    }

    #[test]
    fn oversized_quota_is_rejected() {
        let reg = toy_registry(2, 5);
        let quota = BatchQuota::by_task(&reg, &[0, 1], &[6, 2]).unwrap();
        let pools = full_pools(&reg);
        assert!(EpochComposer::new(&reg, quota, &pools, 1).is_err());
    }

    #[test]
    fn smaller_datasets_recycle_within_epoch() {
        // pacer has 40 samples consumed 2/batch (20 batches); the small
        // dataset has 10 consumed 2/batch, so it must recycle
        let mut reg = toy_registry(2, 40);
        reg.datasets[0].samples.truncate(10);
        reg.datasets[0].train_idx = (0..10).collect();
        let quota = BatchQuota::by_task(&reg, &[0, 1], &[2, 2]).unwrap();
        let pools = full_pools(&reg);
        let mut comp = EpochComposer::new(&reg, quota, &pools, 11).unwrap();
        let mut batches = 0;
        let mut small_draws = 0;
        while let Some(batch) = comp.next_batch().unwrap() {
            batches += 1;
            small_draws += batch.provenance.iter().filter(|&&(id, _)| id == 0).count();
        }
        assert_eq!(batches, 20);
        assert_eq!(small_draws, 40);
    }
}
