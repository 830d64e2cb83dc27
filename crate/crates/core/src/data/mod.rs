//! Multi-dataset registry: task universe, sample records with per-task
//! label slots (present or missing), and dataset specs with train/test
//! splits. The synthetic suite generator, batch composer, and text file
//! format live in the submodules.

mod batch;
mod format;
mod generator;
mod suite_io;

pub use batch::{BatchQuota, EpochComposer, MaskMatrix, MaskedBatch};
pub use format::{load_dataset, load_distilled, save_dataset, save_distilled, LoadedDataset};
pub use generator::{
    generate_suite, DatasetGen, DomainGen, GenConfig, Suite, SuiteOracle, TaskGen,
};
pub use suite_io::{dataset_file_name, load_suite, save_suite, SuiteManifest, MANIFEST_NAME};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Dense id starting at 0.
    pub id: usize,
    pub name: String,
    pub classes: usize,
}

/// One sample: features plus a label slot per task (`None` = missing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub features: Vec<f64>,
    pub labels: Vec<Option<u32>>,
    pub dataset_id: usize,
    pub domain_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dataset_id: usize,
    pub domain_id: usize,
    /// Tasks this dataset nominally labels, ascending.
    pub labeled_tasks: Vec<usize>,
    pub samples: Vec<SampleRecord>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl DatasetSpec {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map(|s| s.features.len()).unwrap_or(0)
    }

    pub fn labels_task(&self, task: usize) -> bool {
        self.labeled_tasks.contains(&task)
    }

    /// Checks internal consistency against the task universe.
    ///
    /// With `strict_labels`, every sample's present-label set must equal the
    /// dataset's labeled-task set (original datasets). Distilled datasets may
    /// leave below-threshold slots missing, so they validate with
    /// `strict_labels = false` (present ⊆ labeled, at least one present).
    pub fn validate(&self, tasks: &[TaskSpec], strict_labels: bool) -> Result<()> {
        let t = tasks.len();
        for &j in &self.labeled_tasks {
            if j >= t {
                return Err(Error::UnknownTask(j));
            }
        }
        let dim = self.feature_dim();
        for (i, s) in self.samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::shape(
                    format!("sample {i} features"),
                    &[dim],
                    &[s.features.len()],
                ));
            }
            if s.labels.len() != t {
                return Err(Error::shape(
                    format!("sample {i} label slots"),
                    &[t],
                    &[s.labels.len()],
                ));
            }
            if s.dataset_id != self.dataset_id {
                return Err(Error::Config(format!(
                    "sample {i} carries dataset id {} inside dataset {}",
                    s.dataset_id, self.dataset_id
                )));
            }
            let mut present = Vec::new();
            for (j, slot) in s.labels.iter().enumerate() {
                if let Some(c) = slot {
                    if (*c as usize) >= tasks[j].classes {
                        return Err(Error::IndexOutOfRange {
                            what: format!("label of sample {i}, task {j}"),
                            index: *c as usize,
                            size: tasks[j].classes,
                        });
                    }
                    present.push(j);
                }
            }
            if present.is_empty() {
                return Err(Error::Config(format!("sample {i} has no labels at all")));
            }
            if strict_labels {
                if present != self.labeled_tasks {
                    return Err(Error::Config(format!(
                        "sample {i} labels tasks {present:?} but dataset labels {:?}",
                        self.labeled_tasks
                    )));
                }
            } else if present.iter().any(|j| !self.labeled_tasks.contains(j)) {
                return Err(Error::Config(format!(
                    "sample {i} labels a task outside the dataset's label set"
                )));
            }
        }
        // splits disjoint and exhaustive
        let mut seen = vec![0u8; self.samples.len()];
        for &i in self.train_idx.iter().chain(&self.test_idx) {
            if i >= self.samples.len() {
                return Err(Error::IndexOutOfRange {
                    what: "split index".into(),
                    index: i,
                    size: self.samples.len(),
                });
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::Config(
                "train/test splits must be disjoint and exhaustive".into(),
            ));
        }
        Ok(())
    }
}

/// The task universe plus every dataset available to an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Registry {
    pub tasks: Vec<TaskSpec>,
    pub datasets: Vec<DatasetSpec>,
}

impl Registry {
    pub fn validate(&self, strict_labels: bool) -> Result<()> {
        for (i, task) in self.tasks.iter().enumerate() {
            if task.id != i {
                return Err(Error::Config(format!(
                    "task ids must be dense from 0; slot {i} holds id {}",
                    task.id
                )));
            }
            if task.classes < 2 {
                return Err(Error::Config(format!(
                    "task {i} needs >= 2 classes, got {}",
                    task.classes
                )));
            }
        }
        let mut ids = std::collections::HashSet::new();
        for ds in &self.datasets {
            if !ids.insert(ds.dataset_id) {
                return Err(Error::Config(format!(
                    "duplicate dataset id {}",
                    ds.dataset_id
                )));
            }
            ds.validate(&self.tasks, strict_labels)?;
        }
        Ok(())
    }

    pub fn dataset(&self, id: usize) -> Result<&DatasetSpec> {
        self.datasets
            .iter()
            .find(|d| d.dataset_id == id)
            .ok_or(Error::UnknownDataset(id))
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.datasets.first().map(|d| d.feature_dim()).unwrap_or(0)
    }

    /// The unique dataset labeling `task` among `candidates` (used to map a
    /// per-task batch quota onto source datasets).
    pub fn unique_source_for(&self, task: usize, candidates: &[usize]) -> Result<usize> {
        let mut found = None;
        for &id in candidates {
            if self.dataset(id)?.labels_task(task) {
                if found.is_some() {
                    return Err(Error::Config(format!(
                        "task {task} is labeled by more than one candidate dataset"
                    )));
                }
                found = Some(id);
            }
        }
        found.ok_or_else(|| {
            Error::Config(format!("no candidate dataset labels task {task}"))
        })
    }
}
