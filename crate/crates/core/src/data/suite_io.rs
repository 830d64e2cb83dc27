//! Suite persistence: one dataset file per dataset plus a JSON manifest
//! carrying the task universe, the held-out dataset id, the feature-flip
//! transform fixed at generation time, and the generator config echo.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::distill::FeatureTransform;
use crate::error::{Error, Result};
use crate::write_atomic;

use super::{load_dataset, save_dataset, GenConfig, Registry, Suite, TaskSpec};

pub const MANIFEST_NAME: &str = "suite.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
    pub holdout_dataset: Option<usize>,
    pub flip: FeatureTransform,
    /// dataset id -> file name (relative to the suite directory).
    pub datasets: Vec<(usize, String)>,
    pub gen_config: GenConfig,
}

pub fn dataset_file_name(id: usize) -> String {
    format!("dataset_{id}.ds")
}

/// Writes every dataset file plus the manifest into `dir`.
pub fn save_suite(suite: &Suite, gen_config: &GenConfig, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut files = Vec::new();
    for ds in &suite.registry.datasets {
        let name = dataset_file_name(ds.dataset_id);
        let path = dir.join(&name);
        save_dataset(ds, &suite.registry.tasks, &path)?;
        files.push((ds.dataset_id, name));
        written.push(path);
    }
    let manifest = SuiteManifest {
        seed,
        tasks: suite.registry.tasks.clone(),
        holdout_dataset: suite.holdout_dataset,
        flip: suite.flip.clone(),
        datasets: files,
        gen_config: gen_config.clone(),
    };
    let path = dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialize: {e}")))?;
    write_atomic(&path, json.as_bytes())?;
    written.push(path);
    Ok(written)
}

/// Loads a suite saved by [`save_suite`], validating every dataset file
/// against the manifest's task universe.
pub fn load_suite(dir: &Path) -> Result<Suite> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: SuiteManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: 0,
        message: format!("{}: {e}", manifest_path.display()),
    })?;
    let classes: Vec<usize> = manifest.tasks.iter().map(|t| t.classes).collect();
    let mut datasets = Vec::with_capacity(manifest.datasets.len());
    for (id, file) in &manifest.datasets {
        let path = dir.join(file);
        let loaded = load_dataset(&path)?;
        if loaded.spec.dataset_id != *id {
            return Err(Error::Config(format!(
                "{}: dataset id {} does not match manifest id {id}",
                path.display(),
                loaded.spec.dataset_id
            )));
        }
        if loaded.classes != classes {
            return Err(Error::Config(format!(
                "{}: class counts {:?} do not match manifest {:?}",
                path.display(),
                loaded.classes,
                classes
            )));
        }
        datasets.push(loaded.spec);
    }
    let registry = Registry {
        tasks: manifest.tasks,
        datasets,
    };
    registry.validate(true)?;
    if !manifest.flip.is_involution(registry.feature_dim()) {
        return Err(Error::Config(
            "manifest flip transform is not an involution on the feature dim".into(),
        ));
    }
    Ok(Suite {
        registry,
        flip: manifest.flip,
        holdout_dataset: manifest.holdout_dataset,
    })
}
