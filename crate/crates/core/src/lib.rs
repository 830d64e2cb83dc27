//! Desk-scale multi-dataset multi-domain multi-task (2MD-MTL) training
//! engine.
//!
//! One network with a shared trunk and per-task heads trains on mixed-task
//! batches drawn from several datasets at once; a b×t mask selects which
//! (sample, task) loss cells are valid, GradNorm balances the task
//! weights, a triplet-loss discriminator head aligns dataset embeddings
//! adversarially, a teacher/student distillation pass fills missing task
//! labels, and a feedback-driven controller drives the learning rate.
//! Everything is deterministic in (config, seed).

pub mod data;
pub mod distill;
pub mod domain_adapt;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod loss;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

use std::path::Path;

/// Writes via a temp file in the same directory plus an atomic rename, so
/// readers never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
