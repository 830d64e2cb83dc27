//! The multi-task network: a shared dense trunk, one classification head
//! per task, and a discriminator head producing unit-norm embeddings for
//! dataset alignment.
//!
//! Parameters are registered in a dense, canonically ordered registry
//! (trunk, then heads by task id, then discriminator) and partitioned into
//! disjoint groups so the optimizer and the gradient-routing checks can
//! address them independently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Hidden widths before the logit layer; may be empty.
    pub hidden: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Trunk layer widths; at least one layer.
    pub trunk: Vec<usize>,
    /// One head per task, indexed by task id.
    pub heads: Vec<HeadConfig>,
    pub disc_hidden: Vec<usize>,
    /// Discriminator embedding dimension (>= 2).
    pub disc_embed: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.trunk.is_empty() {
            return Err(Error::Config("trunk needs at least one layer".into()));
        }
        if self.trunk.iter().any(|&w| w == 0)
            || self.disc_hidden.iter().any(|&w| w == 0)
            || self
                .heads
                .iter()
                .any(|h| h.hidden.iter().any(|&w| w == 0))
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.heads.is_empty() {
            return Err(Error::Config("at least one task head required".into()));
        }
        if let Some(h) = self.heads.iter().find(|h| h.classes < 2) {
            return Err(Error::Config(format!(
                "every task needs >= 2 classes, got {}",
                h.classes
            )));
        }
        if self.disc_embed < 2 {
            return Err(Error::Config("disc_embed must be >= 2".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding; embedded in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

/// Parameter group a tensor belongs to. Groups are disjoint and jointly
/// exhaustive over the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Trunk,
    Head(usize),
    Discriminator,
}

/// Dense parameter index, stable for the lifetime of a model.
pub type ParamId = usize;

#[derive(Debug, Clone)]
struct ParamMeta {
    group: ParamGroup,
    name: String,
}

/// Trunk + per-task heads + discriminator head.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: Vec<Tensor>,
    meta: Vec<ParamMeta>,
    trunk_layers: Vec<(ParamId, ParamId)>,
    head_layers: Vec<Vec<(ParamId, ParamId)>>,
    disc_layers: Vec<(ParamId, ParamId)>,
}

/// Graph handles for every parameter of a bound model, indexed by ParamId.
pub struct ModelVars {
    vars: Vec<Var>,
}

impl ModelVars {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id]
    }
}

fn layer_dims(input: usize, widths: &[usize]) -> Vec<(usize, usize)> {
    let mut dims = Vec::with_capacity(widths.len());
    let mut d = input;
    for &w in widths {
        dims.push((d, w));
        d = w;
    }
    dims
}

impl Model {
    /// Builds a model with scaled-uniform fan-in initialization
    /// (weight entries uniform in ±sqrt(3/fan_in), biases zero),
    /// deterministic in `cfg.seed`.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = Model {
            cfg: cfg.clone(),
            params: Vec::new(),
            meta: Vec::new(),
            trunk_layers: Vec::new(),
            head_layers: Vec::new(),
            disc_layers: Vec::new(),
        };

        let trunk_dims = layer_dims(cfg.input_dim, &cfg.trunk);
        for (i, &(fan_in, fan_out)) in trunk_dims.iter().enumerate() {
            let pair = model.push_layer(
                ParamGroup::Trunk,
                &format!("trunk.{i}"),
                fan_in,
                fan_out,
                &mut rng,
            );
            model.trunk_layers.push(pair);
        }

        let trunk_out = *cfg.trunk.last().expect("validated nonempty");
        for (task, head) in cfg.heads.iter().enumerate() {
            let mut widths = head.hidden.clone();
            widths.push(head.classes);
            let mut layers = Vec::new();
            for (i, &(fan_in, fan_out)) in layer_dims(trunk_out, &widths).iter().enumerate() {
                layers.push(model.push_layer(
                    ParamGroup::Head(task),
                    &format!("head.{task}.{i}"),
                    fan_in,
                    fan_out,
                    &mut rng,
                ));
            }
            model.head_layers.push(layers);
        }

        let mut disc_widths = cfg.disc_hidden.clone();
        disc_widths.push(cfg.disc_embed);
        for (i, &(fan_in, fan_out)) in layer_dims(trunk_out, &disc_widths).iter().enumerate() {
            let pair = model.push_layer(
                ParamGroup::Discriminator,
                &format!("disc.{i}"),
                fan_in,
                fan_out,
                &mut rng,
            );
            model.disc_layers.push(pair);
        }

        Ok(model)
    }

    fn push_layer(
        &mut self,
        group: ParamGroup,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> (ParamId, ParamId) {
        let limit = (3.0 / fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        let wid = self.params.len();
        self.params
            .push(Tensor::matrix(fan_in, fan_out, data).expect("weight shape"));
        self.meta.push(ParamMeta {
            group,
            name: format!("{name}.weight"),
        });
        let bid = self.params.len();
        self.params.push(Tensor::vector(vec![0.0; fan_out]));
        self.meta.push(ParamMeta {
            group,
            name: format!("{name}.bias"),
        });
        (wid, bid)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_tasks(&self) -> usize {
        self.cfg.heads.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id]
    }

    pub fn param_group(&self, id: ParamId) -> ParamGroup {
        self.meta[id].group
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.meta[id].name
    }

    /// Weight matrix of the last shared trunk layer; the reference point
    /// for GradNorm's per-task gradient norms.
    pub fn last_trunk_weight(&self) -> ParamId {
        self.trunk_layers.last().expect("trunk nonempty").0
    }

    /// Registers every parameter as a graph leaf, in ParamId order.
    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        ModelVars {
            vars: self.params.iter().map(|p| g.leaf(p)).collect(),
        }
    }

    /// Shared trunk activations used by every head.
    pub fn forward_shared(&self, g: &mut Graph, vars: &ModelVars, features: Var) -> Result<Var> {
        if g.value(features).cols() != self.cfg.input_dim {
            return Err(Error::shape(
                "trunk input",
                g.value(features).shape(),
                &[self.cfg.input_dim],
            ));
        }
        let mut x = features;
        for &(wid, bid) in &self.trunk_layers {
            let z = g.matmul(x, vars.var(wid))?;
            let z = g.add_row(z, vars.var(bid))?;
            x = g.relu(z);
        }
        Ok(x)
    }

    /// Logits of one task head for every sample in the batch; the loss mask
    /// decides which rows count.
    pub fn forward_task_head(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        task: usize,
        trunk_out: Var,
    ) -> Result<Var> {
        let layers = self
            .head_layers
            .get(task)
            .ok_or(Error::UnknownTask(task))?;
        let mut x = trunk_out;
        let last = layers.len() - 1;
        for (i, &(wid, bid)) in layers.iter().enumerate() {
            let z = g.matmul(x, vars.var(wid))?;
            let z = g.add_row(z, vars.var(bid))?;
            x = if i == last { z } else { g.relu(z) };
        }
        Ok(x)
    }

    /// Discriminator embeddings, one unit-norm row per sample.
    pub fn forward_discriminator(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        trunk_out: Var,
    ) -> Result<Var> {
        let mut x = trunk_out;
        let last = self.disc_layers.len() - 1;
        for (i, &(wid, bid)) in self.disc_layers.iter().enumerate() {
            let z = g.matmul(x, vars.var(wid))?;
            let z = g.add_row(z, vars.var(bid))?;
            x = if i == last { z } else { g.relu(z) };
        }
        Ok(g.row_normalize(x))
    }

    /// Value-only forward for evaluation and teacher inference.
    pub fn logits(&self, task: usize, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let f = g.leaf(features);
        let trunk = self.forward_shared(&mut g, &vars, f)?;
        let logits = self.forward_task_head(&mut g, &vars, task, trunk)?;
        Ok(g.value(logits).clone())
    }

    /// Argmax class per row of `features` for one task.
    pub fn predict(&self, task: usize, features: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(task, features)?;
        let classes = logits.cols();
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for c in 1..classes {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    // ── checkpoint io ────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            config: self.cfg.clone(),
            config_hash: self.cfg.hash(),
            params: self
                .params
                .iter()
                .enumerate()
                .map(|(id, p)| ParamEntry {
                    name: self.meta[id].name.clone(),
                    shape: p.shape().to_vec(),
                    data: p.data().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&file)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        crate::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if file.config.hash() != file.config_hash {
            return Err(Error::Checkpoint(format!(
                "{}: embedded config hash does not match config",
                path.display()
            )));
        }
        let mut model = Model::init(file.config)?;
        if file.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                file.params.len()
            )));
        }
        for (id, entry) in file.params.into_iter().enumerate() {
            if entry.name != model.meta[id].name || entry.shape != model.params[id].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} mismatch: expected {} {:?}, found {} {:?}",
                    id,
                    model.meta[id].name,
                    model.params[id].shape(),
                    entry.name,
                    entry.shape
                )));
            }
            model.params[id] = Tensor::new(entry.shape, entry.data)?;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: ModelConfig,
    config_hash: String,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}
