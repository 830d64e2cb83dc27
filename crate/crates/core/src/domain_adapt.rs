//! Triplet-based dataset alignment.
//!
//! The discriminator head embeds each sample; a hinged triplet loss pulls
//! same-dataset pairs together and pushes cross-dataset pairs apart.
//! The head itself is trained to DECREASE this loss while the trunk is
//! trained to increase it (so datasets become indistinguishable in trunk
//! features), realized as a single backward pass with a gradient sign
//! reversal of scale λ at the trunk→discriminator boundary.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Row indices into the batch embeddings. Anchor and positive come from
/// the same dataset; the negative comes from a different one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaConfig {
    pub enabled: bool,
    pub margin: f64,
    pub triplets_per_batch: usize,
    /// Scale of the reversed gradient into the trunk.
    pub lambda: f64,
}

impl Default for DaConfig {
    fn default() -> Self {
        DaConfig {
            enabled: false,
            margin: 0.2,
            triplets_per_batch: 32,
            lambda: 1.0,
        }
    }
}

impl DaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::Config("triplet margin must be positive".into()));
        }
        if self.triplets_per_batch == 0 {
            return Err(Error::Config("triplets_per_batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mines triplets with dataset-balanced anchors: every eligible dataset
/// contributes ⌊T/e⌋ or ⌈T/e⌉ anchors regardless of its batch share, which
/// keeps large datasets from dominating the discriminator signal.
///
/// Datasets with fewer than two samples in the batch are skipped as anchor
/// sources. If no valid triplet exists the list is empty and the caller
/// treats the alignment loss as zero for the step.
pub fn mine_triplets(dataset_ids: &[usize], cfg: &DaConfig, rng: &mut impl Rng) -> Vec<Triplet> {
    let mut by_dataset: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &id) in dataset_ids.iter().enumerate() {
        by_dataset.entry(id).or_default().push(row);
    }
    if by_dataset.len() < 2 {
        return Vec::new();
    }
    let eligible: Vec<usize> = by_dataset
        .iter()
        .filter(|(_, rows)| rows.len() >= 2)
        .map(|(&id, _)| id)
        .collect();
    if eligible.is_empty() {
        return Vec::new();
    }

    let total = cfg.triplets_per_batch;
    let base = total / eligible.len();
    let remainder = total % eligible.len();
    // spread the remainder uniformly over steps
    let mut order = eligible.clone();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let mut triplets = Vec::with_capacity(total);
    for (slot, &dataset) in order.iter().enumerate() {
        let count = base + usize::from(slot < remainder);
        let members = &by_dataset[&dataset];
        let others: Vec<usize> = by_dataset
            .iter()
            .filter(|(&id, _)| id != dataset)
            .flat_map(|(_, rows)| rows.iter().copied())
            .collect();
        if others.is_empty() {
            continue;
        }
        for _ in 0..count {
            let anchor = members[rng.gen_range(0..members.len())];
            let positive = loop {
                let p = members[rng.gen_range(0..members.len())];
                if p != anchor {
                    break p;
                }
            };
            let negative = others[rng.gen_range(0..others.len())];
            triplets.push(Triplet {
                anchor,
                positive,
                negative,
            });
        }
    }
    triplets
}

/// Mean hinged triplet loss over the batch embeddings:
/// mean_i max(0, ‖a_i−p_i‖² − ‖a_i−n_i‖² + margin).
///
/// An empty triplet list yields an exact 0 with no gradient.
pub fn triplet_loss(
    g: &mut Graph,
    embeddings: Var,
    triplets: &[Triplet],
    margin: f64,
) -> Result<Var> {
    if triplets.is_empty() {
        return Ok(g.constant(&Tensor::scalar(0.0)));
    }
    let rows = g.value(embeddings).rows();
    let mut acc: Option<Var> = None;
    for t in triplets {
        for idx in [t.anchor, t.positive, t.negative] {
            if idx >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "triplet row".into(),
                    index: idx,
                    size: rows,
                });
            }
        }
        let a = g.gather_rows(embeddings, &[t.anchor])?;
        let p = g.gather_rows(embeddings, &[t.positive])?;
        let n = g.gather_rows(embeddings, &[t.negative])?;
        let d_ap = g.l2sq(a, p)?;
        let d_an = g.l2sq(a, n)?;
        let diff = g.sub(d_ap, d_an)?;
        let shifted = g.offset(diff, margin);
        let term = g.relu(shifted);
        acc = Some(match acc {
            Some(prev) => g.add(prev, term)?,
            None => term,
        });
    }
    let total = acc.expect("nonempty");
    Ok(g.scale(total, 1.0 / triplets.len() as f64))
}

/// The two objectives of the adversarial game, assembled for one backward
/// pass.
///
/// `seed` is the node to backpropagate: task total plus the alignment loss,
/// where the alignment branch must have been built on
/// `grad_scale(trunk_out, -lambda)`. The reverse sweep then routes
/// +g(L_DA) into the discriminator head, g(task) − λ·g(L_DA) into the
/// trunk, and task gradients only into the task heads.
///
/// `total_value` is the reported objective Σω·L − λ·L_DA.
#[derive(Debug, Clone, Copy)]
pub struct AdversarialObjective {
    pub seed: Var,
    pub total_value: f64,
    pub da_value: f64,
}

pub fn adversarial_total(
    g: &mut Graph,
    task_total: Var,
    l_da: Var,
    lambda: f64,
) -> Result<AdversarialObjective> {
    let task_value = g.scalar_value(task_total);
    let da_value = g.scalar_value(l_da);
    if !task_value.is_finite() || !da_value.is_finite() {
        return Err(Error::Graph("adversarial total on non-finite losses".into()));
    }
    let seed = g.add(task_total, l_da)?;
    Ok(AdversarialObjective {
        seed,
        total_value: task_value - lambda * da_value,
        da_value,
    })
}
