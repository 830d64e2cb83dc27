//! Synthetic multi-domain multi-task benchmark generator.
//!
//! Samples share a latent vector z ~ N(0, I): each task's label is the
//! argmax of a linear readout of z plus label noise, and each domain
//! observes an affine transform of z plus observation noise. Tasks are
//! therefore correlated through z while domains differ by controllable
//! affine shifts, which lets tests sweep shift severity from trivial to
//! hard. A held-out domain labeled with the target task but never trained
//! on provides the cross-domain evaluation set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distill::FeatureTransform;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

use super::{DatasetSpec, Registry, SampleRecord, TaskSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskGen {
    pub name: String,
    pub classes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainGen {
    /// Relative magnitude of this domain's perturbation of the base
    /// feature transform (0 = identical to base).
    pub shift: f64,
    /// Standard deviation of the domain's feature offset.
    pub offset: f64,
    /// Overall gain of this domain's features (imaging-condition analog).
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Fraction of this domain's perturbation (map and offset) drawn from
    /// the average of the PRECEDING domains' perturbations instead of
    /// fresh randomness. A held-out domain with a high blend sits inside
    /// the family spanned by the training domains, which is what makes
    /// cross-domain generalization learnable at all; 0 = fully novel.
    #[serde(default)]
    pub blend_prior: f64,
    /// When nonempty this domain is a per-sample mixture: every sample
    /// draws its feature transform uniformly from the listed domains
    /// (web-scraped-collection analog). The other knobs are ignored.
    #[serde(default)]
    pub mixture: Vec<usize>,
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetGen {
    pub dataset_id: usize,
    pub domain: usize,
    pub labeled_tasks: Vec<usize>,
    pub size: usize,
    /// Held out from training; used for cross-domain evaluation only.
    #[serde(default)]
    pub holdout: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub tasks: Vec<TaskGen>,
    pub domains: Vec<DomainGen>,
    pub datasets: Vec<DatasetGen>,
    /// Noise added to class scores before the argmax.
    pub label_noise: f64,
    /// Observation noise added to features.
    pub feature_noise: f64,
    /// Fraction of each dataset reserved for the test split.
    pub test_fraction: f64,
    /// How strongly tasks share a common score basis (0 = independent
    /// readouts, 1 = every task reads linear combinations of the same
    /// latent scores). Related tasks are the premise of multi-task
    /// training; this dials how related they are.
    pub task_coupling: f64,
    /// Use the identity as the base feature transform (requires
    /// feature_dim == latent_dim); for oracle tests.
    pub identity_base: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig::default_suite()
    }
}

impl GenConfig {
    /// The default desk-scale suite: three single-task source datasets
    /// (age/gender/emotion analogs) in three domains, plus one held-out
    /// domain labeled with the target task.
    ///
    /// Domain layout: 0 and 1 host the auxiliary tasks, domain 2 is the
    /// held-out domain and blends the auxiliary domains' perturbations
    /// (the cross-domain test resembles the auxiliary data's domain, not
    /// the target task's source), domain 3 hosts the target task.
    pub fn default_suite() -> Self {
        GenConfig {
            latent_dim: 8,
            feature_dim: 24,
            tasks: vec![
                TaskGen { name: "age".into(), classes: 2 },
                TaskGen { name: "gender".into(), classes: 2 },
                TaskGen { name: "emotion".into(), classes: 7 },
            ],
            domains: vec![
                DomainGen { shift: 0.40, offset: 0.50, scale: 0.85, blend_prior: 0.0, mixture: vec![] },
                DomainGen { shift: 0.40, offset: 0.50, scale: 1.15, blend_prior: 0.0, mixture: vec![] },
                DomainGen { shift: 0.40, offset: 0.50, scale: 1.0, blend_prior: 0.0, mixture: vec![0, 1] },
                DomainGen { shift: 0.40, offset: 0.50, scale: 1.0, blend_prior: 0.0, mixture: vec![] },
            ],
            datasets: vec![
                DatasetGen { dataset_id: 0, domain: 0, labeled_tasks: vec![0], size: 2500, holdout: false },
                DatasetGen { dataset_id: 1, domain: 1, labeled_tasks: vec![1], size: 2500, holdout: false },
                DatasetGen { dataset_id: 2, domain: 3, labeled_tasks: vec![2], size: 1000, holdout: false },
                DatasetGen { dataset_id: 3, domain: 2, labeled_tasks: vec![2], size: 2000, holdout: true },
            ],
            label_noise: 0.25,
            feature_noise: 0.05,
            test_fraction: 0.2,
            task_coupling: 0.9,
            identity_base: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config("latent/feature dims must be positive".into()));
        }
        if self.identity_base && self.latent_dim != self.feature_dim {
            return Err(Error::Config(
                "identity_base requires feature_dim == latent_dim".into(),
            ));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task required".into()));
        }
        if self.tasks.iter().any(|t| t.classes < 2) {
            return Err(Error::Config("every task needs >= 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must be in [0, 1)".into()));
        }
        for ds in &self.datasets {
            if ds.domain >= self.domains.len() {
                return Err(Error::Config(format!(
                    "dataset {} references unknown domain {}",
                    ds.dataset_id, ds.domain
                )));
            }
            if ds.labeled_tasks.is_empty() {
                return Err(Error::Config(format!(
                    "dataset {} labels no tasks",
                    ds.dataset_id
                )));
            }
            for &t in &ds.labeled_tasks {
                if t >= self.tasks.len() {
                    return Err(Error::Config(format!(
                        "dataset {} labels unknown task {t}",
                        ds.dataset_id
                    )));
                }
            }
            if ds.size == 0 {
                return Err(Error::Config(format!("dataset {} is empty", ds.dataset_id)));
            }
        }
        Ok(())
    }
}

/// Ground-truth generator internals, exposed for oracle-based tests:
/// per-task readout matrices and per-sample latents.
#[derive(Debug, Clone)]
pub struct SuiteOracle {
    /// task_weights[j] is C_j x L, row-major.
    pub task_weights: Vec<Vec<f64>>,
    /// latents[dataset position][sample] is the latent vector of that sample.
    pub latents: Vec<Vec<Vec<f64>>>,
    /// Per-domain feature maps: feature_dim x latent_dim, row-major.
    pub domain_maps: Vec<Vec<f64>>,
    pub domain_offsets: Vec<Vec<f64>>,
}

impl SuiteOracle {
    /// Noise-free class scores W_j · z.
    pub fn scores(&self, task: usize, z: &[f64]) -> Vec<f64> {
        let l = z.len();
        let w = &self.task_weights[task];
        let classes = w.len() / l;
        (0..classes)
            .map(|c| (0..l).map(|k| w[c * l + k] * z[k]).sum())
            .collect()
    }

    /// Argmax of the noise-free scores (the Bayes-optimal prediction).
    pub fn bayes_label(&self, task: usize, z: &[f64]) -> usize {
        argmax(&self.scores(task, z))
    }
}

/// A generated suite: the registry, the involutive feature-flip transform
/// fixed at generation time, and the held-out dataset id.
#[derive(Debug, Clone)]
pub struct Suite {
    pub registry: Registry,
    pub flip: FeatureTransform,
    pub holdout_dataset: Option<usize>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Sparse orthonormal basis of the flip's +1 eigenspace: one vector per
/// 2-cycle (e_i + s·e_j)/sqrt(2) plus every fixed point with sign +1.
fn flip_invariant_basis(flip: &FeatureTransform, dim: usize) -> Vec<Vec<(usize, f64)>> {
    match flip {
        FeatureTransform::Identity => (0..dim).map(|i| vec![(i, 1.0)]).collect(),
        FeatureTransform::SignedPermutation { perm, signs } => {
            let mut basis = Vec::new();
            for i in 0..dim {
                let j = perm[i];
                if j == i {
                    if signs[i] == 1 {
                        basis.push(vec![(i, 1.0)]);
                    }
                } else if i < j {
                    let inv = std::f64::consts::FRAC_1_SQRT_2;
                    basis.push(vec![(i, inv), (j, f64::from(signs[i]) * inv)]);
                }
            }
            basis
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            x * scale
        })
        .collect()
}

/// Generates the full suite deterministically from `seed`.
pub fn generate_suite(cfg: &GenConfig, seed: u64) -> Result<(Suite, SuiteOracle)> {
    cfg.validate()?;
    let l = cfg.latent_dim;
    let d = cfg.feature_dim;

    // Task readouts: C_j x L with unit-variance entries. With coupling c,
    // each row is a mix of a shared score basis and an independent part,
    // rescaled so the score variance (and hence the label-noise ratio)
    // stays the same at every coupling.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7461736b)); // task weights
    let basis_rows = cfg.tasks.iter().map(|t| t.classes).max().unwrap_or(1);
    let basis = normal_vec(&mut rng, basis_rows * l, 1.0);
    let c = cfg.task_coupling;
    let norm = (c * c + (1.0 - c) * (1.0 - c)).sqrt();
    let task_weights: Vec<Vec<f64>> = cfg
        .tasks
        .iter()
        .map(|t| {
            let mixer = normal_vec(&mut rng, t.classes * basis_rows, 1.0 / (basis_rows as f64).sqrt());
            let indep = normal_vec(&mut rng, t.classes * l, 1.0);
            let mut w = vec![0.0; t.classes * l];
            for row in 0..t.classes {
                for col in 0..l {
                    let mut shared = 0.0;
                    for k in 0..basis_rows {
                        shared += mixer[row * basis_rows + k] * basis[k * l + col];
                    }
                    w[row * l + col] = (c * shared + (1.0 - c) * indep[row * l + col]) / norm;
                }
            }
            w
        })
        .collect();

    // The feature flip is fixed first so the informative feature subspace
    // can be built inside its +1 eigenspace: flipping a sample then maps
    // it onto another valid sample with the same labels (only the
    // observation noise differs), which is what makes the flip a usable
    // test-time view for transform-ensembled distillation.
    let flip = FeatureTransform::random_involution(d, derive_seed(seed, 0x666c6970)); // flip
    let inv_basis = flip_invariant_basis(&flip, d);

    // Domain maps: base A (or identity) plus a per-domain perturbation of
    // relative size `shift`. Both live in the flip-invariant subspace;
    // entries are scaled so features stay O(1).
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x646f6d61)); // domains
    let invariant_matrix = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let m = inv_basis.len();
        let coeffs = normal_vec(rng, m * l, (2.0 / l as f64).sqrt());
        let mut out = vec![0.0; d * l];
        for (r, basis_vec) in inv_basis.iter().enumerate() {
            for k in 0..l {
                let c = coeffs[r * l + k];
                for &(i, v) in basis_vec {
                    out[i * l + k] += v * c;
                }
            }
        }
        out
    };
    let base: Vec<f64> = if cfg.identity_base {
        let mut m = vec![0.0; d * l];
        for i in 0..l {
            m[i * l + i] = 1.0;
        }
        m
    } else {
        invariant_matrix(&mut rng)
    };
    let mut domain_maps: Vec<Vec<f64>> = Vec::with_capacity(cfg.domains.len());
    let mut domain_offsets: Vec<Vec<f64>> = Vec::with_capacity(cfg.domains.len());
    let mut perturbations: Vec<Vec<f64>> = Vec::with_capacity(cfg.domains.len());
    let mut raw_offsets: Vec<Vec<f64>> = Vec::with_capacity(cfg.domains.len());
    let invariant_offset = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let coeffs = normal_vec(rng, inv_basis.len(), std::f64::consts::SQRT_2);
        let mut out = vec![0.0; d];
        for (r, basis_vec) in inv_basis.iter().enumerate() {
            for &(i, v) in basis_vec {
                out[i] += v * coeffs[r];
            }
        }
        out
    };
    for dom in &cfg.domains {
        let (fresh, fresh_off) = if cfg.identity_base {
            (
                normal_vec(&mut rng, d * l, 1.0 / (l as f64).sqrt()),
                normal_vec(&mut rng, d, 1.0),
            )
        } else {
            let m = invariant_matrix(&mut rng);
            let o = invariant_offset(&mut rng);
            (m, o)
        };
        let (pert, off_dir) = if dom.blend_prior > 0.0 && !perturbations.is_empty() {
            let k = perturbations.len() as f64;
            let c = dom.blend_prior;
            let norm = (c * c + (1.0 - c) * (1.0 - c)).sqrt();
            let mix = |prior: f64, f: f64| (c * prior + (1.0 - c) * f) / norm;
            let pert: Vec<f64> = (0..d * l)
                .map(|i| {
                    let prior = perturbations.iter().map(|p| p[i]).sum::<f64>() / k.sqrt();
                    mix(prior, fresh[i])
                })
                .collect();
            let off: Vec<f64> = (0..d)
                .map(|i| {
                    let prior = raw_offsets.iter().map(|p| p[i]).sum::<f64>() / k.sqrt();
                    mix(prior, fresh_off[i])
                })
                .collect();
            (pert, off)
        } else {
            (fresh, fresh_off)
        };
        let map: Vec<f64> = base
            .iter()
            .zip(&pert)
            .map(|(b, p)| b + dom.shift * p)
            .collect();
        domain_maps.push(map);
        domain_offsets.push(off_dir.iter().map(|&o| dom.offset * o).collect());
        perturbations.push(pert);
        raw_offsets.push(off_dir);
    }

    let mut datasets = Vec::with_capacity(cfg.datasets.len());
    let mut latents = Vec::with_capacity(cfg.datasets.len());
    let mut holdout = None;
    for ds in &cfg.datasets {
        if ds.holdout {
            if holdout.is_some() {
                return Err(Error::Config("more than one holdout dataset".into()));
            }
            holdout = Some(ds.dataset_id);
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xd5000000 + ds.dataset_id as u64));
        let mixture = &cfg.domains[ds.domain].mixture;
        for &m in mixture {
            if m >= cfg.domains.len() {
                return Err(Error::Config(format!(
                    "domain {} mixes unknown domain {m}",
                    ds.domain
                )));
            }
        }
        let mut samples = Vec::with_capacity(ds.size);
        let mut ds_latents = Vec::with_capacity(ds.size);
        for _ in 0..ds.size {
            let z = normal_vec(&mut rng, l, 1.0);
            let mut labels = vec![None; cfg.tasks.len()];
            for &j in &ds.labeled_tasks {
                let w = &task_weights[j];
                let classes = cfg.tasks[j].classes;
                let mut scores = vec![0.0; classes];
                for (c, score) in scores.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for k in 0..l {
                        acc += w[c * l + k] * z[k];
                    }
                    let noise: f64 = rng.sample(StandardNormal);
                    *score = acc + cfg.label_noise * noise;
                }
                labels[j] = Some(argmax(&scores) as u32);
            }
            // a mixture domain draws each sample's transform from one of
            // its component domains
            let src = if mixture.is_empty() {
                ds.domain
            } else {
                mixture[rng.gen_range(0..mixture.len())]
            };
            let map = &domain_maps[src];
            let offset = &domain_offsets[src];
            let gain = cfg.domains[src].scale;
            let mut features = vec![0.0; d];
            for (i, f) in features.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..l {
                    acc += map[i * l + k] * z[k];
                }
                let noise: f64 = rng.sample(StandardNormal);
                *f = gain * acc + offset[i] + cfg.feature_noise * noise;
            }
            samples.push(SampleRecord {
                features,
                labels,
                dataset_id: ds.dataset_id,
                domain_id: ds.domain,
            });
            ds_latents.push(z);
        }

        // seed-deterministic split: shuffle indices, first chunk is test
        let mut idx: Vec<usize> = (0..ds.size).collect();
        let mut split_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x53000000 + ds.dataset_id as u64));
        for i in (1..idx.len()).rev() {
            let j = split_rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let n_test = ((ds.size as f64) * cfg.test_fraction).round() as usize;
        let mut test_idx: Vec<usize> = idx[..n_test].to_vec();
        let mut train_idx: Vec<usize> = idx[n_test..].to_vec();
        test_idx.sort_unstable();
        train_idx.sort_unstable();

        datasets.push(DatasetSpec {
            dataset_id: ds.dataset_id,
            domain_id: ds.domain,
            labeled_tasks: ds.labeled_tasks.clone(),
            samples,
            train_idx,
            test_idx,
        });
        latents.push(ds_latents);
    }

    let tasks: Vec<TaskSpec> = cfg
        .tasks
        .iter()
        .enumerate()
        .map(|(id, t)| TaskSpec {
            id,
            name: t.name.clone(),
            classes: t.classes,
        })
        .collect();

    let registry = Registry { tasks, datasets };
    registry.validate(true)?;

    Ok((
        Suite {
            registry,
            flip,
            holdout_dataset: holdout,
        },
        SuiteOracle {
            task_weights,
            latents,
            domain_maps,
            domain_offsets,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_suite() {
        let cfg = GenConfig::default_suite();
        let (a, _) = generate_suite(&cfg, 42).unwrap();
        let (b, _) = generate_suite(&cfg, 42).unwrap();
        for (x, y) in a.registry.datasets.iter().zip(&b.registry.datasets) {
            assert_eq!(x, y);
        }
        let (c, _) = generate_suite(&cfg, 43).unwrap();
        assert_ne!(
            a.registry.datasets[0].samples[0].features,
            c.registry.datasets[0].samples[0].features
        );
    }

    #[test]
    fn noiseless_identity_labels_match_score_sign() {
        let cfg = GenConfig {
            latent_dim: 6,
            feature_dim: 6,
            tasks: vec![TaskGen { name: "bin".into(), classes: 2 }],
            domains: vec![DomainGen { shift: 0.0, offset: 0.0, scale: 1.0, blend_prior: 0.0, mixture: vec![] }],
            datasets: vec![DatasetGen {
                dataset_id: 0,
                domain: 0,
                labeled_tasks: vec![0],
                size: 300,
                holdout: false,
            }],
            label_noise: 0.0,
            feature_noise: 0.0,
            test_fraction: 0.2,
            identity_base: true,
        };
        let (suite, oracle) = generate_suite(&cfg, 9).unwrap();
        let ds = &suite.registry.datasets[0];
        for (i, sample) in ds.samples.iter().enumerate() {
            let z = &oracle.latents[0][i];
            // identity base + zero noise: features are exactly the latents
            assert_eq!(&sample.features, z);
            let expected = oracle.bayes_label(0, z) as u32;
            assert_eq!(sample.labels[0], Some(expected), "sample {i}");
        }
    }

    #[test]
    fn oracle_classifier_beats_90_percent_on_default_noise() {
        let cfg = GenConfig::default_suite();
        let (suite, oracle) = generate_suite(&cfg, 5).unwrap();
        for (pos, ds) in suite.registry.datasets.iter().enumerate() {
            for &task in &ds.labeled_tasks {
                let mut hits = 0;
                for (i, sample) in ds.samples.iter().enumerate() {
                    let pred = oracle.bayes_label(task, &oracle.latents[pos][i]) as u32;
                    if sample.labels[task] == Some(pred) {
                        hits += 1;
                    }
                }
                let acc = hits as f64 / ds.len() as f64;
                assert!(
                    acc >= 0.90,
                    "dataset {} task {task}: oracle accuracy {acc}",
                    ds.dataset_id
                );
            }
        }
    }

    #[test]
    fn rejects_inconsistent_dims() {
        let mut cfg = GenConfig::default_suite();
        cfg.identity_base = true; // latent 8 != feature 16
        assert!(generate_suite(&cfg, 1).is_err());

        let mut cfg = GenConfig::default_suite();
        cfg.datasets[0].domain = 99;
        assert!(generate_suite(&cfg, 1).is_err());
    }
}
