//! Experiment harness: run configuration, data preparation, meta-training
//! with validation and early stopping, the support-based test protocol,
//! non-episodic and zero-shot baselines, multi-seed evaluation, and grid
//! search.
//!
//! Everything here is deterministic given the run seed: every random choice
//! draws from a purpose-tagged stream of the run's seed tree, so identical
//! configurations reproduce identical artifacts byte for byte.

mod audit;
mod checkpoint;
mod eval;
mod grid;
mod train;

pub use audit::{AuditEntry, AuditLog};
pub use checkpoint::{Checkpoint, TensorRecord};
pub use eval::{
    evaluate_with_seeds, meta_test, zero_shot_targets, EvalReport, GroupEval, PHASE_TEST_QUERY,
    PHASE_TEST_SUPPORT, PHASE_ZERO_SHOT_QUERY,
};
pub use grid::{grid_axes, grid_search, run_grid, CellSpec, GridCell};
pub use train::{
    meta_train, train_non_episodic, zero_shot_train, EpochMetrics, TrainOutcome,
    PHASE_BASELINE_TRAIN, PHASE_SOURCE_TRAIN, PHASE_SOURCE_VAL,
};

use crate::episodes::{stratified_split, FeatureSet, GroupPools, SplitSpec};
use crate::error::{Error, Result};
use crate::meta::{Algorithm, AlgoSettings};
use crate::models::EncoderConfig;
use crate::rng::{fnv1a, SeedTree};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Everything a run needs to know, with the defaults the experiments use.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Root of all randomness in the run.
    pub seed: u64,
    pub algorithm: Algorithm,
    pub split: SplitSpec,
    pub encoder: EncoderConfig,
    /// Per-episode support size during meta-training and at meta-test.
    pub support_size: usize,
    /// Per-episode query size during meta-training.
    pub query_size: usize,
    pub epochs: usize,
    /// Episodes sampled per epoch (consumed in meta-batches).
    pub episodes_per_epoch: usize,
    /// Episodes per outer update.
    pub meta_batch: usize,
    /// Peak outer learning rate, cosine-annealed to zero over the run.
    pub outer_lr: f64,
    /// Initial inner-loop rate (per-layer, per-step rates start here).
    pub inner_lr: f64,
    /// Multiplier on the head's inner-loop rate.
    pub head_lr_multiplier: f64,
    /// Outer learning rate for the learnable inner rates (not annealed).
    pub alpha_lr: f64,
    /// Epochs without dev-loss improvement before stopping.
    pub patience: usize,
    /// Evaluation seeds (1..=eval_seeds), reused for dev and test.
    pub eval_seeds: u64,
    /// Inner steps when adapting to a test support set.
    pub test_finetune_steps: usize,
    /// Per-group fraction of samples held out as the test split.
    pub test_fraction: f64,
    /// Epochs for the non-episodic baseline and the zero-shot source model.
    pub baseline_epochs: usize,
    /// Mini-batch size for non-episodic training.
    pub baseline_batch: usize,
    /// Learning rate for the baseline's test-time finetuning steps.
    pub baseline_finetune_lr: f64,
    /// Shortened per-cell budget for grid search.
    pub grid_epochs: usize,
    /// Start meta-training from this checkpoint's parameters.
    pub init_from_checkpoint: Option<PathBuf>,
    /// Merge the source group into non-episodic baseline training.
    pub include_src: bool,
    /// Override prototype-head L2 normalization (None = algorithm default).
    pub proto_normalize: Option<bool>,
    /// Center-and-normalize embeddings in the prototype classifier.
    pub simpleshot: bool,
    /// Center support embeddings before building prototype heads.
    pub proto_centering: bool,
    /// Worker threads for grid search (1 = fully sequential).
    pub threads: usize,
}

impl RunConfig {
    /// Defaults for one algorithm; the caller still has to fill in the data
    /// roles (`split`) and sizes (`encoder`) for a real run.
    pub fn for_algorithm(algorithm: Algorithm, split: SplitSpec, encoder: EncoderConfig) -> Self {
        let (inner_lr, head_lr_multiplier) = match algorithm {
            Algorithm::Reptile => (5e-5, 1.0),
            _ => (1e-5, 10.0),
        };
        RunConfig {
            seed: 42,
            algorithm,
            split,
            encoder,
            support_size: 16,
            query_size: 16,
            epochs: 100,
            episodes_per_epoch: 100,
            meta_batch: 4,
            outer_lr: 3e-5,
            inner_lr,
            head_lr_multiplier,
            alpha_lr: 6e-5,
            patience: 3,
            eval_seeds: 5,
            test_finetune_steps: 5,
            test_fraction: 0.5,
            baseline_epochs: 10,
            baseline_batch: 16,
            baseline_finetune_lr: 3e-5,
            grid_epochs: 10,
            init_from_checkpoint: None,
            include_src: false,
            proto_normalize: None,
            simpleshot: true,
            proto_centering: false,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.meta_batch < 1 {
            return Err(Error::Config("meta_batch must be at least 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.epochs < 1 || self.episodes_per_epoch < 1 {
            return Err(Error::Config(
                "epochs and episodes_per_epoch must be at least 1".into(),
            ));
        }
        if self.eval_seeds < 1 {
            return Err(Error::Config("eval_seeds must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.support_size < self.encoder.n_classes {
            return Err(Error::Config(format!(
                "support_size {} cannot cover {} classes",
                self.support_size, self.encoder.n_classes
            )));
        }
        if self.query_size < 1 {
            return Err(Error::Config("query_size must be at least 1".into()));
        }
        if self.outer_lr <= 0.0 || self.inner_lr <= 0.0 || self.alpha_lr <= 0.0 {
            return Err(Error::Config(
                "outer_lr, inner_lr, and alpha_lr must be positive".into(),
            ));
        }
        if self.head_lr_multiplier <= 0.0 {
            return Err(Error::Config("head_lr_multiplier must be positive".into()));
        }
        if self.baseline_epochs < 1 || self.baseline_batch < 1 {
            return Err(Error::Config(
                "baseline_epochs and baseline_batch must be at least 1".into(),
            ));
        }
        if self.baseline_finetune_lr <= 0.0 {
            return Err(Error::Config("baseline_finetune_lr must be positive".into()));
        }
        if self.grid_epochs < 1 {
            return Err(Error::Config("grid_epochs must be at least 1".into()));
        }
        if self.threads < 1 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// The algorithm-level settings used for meta-training batches.
    pub fn algo_settings(&self) -> AlgoSettings {
        AlgoSettings {
            algorithm: self.algorithm,
            inner_steps: self.encoder.inner_steps,
            proto_normalize: self
                .proto_normalize
                .unwrap_or_else(|| self.algorithm.default_normalize()),
            simpleshot: self.simpleshot,
            proto_centering: self.proto_centering,
        }
    }

    /// Same settings but with the test-time finetune budget.
    pub fn eval_settings(&self) -> AlgoSettings {
        AlgoSettings {
            inner_steps: self.test_finetune_steps,
            ..self.algo_settings()
        }
    }

    /// Outer updates per epoch: episodes are consumed in meta-batches, so an
    /// epoch of E episodes at batch size B takes ceil(E / B) updates.
    pub fn steps_per_epoch(&self) -> u64 {
        (self.episodes_per_epoch as u64).div_ceil(self.meta_batch as u64)
    }

    /// Total outer updates, which is also the cosine annealing horizon.
    pub fn total_outer_steps(&self) -> u64 {
        self.epochs as u64 * self.steps_per_epoch()
    }

    pub fn seed_tree(&self) -> SeedTree {
        SeedTree::new(self.seed)
    }
}

/// Stable per-group tag for seed-stream derivation.
pub(crate) fn group_tag(group: &str) -> u64 {
    fnv1a(0, group.as_bytes())
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard deviation with the population (1/n) normalizer; 0 for a single
/// observation.
pub(crate) fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// One group's held-out split: capped training indices and the test indices.
#[derive(Debug, Clone)]
pub struct GroupSplits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Featurized data with every group already carved into train/test sides and
/// the episodic pools built for the groups that are trained on.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub features: FeatureSet,
    pub splits: BTreeMap<String, GroupSplits>,
    /// Support/query pools per episodic training group (the auxiliary
    /// groups; in joint mode these coincide with the targets).
    pub pools: Vec<GroupPools>,
}

impl PreparedData {
    /// Carve each role group into a train and a test side, apply the
    /// training cap, and build support/query pools for the episodic groups.
    /// All splits depend only on the run seed, never on evaluation seeds, so
    /// the test sets are fixed for the whole run.
    pub fn build(features: FeatureSet, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let spec = &config.split;
        let available: Vec<String> = all_groups(&features);
        spec.validate(&available, features.n_classes)?;
        if features.dim != config.encoder.input_dim {
            return Err(Error::Config(format!(
                "encoder input_dim {} does not match feature dimension {}",
                config.encoder.input_dim, features.dim
            )));
        }
        if features.n_classes != config.encoder.n_classes {
            return Err(Error::Config(format!(
                "encoder n_classes {} does not match data classes {}",
                config.encoder.n_classes, features.n_classes
            )));
        }

        let tree = config.seed_tree();
        let mut role_groups: Vec<String> = spec.aux_groups.clone();
        role_groups.push(spec.dev_group.clone());
        role_groups.extend(spec.target_groups.iter().cloned());
        if let Some(src) = &spec.src_group {
            role_groups.push(src.clone());
        }
        role_groups.sort();
        role_groups.dedup();

        let mut splits = BTreeMap::new();
        for group in &role_groups {
            let idx = features.group_indices(group);
            let mut rng = tree.stream("test-split", &[group_tag(group)]);
            let (train_pc, test_pc) =
                stratified_split(&features, &idx, 1.0 - config.test_fraction, &mut rng)?;
            let mut train: Vec<usize> = train_pc.into_iter().flatten().collect();
            let test: Vec<usize> = test_pc.into_iter().flatten().collect();
            if let Some(cap) = spec.train_cap {
                if train.len() > cap {
                    let mut cap_rng = tree.stream("train-cap", &[group_tag(group)]);
                    train = crate::episodes::stratified_sample(
                        &features, &train, cap, group, &mut cap_rng,
                    )?;
                }
            }
            splits.insert(group.clone(), GroupSplits { train, test });
        }

        let mut pools = Vec::new();
        for group in &spec.aux_groups {
            let mut rng = tree.stream("pool-split", &[group_tag(group)]);
            let (support, query) = stratified_split(
                &features,
                &splits[group].train,
                spec.pool_ratio,
                &mut rng,
            )?;
            pools.push(GroupPools {
                group: group.clone(),
                support,
                query,
            });
        }

        Ok(PreparedData {
            features,
            splits,
            pools,
        })
    }

    pub fn group(&self, name: &str) -> Result<&GroupSplits> {
        self.splits
            .get(name)
            .ok_or_else(|| Error::Config(format!("no prepared split for group '{name}'")))
    }
}

fn all_groups(features: &FeatureSet) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for s in &features.samples {
        if !seen.contains(&s.group) {
            seen.push(s.group.clone());
        }
    }
    seen.sort();
    seen
}
