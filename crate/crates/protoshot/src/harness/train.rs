//! Training loops: episodic meta-training with a cosine-annealed outer
//! optimizer, per-epoch validation under the test protocol, and early
//! stopping; plus the two non-episodic reference trainers (pooled
//! multi-group baseline and source-only model).

use super::audit::AuditLog;
use super::checkpoint::Checkpoint;
use super::eval::meta_test;
use super::{group_tag, mean, population_std, PreparedData, RunConfig};
use crate::episodes::{sample_episode, stratified_split, Batch, FeatureSet};
use crate::error::{Error, Result};
use crate::meta::{meta_batch, Algorithm};
use crate::models::{EncoderConfig, ParamSet};
use crate::optim::{cosine_anneal, LrTable, RangerState};
use crate::rng::SeedTree;
use crate::tensor::{grad, ops, NamedTensors};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Audit phase names used by the non-episodic trainers.
pub const PHASE_BASELINE_TRAIN: &str = "baseline-train";
pub const PHASE_SOURCE_TRAIN: &str = "source-train";
pub const PHASE_SOURCE_VAL: &str = "source-val";

/// One epoch's validation record, written as a JSON line per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean validation query loss over evaluation seeds.
    pub dev_loss: f64,
    pub dev_acc_mean: f64,
    pub dev_acc_std: f64,
    /// Outer learning rate at the epoch's last update.
    pub lr: f64,
}

/// What a training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The best checkpoint by validation loss (the final state if no
    /// validation pass completed).
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochMetrics>,
    /// True when training stopped because of a numeric failure; the
    /// checkpoint then holds the best state reached before the failure.
    pub diverged: bool,
    pub best_epoch: usize,
    /// How many learned inner rates were clamped at the positivity floor.
    pub rate_clamp_events: usize,
}

/// Strict-improvement early stopping on validation loss.
#[derive(Debug)]
struct EarlyStop {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

#[derive(Debug, PartialEq, Eq)]
enum Observation {
    Improved,
    NoImprovement { stop: bool },
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: None,
            stale: 0,
        }
    }

    fn observe(&mut self, loss: f64) -> Observation {
        match self.best {
            Some(b) if !(loss < b) => {
                self.stale += 1;
                Observation::NoImprovement {
                    stop: self.stale >= self.patience,
                }
            }
            _ => {
                self.best = Some(loss);
                self.stale = 0;
                Observation::Improved
            }
        }
    }
}

/// Episodic meta-training.
///
/// Each outer update consumes a meta-batch of episodes sampled from the
/// training groups' pools and applies the algorithm's meta-gradient through
/// the outer optimizer; the model's learning rate follows a cosine schedule
/// over the full run while learned inner rates use their own fixed rate and
/// are clamped at a positivity floor after every update. After each epoch
/// the model is validated on the held-out validation group under the full
/// test protocol (budgeted support draw, adaptation, whole test side as
/// query) across the evaluation seeds; the run keeps the best checkpoint by
/// validation loss and stops once it fails to improve for `patience`
/// consecutive epochs. A numeric failure anywhere ends the run and returns
/// the best state reached, flagged as diverged.
pub fn meta_train(config: &RunConfig, prep: &PreparedData) -> Result<TrainOutcome> {
    config.validate()?;
    let settings = config.algo_settings();
    let eval_settings = config.eval_settings();
    let tree = config.seed_tree();
    let n_layers = config.encoder.n_encoder_layers();

    let mut params: ParamSet<f64> = match &config.init_from_checkpoint {
        Some(path) => Checkpoint::load(path)?.model_for(&config.encoder)?,
        None => ParamSet::init(&config.encoder)?,
    };
    let mut rates = LrTable::<f64>::new(
        n_layers,
        config.encoder.inner_steps,
        config.inner_lr,
        config.head_lr_multiplier,
    )?;
    let learns_rates = config.algorithm.learns_inner_rates();
    let mut opt = {
        let mut map = params.named().clone();
        if learns_rates {
            map.extend(rates.named().clone());
        }
        RangerState::new(&map)
    };

    let total = config.total_outer_steps();
    let steps_per_epoch = config.steps_per_epoch();
    let dev_group = config.split.dev_group.clone();

    let mut outer_step: u64 = 0;
    let mut trace: Vec<EpochMetrics> = Vec::new();
    let mut rate_clamp_events = 0usize;
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut stop = EarlyStop::new(config.patience);
    let mut diverged = false;

    'training: for epoch in 1..=config.epochs {
        let mut epoch_lr = 0.0;
        for _ in 0..steps_per_epoch {
            epoch_lr = cosine_anneal(outer_step, total, config.outer_lr)?;
            let mut ep_rng = tree.stream("episodes", &[outer_step]);
            let mut episodes = Vec::with_capacity(config.meta_batch);
            for _ in 0..config.meta_batch {
                episodes.push(sample_episode(
                    &prep.features,
                    &prep.pools,
                    config.support_size,
                    config.query_size,
                    &mut ep_rng,
                )?);
            }
            let mg = match meta_batch(&settings, &params, &rates, &episodes) {
                Ok(mg) => mg,
                Err(e) if e.is_config_like() => return Err(e),
                Err(_) => {
                    diverged = true;
                    break 'training;
                }
            };
            let mut current = params.named().clone();
            if learns_rates {
                current.extend(rates.named().clone());
            }
            let alpha_lr = config.alpha_lr;
            let stepped = match opt.step(&current, &mg.grads, |name| {
                if name.starts_with("alpha.") {
                    alpha_lr
                } else {
                    epoch_lr
                }
            }) {
                Ok(s) => s,
                Err(e) if e.is_config_like() => return Err(e),
                Err(_) => {
                    diverged = true;
                    break 'training;
                }
            };
            let mut model_updates = Vec::new();
            let mut rate_updates = Vec::new();
            for (name, t) in stepped {
                if name.starts_with("alpha.") {
                    rate_updates.push((name, t));
                } else {
                    model_updates.push((name, t));
                }
            }
            params = params.with_replaced(model_updates)?;
            if learns_rates {
                let (clamped, n) = rates.with_replaced(rate_updates)?.clamped();
                rates = clamped;
                rate_clamp_events += n;
            }
            outer_step += 1;
        }

        let dev_splits = prep.group(&dev_group)?;
        let mut losses = Vec::with_capacity(config.eval_seeds as usize);
        let mut accs = Vec::with_capacity(config.eval_seeds as usize);
        for seed in 1..=config.eval_seeds {
            match meta_test(
                &eval_settings,
                &params,
                &rates,
                &prep.features,
                dev_splits,
                &dev_group,
                config.support_size,
                &tree,
                seed,
                None,
            ) {
                Ok((l, a)) => {
                    losses.push(l);
                    accs.push(a);
                }
                Err(e) if e.is_config_like() => return Err(e),
                Err(_) => {
                    diverged = true;
                    break 'training;
                }
            }
        }
        let dev_loss = mean(&losses);
        trace.push(EpochMetrics {
            epoch,
            dev_loss,
            dev_acc_mean: mean(&accs),
            dev_acc_std: population_std(&accs),
            lr: epoch_lr,
        });
        match stop.observe(dev_loss) {
            Observation::Improved => {
                best = Some((
                    dev_loss,
                    Checkpoint::capture(
                        config.algorithm,
                        &params,
                        &rates,
                        Some(&opt),
                        outer_step,
                        epoch,
                    ),
                ));
            }
            Observation::NoImprovement { stop: true } => break 'training,
            Observation::NoImprovement { stop: false } => {}
        }
    }

    let checkpoint = match best {
        Some((_, c)) => c,
        None => Checkpoint::capture(
            config.algorithm,
            &params,
            &rates,
            Some(&opt),
            outer_step,
            trace.last().map_or(0, |m| m.epoch),
        ),
    };
    let best_epoch = checkpoint.epoch;
    Ok(TrainOutcome {
        checkpoint,
        trace,
        diverged,
        best_epoch,
        rate_clamp_events,
    })
}

/// The encoder used by the non-episodic trainers: same body, but a single
/// layer-norm copy and no adaptation depth. Checkpoints trained this way can
/// seed episodic runs by broadcasting that copy.
fn flat_encoder(encoder: &EncoderConfig) -> EncoderConfig {
    EncoderConfig {
        inner_steps: 0,
        per_step_layer_norm: false,
        ..encoder.clone()
    }
}

/// Plain mini-batch supervised training with validation-based selection.
#[allow(clippy::too_many_arguments)]
fn supervised_core(
    features: &FeatureSet,
    train_idx: &[usize],
    val: &Batch,
    encoder: &EncoderConfig,
    algorithm: Algorithm,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    tree: &SeedTree,
    shuffle_tag: &str,
) -> Result<TrainOutcome> {
    if train_idx.is_empty() {
        return Err(Error::Protocol("non-episodic training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Protocol("non-episodic validation set is empty".into()));
    }
    let mut params = ParamSet::<f64>::init(encoder)?;
    let mut opt = RangerState::new(params.named());
    let rates = LrTable::<f64>::new(encoder.n_encoder_layers(), 0, lr, 1.0)?;
    let val_x = val.to_x::<f64>()?;
    let mut trace = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut diverged = false;
    let mut outer_step = 0u64;

    'training: for epoch in 1..=epochs {
        let mut idx = train_idx.to_vec();
        idx.shuffle(&mut tree.stream(shuffle_tag, &[epoch as u64]));
        for chunk in idx.chunks(batch_size) {
            let b = features.batch(chunk);
            let x = b.to_x::<f64>()?;
            let step_result = (|| -> Result<NamedTensors<f64>> {
                let logits = params.forward(&x, 0)?;
                let loss = ops::softmax_cross_entropy(&logits, &b.labels)?;
                let g = grad(&loss, params.named(), false)?;
                opt.step(params.named(), &g, |_| lr)
            })();
            match step_result {
                Ok(new_params) => {
                    params = params.with_replaced(new_params)?;
                    outer_step += 1;
                }
                Err(e) if e.is_config_like() => return Err(e),
                Err(_) => {
                    diverged = true;
                    break 'training;
                }
            }
        }
        let logits = params.forward(&val_x, 0)?;
        let loss = ops::softmax_cross_entropy(&logits, &val.labels)?.item();
        if !loss.is_finite() {
            diverged = true;
            break 'training;
        }
        let acc = ops::accuracy(&logits, &val.labels)?;
        trace.push(EpochMetrics {
            epoch,
            dev_loss: loss,
            dev_acc_mean: acc,
            dev_acc_std: 0.0,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((
                loss,
                Checkpoint::capture(algorithm, &params, &rates, Some(&opt), outer_step, epoch),
            ));
        }
    }

    let checkpoint = match best {
        Some((_, c)) => c,
        None => Checkpoint::capture(algorithm, &params, &rates, Some(&opt), outer_step, 0),
    };
    let best_epoch = checkpoint.epoch;
    Ok(TrainOutcome {
        checkpoint,
        trace,
        diverged,
        best_epoch,
        rate_clamp_events: 0,
    })
}

/// Non-episodic pooled baseline: merge the training sides of every episodic
/// training group (plus the source group when configured) into one
/// classification dataset, train with plain mini-batches at a constant rate,
/// and select the best epoch by cross-entropy on the validation group's
/// held-out test side. The resulting model is evaluated elsewhere with the
/// same support-based finetuning protocol as the episodic learners.
pub fn train_non_episodic(
    config: &RunConfig,
    prep: &PreparedData,
    audit: Option<&mut AuditLog>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut groups: Vec<String> = config.split.aux_groups.clone();
    if config.include_src {
        if let Some(src) = &config.split.src_group {
            if !groups.contains(src) {
                groups.push(src.clone());
            }
        }
    }
    let mut train_idx = Vec::new();
    for group in &groups {
        train_idx.extend(prep.group(group)?.train.iter().copied());
    }
    if let Some(log) = audit {
        for group in &groups {
            let ids = prep
                .group(group)?
                .train
                .iter()
                .map(|&i| prep.features.samples[i].id.clone())
                .collect();
            log.record(PHASE_BASELINE_TRAIN, group, 0, ids);
        }
    }
    let val = prep
        .features
        .batch(&prep.group(&config.split.dev_group)?.test);
    supervised_core(
        &prep.features,
        &train_idx,
        &val,
        &flat_encoder(&config.encoder),
        config.algorithm,
        config.baseline_epochs,
        config.baseline_batch,
        config.outer_lr,
        &config.seed_tree(),
        "baseline-epoch",
    )
}

/// Source-only model for zero-shot transfer: train non-episodically on the
/// source group's training side, holding out a stratified fraction of it for
/// selection. No other group contributes a single sample.
pub fn zero_shot_train(
    config: &RunConfig,
    prep: &PreparedData,
    mut audit: Option<&mut AuditLog>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let src = config.split.src_group.clone().ok_or_else(|| {
        Error::Config("zero-shot training needs a source group in the split".into())
    })?;
    let tree = config.seed_tree();
    let src_train = &prep.group(&src)?.train;
    let mut rng = tree.stream("src-val", &[group_tag(&src)]);
    let (train_pc, val_pc) = stratified_split(&prep.features, src_train, 0.8, &mut rng)?;
    let train_idx: Vec<usize> = train_pc.into_iter().flatten().collect();
    let val_idx: Vec<usize> = val_pc.into_iter().flatten().collect();
    if let Some(log) = audit.as_deref_mut() {
        let ids = |idx: &[usize]| -> Vec<String> {
            idx.iter()
                .map(|&i| prep.features.samples[i].id.clone())
                .collect()
        };
        log.record(PHASE_SOURCE_TRAIN, &src, 0, ids(&train_idx));
        log.record(PHASE_SOURCE_VAL, &src, 0, ids(&val_idx));
    }
    let val = prep.features.batch(&val_idx);
    supervised_core(
        &prep.features,
        &train_idx,
        &val,
        &flat_encoder(&config.encoder),
        config.algorithm,
        config.baseline_epochs,
        config.baseline_batch,
        config.outer_lr,
        &tree,
        "src-epoch",
    )
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn early_stop_counts_consecutive_non_improvements() {
        let mut s = EarlyStop::new(3);
        assert_eq!(s.observe(1.0), Observation::Improved);
        assert_eq!(s.observe(1.1), Observation::NoImprovement { stop: false });
        assert_eq!(s.observe(1.2), Observation::NoImprovement { stop: false });
        assert_eq!(s.observe(1.3), Observation::NoImprovement { stop: true });
    }

    #[test]
    fn early_stop_resets_on_improvement() {
        let mut s = EarlyStop::new(2);
        assert_eq!(s.observe(1.0), Observation::Improved);
        assert_eq!(s.observe(1.5), Observation::NoImprovement { stop: false });
        assert_eq!(s.observe(0.9), Observation::Improved);
        assert_eq!(s.observe(1.5), Observation::NoImprovement { stop: false });
        assert_eq!(s.observe(1.5), Observation::NoImprovement { stop: true });
        // An equal loss does not count as an improvement.
        let mut t = EarlyStop::new(1);
        assert_eq!(t.observe(1.0), Observation::Improved);
        assert_eq!(t.observe(1.0), Observation::NoImprovement { stop: true });
    }

    #[test]
    fn meta_training_runs_and_reports_each_epoch() {
        let config = tiny_config(crate::meta::Algorithm::FoProtoMamlN, 1);
        let prep = PreparedData::build(tiny_world(5, 12, 0.3), &config).unwrap();
        let out = meta_train(&config, &prep).unwrap();
        assert!(!out.diverged);
        assert_eq!(out.trace.len(), 2);
        for (i, m) in out.trace.iter().enumerate() {
            assert_eq!(m.epoch, i + 1);
            assert!(m.dev_loss.is_finite());
            assert!((0.0..=1.0).contains(&m.dev_acc_mean));
            assert!(m.lr > 0.0 && m.lr <= config.outer_lr);
        }
        // Cosine decay: the last epoch runs at a lower rate than the first.
        assert!(out.trace[1].lr < out.trace[0].lr);
        assert!(out.best_epoch >= 1 && out.best_epoch <= 2);
        assert_eq!(out.checkpoint.epoch, out.best_epoch);
        assert_eq!(out.checkpoint.inner_steps, 1);
    }

    #[test]
    fn meta_training_is_deterministic() {
        let config = tiny_config(crate::meta::Algorithm::Reptile, 1);
        let prep = PreparedData::build(tiny_world(5, 12, 0.3), &config).unwrap();
        let a = meta_train(&config, &prep).unwrap();
        let b = meta_train(&config, &prep).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        assert_eq!(a.checkpoint.inner_rates, b.checkpoint.inner_rates);
    }

    #[test]
    fn different_seeds_give_different_runs() {
        let mut config = tiny_config(crate::meta::Algorithm::FoMaml, 1);
        let prep = PreparedData::build(tiny_world(5, 12, 0.3), &config).unwrap();
        let a = meta_train(&config, &prep).unwrap();
        config.seed = 43;
        let prep2 = PreparedData::build(tiny_world(5, 12, 0.3), &config).unwrap();
        let b = meta_train(&config, &prep2).unwrap();
        assert_ne!(a.trace, b.trace);
    }

    #[test]
    fn learned_rates_move_only_when_the_algorithm_learns_them() {
        let config = tiny_config(crate::meta::Algorithm::FoMaml, 1);
        let prep = PreparedData::build(tiny_world(5, 12, 0.3), &config).unwrap();
        let out = meta_train(&config, &prep).unwrap();
        let moved = out
            .checkpoint
            .inner_rates
            .values()
            .any(|&v| (v - config.inner_lr).abs() > 1e-12 && (v - 10.0 * config.inner_lr).abs() > 1e-12);
        assert!(moved, "learnable rates never moved: {:?}", out.checkpoint.inner_rates);

        let config = tiny_config(crate::meta::Algorithm::Reptile, 1);
        let out = meta_train(&config, &prep).unwrap();
        for (name, &v) in &out.checkpoint.inner_rates {
            let expect = if name.starts_with("alpha.head.") {
                config.inner_lr * config.head_lr_multiplier
            } else {
                config.inner_lr
            };
            assert!((v - expect).abs() < 1e-15, "{name} moved to {v}");
        }
    }

    #[test]
    fn pooled_baseline_trains_on_the_merged_training_sides() {
        let config = tiny_config(crate::meta::Algorithm::FoMaml, 1);
        let prep = PreparedData::build(tiny_world(5, 12, 0.3), &config).unwrap();
        let mut audit = AuditLog::new();
        let out = train_non_episodic(&config, &prep, Some(&mut audit)).unwrap();
        assert!(!out.diverged);
        assert_eq!(out.trace.len(), config.baseline_epochs);
        // 3 training groups x 24 training samples each.
        let total: usize = ["g0", "g1", "g2"]
            .iter()
            .map(|g| audit.count(PHASE_BASELINE_TRAIN, g))
            .sum();
        assert_eq!(total, 72);
        assert_eq!(audit.count(PHASE_BASELINE_TRAIN, "g3"), 0);
        assert_eq!(audit.count(PHASE_BASELINE_TRAIN, "g4"), 0);
        // The baseline model carries a single layer-norm copy.
        assert_eq!(out.checkpoint.encoder.ln_copies(), 1);
        assert_eq!(out.checkpoint.inner_steps, 0);
        assert!(out.checkpoint.inner_rates.is_empty());
    }

    #[test]
    fn source_only_training_touches_only_the_source_group() {
        let config = tiny_config(crate::meta::Algorithm::FoMaml, 1);
        let prep = PreparedData::build(tiny_world(5, 12, 0.3), &config).unwrap();
        let mut audit = AuditLog::new();
        let out = zero_shot_train(&config, &prep, Some(&mut audit)).unwrap();
        assert!(!out.diverged);
        // 80/20 split of the source group's 24 training samples, per class:
        // 6 per class -> 4/5 rounds to 4 train + 2 val... sizes must
        // partition exactly.
        let n_train = audit.count(PHASE_SOURCE_TRAIN, "g0");
        let n_val = audit.count(PHASE_SOURCE_VAL, "g0");
        assert_eq!(n_train + n_val, 24);
        assert!(n_train > n_val);
        for g in ["g1", "g2", "g3", "g4"] {
            assert_eq!(audit.count(PHASE_SOURCE_TRAIN, g), 0);
            assert_eq!(audit.count(PHASE_SOURCE_VAL, g), 0);
        }
        // Every consumed id belongs to the source group.
        for e in &audit.entries {
            for id in &e.ids {
                let s = prep
                    .features
                    .samples
                    .iter()
                    .find(|s| &s.id == id)
                    .unwrap();
                assert_eq!(s.group, "g0");
            }
        }
        assert_eq!(out.checkpoint.encoder.per_step_layer_norm, false);
    }

    #[test]
    fn zero_shot_training_requires_a_source_group() {
        let mut config = tiny_config(crate::meta::Algorithm::FoMaml, 1);
        config.split.src_group = None;
        let prep = PreparedData::build(tiny_world(5, 12, 0.3), &config).unwrap();
        let err = zero_shot_train(&config, &prep, None).unwrap_err();
        assert!(err.is_config_like(), "{err}");
    }
}
