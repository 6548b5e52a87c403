//! Evaluation protocols: support-based adaptation on held-out groups,
//! multi-seed aggregation, and zero-shot classification without any
//! target-side supervision.

use super::audit::AuditLog;
use super::{group_tag, mean, population_std, GroupSplits, PreparedData};
use crate::episodes::{stratified_sample, FeatureSet};
use crate::error::{Error, Result};
use crate::meta::{episode_predict, AlgoSettings};
use crate::models::ParamSet;
use crate::optim::LrTable;
use crate::rng::SeedTree;
use crate::tensor::ops;
use serde::{Deserialize, Serialize};

/// Audit phase names used by the evaluation protocols.
pub const PHASE_TEST_SUPPORT: &str = "test-support";
pub const PHASE_TEST_QUERY: &str = "test-query";
pub const PHASE_ZERO_SHOT_QUERY: &str = "zero-shot-query";

/// Accuracy of one evaluated group, aggregated over evaluation seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupEval {
    pub group: String,
    /// Mean accuracy over seeds.
    pub mean: f64,
    /// Population standard deviation over seeds (zero for a single seed).
    pub std: f64,
    pub per_seed: Vec<f64>,
}

/// Evaluation over a set of groups plus the unweighted cross-group mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub groups: Vec<GroupEval>,
    /// Unweighted mean of the group means.
    pub delta: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,mean,std\n");
        for g in &self.groups {
            out.push_str(&format!("{},{},{}\n", g.group, g.mean, g.std));
        }
        out.push_str(&format!("delta,{},\n", self.delta));
        out
    }
}

/// Evaluate one group under the support-based protocol: draw a stratified,
/// size-budgeted support set from the group's training side (seeded by
/// `(group, seed)` only, so the draw is identical whenever it is repeated),
/// adapt on it, and classify the group's entire held-out test side.
///
/// Returns `(mean query loss, query accuracy)`.
#[allow(clippy::too_many_arguments)]
pub fn meta_test(
    settings: &AlgoSettings,
    params: &ParamSet<f64>,
    rates: &LrTable<f64>,
    features: &FeatureSet,
    splits: &GroupSplits,
    group: &str,
    support_size: usize,
    tree: &SeedTree,
    seed: u64,
    audit: Option<&mut AuditLog>,
) -> Result<(f64, f64)> {
    let mut rng = tree.stream("support", &[group_tag(group), seed]);
    let support_idx = stratified_sample(features, &splits.train, support_size, group, &mut rng)
        .map_err(|e| {
            Error::Protocol(format!(
                "cannot draw a {support_size}-sample support set for group '{group}': {e}"
            ))
        })?;
    if splits.test.is_empty() {
        return Err(Error::Protocol(format!(
            "group '{group}' has no held-out test samples"
        )));
    }
    let support = features.batch(&support_idx);
    let query = features.batch(&splits.test);
    if let Some(log) = audit {
        log.record(PHASE_TEST_SUPPORT, group, seed, support.ids.clone());
        log.record(PHASE_TEST_QUERY, group, seed, query.ids.clone());
    }
    let query_x = query.to_x::<f64>()?;
    let logits = episode_predict(settings, params, rates, &support, &query_x)?;
    let loss = ops::softmax_cross_entropy(&logits, &query.labels)?.item();
    if !loss.is_finite() {
        return Err(Error::numeric(
            "evaluation",
            format!("query loss for group '{group}' is not finite"),
        ));
    }
    let acc = ops::accuracy(&logits, &query.labels)?;
    Ok((loss, acc))
}

/// Run the support-based protocol over several groups and seeds and
/// aggregate: per group the mean and population standard deviation of
/// accuracy over seeds `1..=n_seeds`, plus the unweighted mean of the group
/// means.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with_seeds(
    settings: &AlgoSettings,
    params: &ParamSet<f64>,
    rates: &LrTable<f64>,
    prep: &PreparedData,
    groups: &[String],
    support_size: usize,
    tree: &SeedTree,
    n_seeds: u64,
    mut audit: Option<&mut AuditLog>,
) -> Result<EvalReport> {
    if groups.is_empty() {
        return Err(Error::Protocol("evaluation needs at least one group".into()));
    }
    if n_seeds == 0 {
        return Err(Error::Protocol("evaluation needs at least one seed".into()));
    }
    let mut report_groups = Vec::with_capacity(groups.len());
    for group in groups {
        let splits = prep.group(group)?;
        let mut per_seed = Vec::with_capacity(n_seeds as usize);
        for seed in 1..=n_seeds {
            let (_, acc) = meta_test(
                settings,
                params,
                rates,
                &prep.features,
                splits,
                group,
                support_size,
                tree,
                seed,
                audit.as_deref_mut(),
            )?;
            per_seed.push(acc);
        }
        report_groups.push(GroupEval {
            group: group.clone(),
            mean: mean(&per_seed),
            std: population_std(&per_seed),
            per_seed,
        });
    }
    let delta = mean(&report_groups.iter().map(|g| g.mean).collect::<Vec<_>>());
    Ok(EvalReport {
        groups: report_groups,
        delta,
    })
}

/// Classify each group's held-out test side with the parameters as they are:
/// no support set, no adaptation, no target-side supervision of any kind.
pub fn zero_shot_targets(
    params: &ParamSet<f64>,
    prep: &PreparedData,
    groups: &[String],
    mut audit: Option<&mut AuditLog>,
) -> Result<EvalReport> {
    if groups.is_empty() {
        return Err(Error::Protocol("evaluation needs at least one group".into()));
    }
    let mut report_groups = Vec::with_capacity(groups.len());
    for group in groups {
        let splits = prep.group(group)?;
        if splits.test.is_empty() {
            return Err(Error::Protocol(format!(
                "group '{group}' has no held-out test samples"
            )));
        }
        let query = prep.features.batch(&splits.test);
        if let Some(log) = audit.as_deref_mut() {
            log.record(PHASE_ZERO_SHOT_QUERY, group, 0, query.ids.clone());
        }
        let logits = params.forward(&query.to_x::<f64>()?, 0)?;
        let acc = ops::accuracy(&logits, &query.labels)?;
        report_groups.push(GroupEval {
            group: group.clone(),
            mean: acc,
            std: 0.0,
            per_seed: vec![acc],
        });
    }
    let delta = mean(&report_groups.iter().map(|g| g.mean).collect::<Vec<_>>());
    Ok(EvalReport {
        groups: report_groups,
        delta,
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::meta::Algorithm;

    fn prepared(drift: f64) -> (PreparedData, super::super::RunConfig) {
        let config = tiny_config(Algorithm::FoMaml, 1);
        let prep = PreparedData::build(tiny_world(9, 12, drift), &config).unwrap();
        (prep, config)
    }

    #[test]
    fn support_draws_are_stratified_sized_and_seed_stable() {
        let (prep, config) = prepared(0.5);
        let params = ParamSet::<f64>::init(&config.encoder).unwrap();
        let rates = LrTable::new(2, 1, config.inner_lr, config.head_lr_multiplier).unwrap();
        let tree = config.seed_tree();
        let mut audit = AuditLog::new();
        let settings = config.eval_settings();
        let splits = prep.group("g4").unwrap();
        let (loss, acc) = meta_test(
            &settings, &params, &rates, &prep.features, splits, "g4", 8, &tree, 1,
            Some(&mut audit),
        )
        .unwrap();
        assert!(loss.is_finite());
        assert!((0.0..=1.0).contains(&acc));

        let support = audit.ids(PHASE_TEST_SUPPORT, "g4", 1);
        assert_eq!(support.len(), 8);
        let query = audit.ids(PHASE_TEST_QUERY, "g4", 1);
        assert_eq!(query.len(), splits.test.len());
        // Support ids come from the training side only.
        let train_ids: Vec<&str> = splits
            .train
            .iter()
            .map(|&i| prep.features.samples[i].id.as_str())
            .collect();
        for id in &support {
            assert!(train_ids.contains(id), "support id {id} not in train side");
        }
        // Stratified: 8 over 4 classes = 2 each.
        for class in 0..4 {
            let n = support
                .iter()
                .filter(|id| {
                    prep.features
                        .samples
                        .iter()
                        .any(|s| s.id == **id && s.label == class)
                })
                .count();
            assert_eq!(n, 2, "class {class}");
        }

        // Same (group, seed) address later: identical draw.
        let mut audit2 = AuditLog::new();
        meta_test(
            &settings, &params, &rates, &prep.features, splits, "g4", 8, &tree, 1,
            Some(&mut audit2),
        )
        .unwrap();
        assert_eq!(
            audit.ids(PHASE_TEST_SUPPORT, "g4", 1),
            audit2.ids(PHASE_TEST_SUPPORT, "g4", 1)
        );
        // Different seed: different draw.
        let mut audit3 = AuditLog::new();
        meta_test(
            &settings, &params, &rates, &prep.features, splits, "g4", 8, &tree, 2,
            Some(&mut audit3),
        )
        .unwrap();
        assert_ne!(
            audit.ids(PHASE_TEST_SUPPORT, "g4", 1),
            audit3.ids(PHASE_TEST_SUPPORT, "g4", 2)
        );
    }

    #[test]
    fn seed_aggregation_and_delta_arithmetic() {
        let report = EvalReport {
            groups: vec![
                GroupEval {
                    group: "a".into(),
                    mean: 0.8,
                    std: 0.0,
                    per_seed: vec![0.8],
                },
                GroupEval {
                    group: "b".into(),
                    mean: 0.9,
                    std: 0.0,
                    per_seed: vec![0.9],
                },
            ],
            delta: 0.85,
        };
        assert!((mean(&[0.8, 0.9]) - 0.85).abs() < 1e-12);
        let csv = report.to_csv();
        assert!(csv.starts_with("group,mean,std\n"));
        assert!(csv.contains("a,0.8,0\n"));
        assert!(csv.ends_with("delta,0.85,\n"));
    }

    #[test]
    fn multi_seed_evaluation_aggregates_per_group() {
        let (prep, config) = prepared(0.5);
        let params = ParamSet::<f64>::init(&config.encoder).unwrap();
        let rates = LrTable::new(2, 1, config.inner_lr, config.head_lr_multiplier).unwrap();
        let tree = config.seed_tree();
        let report = evaluate_with_seeds(
            &config.eval_settings(),
            &params,
            &rates,
            &prep,
            &["g4".to_string(), "g3".to_string()],
            8,
            &tree,
            3,
            None,
        )
        .unwrap();
        assert_eq!(report.groups.len(), 2);
        for g in &report.groups {
            assert_eq!(g.per_seed.len(), 3);
            assert!((g.mean - mean(&g.per_seed)).abs() < 1e-12);
            assert!((g.std - population_std(&g.per_seed)).abs() < 1e-12);
        }
        let expect = (report.groups[0].mean + report.groups[1].mean) / 2.0;
        assert!((report.delta - expect).abs() < 1e-12);
    }

    #[test]
    fn single_seed_std_is_zero() {
        let (prep, config) = prepared(0.5);
        let params = ParamSet::<f64>::init(&config.encoder).unwrap();
        let rates = LrTable::new(2, 1, config.inner_lr, config.head_lr_multiplier).unwrap();
        let tree = config.seed_tree();
        let report = evaluate_with_seeds(
            &config.eval_settings(),
            &params,
            &rates,
            &prep,
            &["g4".to_string()],
            8,
            &tree,
            1,
            None,
        )
        .unwrap();
        assert_eq!(report.groups[0].std, 0.0);
        assert_eq!(report.groups[0].per_seed.len(), 1);
    }

    #[test]
    fn zero_shot_consumes_no_training_side_samples() {
        let (prep, config) = prepared(0.5);
        let params = ParamSet::<f64>::init(&config.encoder).unwrap();
        let mut audit = AuditLog::new();
        let report =
            zero_shot_targets(&params, &prep, &["g4".to_string()], Some(&mut audit)).unwrap();
        assert_eq!(report.groups.len(), 1);
        assert!(audit.ids(PHASE_TEST_SUPPORT, "g4", 0).is_empty());
        assert_eq!(audit.count(PHASE_TEST_SUPPORT, "g4"), 0);
        let splits = prep.group("g4").unwrap();
        assert_eq!(
            audit.count(PHASE_ZERO_SHOT_QUERY, "g4"),
            splits.test.len()
        );
        // No audited id belongs to the group's training side.
        let train_ids: Vec<&str> = splits
            .train
            .iter()
            .map(|&i| prep.features.samples[i].id.as_str())
            .collect();
        for e in &audit.entries {
            for id in &e.ids {
                assert!(!train_ids.contains(&id.as_str()), "train id {id} consumed");
            }
        }
    }

    #[test]
    fn oversized_support_requests_are_protocol_errors() {
        let (prep, config) = prepared(0.5);
        let params = ParamSet::<f64>::init(&config.encoder).unwrap();
        let rates = LrTable::new(2, 1, config.inner_lr, config.head_lr_multiplier).unwrap();
        let tree = config.seed_tree();
        let splits = prep.group("g4").unwrap();
        let err = meta_test(
            &config.eval_settings(),
            &params,
            &rates,
            &prep.features,
            splits,
            "g4",
            10_000,
            &tree,
            1,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
        assert!(err.to_string().contains("g4"), "{err}");
    }
}
