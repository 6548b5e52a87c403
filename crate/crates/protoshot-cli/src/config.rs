//! Flat key=value run configuration with dotted namespaces.
//!
//! A config file is a list of `key=value` lines (`#` comments and blank
//! lines ignored); command-line overrides are the same pairs applied after
//! the file. Unknown keys are rejected. A resolved configuration can be
//! written back as a canonical snapshot with every default materialized;
//! feeding that snapshot back in resolves to the identical configuration,
//! so runs are reproducible from their own artifacts.

use protoshot::episodes::{SplitSpec, SyntheticConfig};
use protoshot::harness::RunConfig;
use protoshot::meta::Algorithm;
use protoshot::models::EncoderConfig;
use protoshot::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Where the run's samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    /// Generated on the fly from `data.*` parameters.
    Synthetic(SyntheticConfig),
    /// Ingested from a JSONL dataset; `feature_dim` fixes the feature width
    /// (required when the records carry raw text).
    Jsonl {
        path: PathBuf,
        feature_dim: Option<usize>,
    },
}

/// A fully resolved run: every key either set explicitly or defaulted.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub run: RunConfig,
    pub data: DataSpec,
}

/// Parse a config file into ordered key/value pairs.
pub fn parse_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = split_pair(line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        pairs.push((k, v));
    }
    Ok(pairs)
}

/// Parse one `key=value` override argument.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    split_pair(s).map_err(|e| Error::Config(format!("override '{s}': {e}")))
}

fn split_pair(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => {
            Ok((k.trim().to_string(), v.trim().to_string()))
        }
        _ => Err(format!("expected key=value, got '{s}'")),
    }
}

/// Key/value store that tracks which keys were consumed, so anything left
/// over can be rejected by name.
struct KeyBag {
    map: BTreeMap<String, String>,
    used: std::collections::BTreeSet<String>,
}

impl KeyBag {
    /// Later pairs win over earlier ones (file order, then overrides).
    fn new(pairs: &[(String, String)]) -> Self {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            map.insert(k.clone(), v.clone());
        }
        KeyBag {
            map,
            used: Default::default(),
        }
    }

    /// Raw value for a key; empty strings count as absent.
    fn take(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.map.get(key).filter(|v| !v.is_empty()).cloned()
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("config key '{key}': invalid value '{v}': {e}"))),
        }
    }

    fn parse_opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| {
                Error::Config(format!("config key '{key}': invalid value '{v}': {e}"))
            }),
        }
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => parse_bool(key, &v),
        }
    }

    fn bool_opt(&mut self, key: &str) -> Result<Option<bool>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => parse_bool(key, &v).map(Some),
        }
    }

    fn required(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::Config(format!("config key '{key}' is required")))
    }

    fn list(&mut self, key: &str) -> Result<Vec<String>> {
        match self.take(key) {
            None => Ok(Vec::new()),
            Some(v) => {
                let items: Vec<String> = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                if items.is_empty() {
                    return Err(Error::Config(format!(
                        "config key '{key}': expected a comma-separated list, got '{v}'"
                    )));
                }
                Ok(items)
            }
        }
    }

    fn usize_list(&mut self, key: &str) -> Result<Vec<usize>> {
        self.list(key)?
            .into_iter()
            .map(|s| {
                s.parse().map_err(|e| {
                    Error::Config(format!("config key '{key}': invalid entry '{s}': {e}"))
                })
            })
            .collect()
    }

    /// Reject any key that was never consumed.
    fn finish(self) -> Result<()> {
        let unknown: Vec<&String> = self
            .map
            .keys()
            .filter(|k| !self.used.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            let listed: Vec<String> = unknown.iter().map(|k| format!("'{k}'")).collect();
            Err(Error::Config(format!(
                "unknown config key{} {}",
                if listed.len() == 1 { "" } else { "s" },
                listed.join(", ")
            )))
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "config key '{key}': expected true or false, got '{v}'"
        ))),
    }
}

/// Resolve key/value pairs against the defaults into a complete run.
pub fn resolve(pairs: &[(String, String)]) -> Result<Resolved> {
    let mut bag = KeyBag::new(pairs);

    let seed: u64 = bag.parse("seed", 42)?;
    let algorithm: Algorithm = bag
        .required("algorithm")?
        .parse()
        .map_err(|e| Error::Config(format!("config key 'algorithm': {e}")))?;

    let data = match bag.required("data.source")?.as_str() {
        "synthetic" => {
            let cfg = SyntheticConfig {
                n_groups: bag.parse("data.n_groups", 5)?,
                n_classes: bag.parse("data.n_classes", 4)?,
                dim: bag.parse("data.dim", 32)?,
                samples_per_class: bag.parse("data.samples_per_class", 32)?,
                drift: bag.parse("data.drift", 1.0)?,
                noise: bag.parse("data.noise", 0.3)?,
                seed: bag.parse("data.seed", seed)?,
            };
            if let Some(v) = bag.take("data.path") {
                return Err(Error::Config(format!(
                    "config key 'data.path' ('{v}') applies only to data.source=jsonl"
                )));
            }
            if let Some(v) = bag.take("data.feature_dim") {
                return Err(Error::Config(format!(
                    "config key 'data.feature_dim' ('{v}') applies only to data.source=jsonl"
                )));
            }
            DataSpec::Synthetic(cfg)
        }
        "jsonl" => {
            let path = PathBuf::from(bag.required("data.path")?);
            let feature_dim = bag.parse_opt("data.feature_dim")?;
            for key in [
                "data.n_groups",
                "data.n_classes",
                "data.dim",
                "data.samples_per_class",
                "data.drift",
                "data.noise",
                "data.seed",
            ] {
                if let Some(v) = bag.take(key) {
                    return Err(Error::Config(format!(
                        "config key '{key}' ('{v}') applies only to data.source=synthetic"
                    )));
                }
            }
            DataSpec::Jsonl { path, feature_dim }
        }
        other => {
            return Err(Error::Config(format!(
                "config key 'data.source': expected synthetic or jsonl, got '{other}'"
            )))
        }
    };

    let split = SplitSpec {
        aux_groups: {
            let aux = bag.list("split.aux")?;
            if aux.is_empty() {
                return Err(Error::Config("config key 'split.aux' is required".into()));
            }
            aux
        },
        dev_group: bag.required("split.dev")?,
        target_groups: {
            let t = bag.list("split.target")?;
            if t.is_empty() {
                return Err(Error::Config("config key 'split.target' is required".into()));
            }
            t
        },
        src_group: bag.take("split.src"),
        train_cap: bag.parse_opt("split.train_cap")?,
        pool_ratio: bag.parse("split.pool_ratio", 0.5)?,
    };

    let (input_dim, n_classes) = match &data {
        DataSpec::Synthetic(cfg) => (cfg.dim, cfg.n_classes),
        // Left open until the dataset is loaded.
        DataSpec::Jsonl { feature_dim, .. } => (feature_dim.unwrap_or(0), 0),
    };
    let encoder = EncoderConfig {
        input_dim,
        hidden_dims: bag.usize_list("encoder.hidden")?,
        output_dim: bag.parse("encoder.output_dim", 64)?,
        n_classes,
        inner_steps: bag.parse("encoder.inner_steps", 5)?,
        per_step_layer_norm: bag.bool("encoder.per_step_layer_norm", true)?,
        init_seed: bag.parse("encoder.init_seed", seed)?,
    };

    let (default_inner_lr, default_head_mult) = match algorithm {
        Algorithm::Reptile => (5e-5, 1.0),
        _ => (1e-5, 10.0),
    };

    let run = RunConfig {
        seed,
        algorithm,
        split,
        encoder,
        support_size: bag.parse("episode.support", 16)?,
        query_size: bag.parse("episode.query", 16)?,
        epochs: bag.parse("train.epochs", 100)?,
        episodes_per_epoch: bag.parse("train.episodes_per_epoch", 100)?,
        meta_batch: bag.parse("train.meta_batch", 4)?,
        outer_lr: bag.parse("train.outer_lr", 3e-5)?,
        inner_lr: bag.parse("inner.lr", default_inner_lr)?,
        head_lr_multiplier: bag.parse("inner.head_multiplier", default_head_mult)?,
        alpha_lr: bag.parse("inner.alpha_lr", 6e-5)?,
        patience: bag.parse("train.patience", 3)?,
        eval_seeds: bag.parse("eval.seeds", 5)?,
        test_finetune_steps: bag.parse("eval.finetune_steps", 5)?,
        test_fraction: bag.parse("data.test_fraction", 0.5)?,
        baseline_epochs: bag.parse("baseline.epochs", 10)?,
        baseline_batch: bag.parse("baseline.batch", 16)?,
        baseline_finetune_lr: bag.parse("baseline.finetune_lr", 3e-5)?,
        grid_epochs: bag.parse("grid.epochs", 10)?,
        init_from_checkpoint: bag.take("init_from_checkpoint").map(PathBuf::from),
        include_src: bag.bool("include_src", false)?,
        proto_normalize: bag.bool_opt("proto.normalize")?,
        simpleshot: bag.bool("proto.simpleshot", true)?,
        proto_centering: bag.bool("proto.centering", false)?,
        threads: bag.parse("threads", 1)?,
    };

    bag.finish()?;
    Ok(Resolved { run, data })
}

/// Canonical snapshot: every key materialized with its resolved value,
/// sorted, one per line. Resolving the snapshot reproduces this exact
/// configuration.
pub fn snapshot(resolved: &Resolved) -> String {
    let run = &resolved.run;
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| pairs.push((k.to_string(), v));

    put("seed", run.seed.to_string());
    put("algorithm", run.algorithm.to_string());
    match &resolved.data {
        DataSpec::Synthetic(cfg) => {
            put("data.source", "synthetic".into());
            put("data.n_groups", cfg.n_groups.to_string());
            put("data.n_classes", cfg.n_classes.to_string());
            put("data.dim", cfg.dim.to_string());
            put("data.samples_per_class", cfg.samples_per_class.to_string());
            put("data.drift", cfg.drift.to_string());
            put("data.noise", cfg.noise.to_string());
            put("data.seed", cfg.seed.to_string());
        }
        DataSpec::Jsonl { path, feature_dim } => {
            put("data.source", "jsonl".into());
            put("data.path", path.display().to_string());
            put(
                "data.feature_dim",
                feature_dim.map(|d| d.to_string()).unwrap_or_default(),
            );
        }
    }
    put("data.test_fraction", run.test_fraction.to_string());
    put("split.aux", run.split.aux_groups.join(","));
    put("split.dev", run.split.dev_group.clone());
    put("split.target", run.split.target_groups.join(","));
    put("split.src", run.split.src_group.clone().unwrap_or_default());
    put(
        "split.train_cap",
        run.split
            .train_cap
            .map(|c| c.to_string())
            .unwrap_or_default(),
    );
    put("split.pool_ratio", run.split.pool_ratio.to_string());
    put(
        "encoder.hidden",
        run.encoder
            .hidden_dims
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    put("encoder.output_dim", run.encoder.output_dim.to_string());
    put("encoder.inner_steps", run.encoder.inner_steps.to_string());
    put(
        "encoder.per_step_layer_norm",
        run.encoder.per_step_layer_norm.to_string(),
    );
    put("encoder.init_seed", run.encoder.init_seed.to_string());
    put("episode.support", run.support_size.to_string());
    put("episode.query", run.query_size.to_string());
    put("train.epochs", run.epochs.to_string());
    put(
        "train.episodes_per_epoch",
        run.episodes_per_epoch.to_string(),
    );
    put("train.meta_batch", run.meta_batch.to_string());
    put("train.outer_lr", run.outer_lr.to_string());
    put("train.patience", run.patience.to_string());
    put("inner.lr", run.inner_lr.to_string());
    put("inner.head_multiplier", run.head_lr_multiplier.to_string());
    put("inner.alpha_lr", run.alpha_lr.to_string());
    put("eval.seeds", run.eval_seeds.to_string());
    put("eval.finetune_steps", run.test_finetune_steps.to_string());
    put("baseline.epochs", run.baseline_epochs.to_string());
    put("baseline.batch", run.baseline_batch.to_string());
    put("baseline.finetune_lr", run.baseline_finetune_lr.to_string());
    put("grid.epochs", run.grid_epochs.to_string());
    put(
        "init_from_checkpoint",
        run.init_from_checkpoint
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default(),
    );
    put("include_src", run.include_src.to_string());
    put(
        "proto.normalize",
        run.proto_normalize.map(|b| b.to_string()).unwrap_or_default(),
    );
    put("proto.simpleshot", run.simpleshot.to_string());
    put("proto.centering", run.proto_centering.to_string());
    put("threads", run.threads.to_string());

    pairs.sort();
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    }
    out
}

/// Load the configured dataset and finish the encoder's data-dependent
/// dimensions.
pub fn load_features(
    resolved: &Resolved,
) -> Result<(protoshot::episodes::FeatureSet, RunConfig)> {
    let mut run = resolved.run.clone();
    let features = match &resolved.data {
        DataSpec::Synthetic(cfg) => {
            let (dataset, _) = protoshot::episodes::gen_synthetic(cfg)?;
            dataset.featurized(cfg.dim)?
        }
        DataSpec::Jsonl { path, feature_dim } => {
            let dataset = protoshot::episodes::ingest_jsonl(path)?;
            let dim = feature_dim.or_else(|| dataset.feature_dim_hint()).ok_or_else(|| {
                Error::Config(format!(
                    "dataset {} carries raw text only; set data.feature_dim",
                    path.display()
                ))
            })?;
            dataset.featurized(dim)?
        }
    };
    run.encoder.input_dim = features.dim;
    run.encoder.n_classes = features.n_classes;
    Ok((features, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn minimal() -> Vec<(String, String)> {
        pairs(&[
            ("algorithm", "fomaml"),
            ("data.source", "synthetic"),
            ("split.aux", "g0,g1,g2"),
            ("split.dev", "g3"),
            ("split.target", "g4"),
        ])
    }

    #[test]
    fn defaults_materialize() {
        let r = resolve(&minimal()).unwrap();
        assert_eq!(r.run.seed, 42);
        assert_eq!(r.run.epochs, 100);
        assert_eq!(r.run.episodes_per_epoch, 100);
        assert_eq!(r.run.meta_batch, 4);
        assert_eq!(r.run.outer_lr, 3e-5);
        assert_eq!(r.run.inner_lr, 1e-5);
        assert_eq!(r.run.head_lr_multiplier, 10.0);
        assert_eq!(r.run.alpha_lr, 6e-5);
        assert_eq!(r.run.patience, 3);
        assert_eq!(r.run.eval_seeds, 5);
        assert_eq!(r.run.test_finetune_steps, 5);
        assert_eq!(r.run.encoder.inner_steps, 5);
        assert_eq!(r.run.support_size, 16);
        assert_eq!(r.run.encoder.init_seed, 42);
        match &r.data {
            DataSpec::Synthetic(cfg) => {
                assert_eq!(cfg.n_groups, 5);
                assert_eq!(cfg.seed, 42);
            }
            other => panic!("wrong data spec: {other:?}"),
        }
    }

    #[test]
    fn reptile_gets_its_own_inner_defaults() {
        let mut p = minimal();
        p[0].1 = "reptile".into();
        let r = resolve(&p).unwrap();
        assert_eq!(r.run.inner_lr, 5e-5);
        assert_eq!(r.run.head_lr_multiplier, 1.0);
        // Explicit values still win.
        p.push(("inner.lr".into(), "0.001".into()));
        let r = resolve(&p).unwrap();
        assert_eq!(r.run.inner_lr, 1e-3);
    }

    #[test]
    fn later_pairs_override_earlier_ones() {
        let mut p = minimal();
        p.push(("train.epochs".into(), "7".into()));
        p.push(("train.epochs".into(), "9".into()));
        let r = resolve(&p).unwrap();
        assert_eq!(r.run.epochs, 9);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let mut p = minimal();
        p.push(("train.epoch".into(), "7".into()));
        let err = resolve(&p).unwrap_err();
        assert!(err.to_string().contains("'train.epoch'"), "{err}");
        assert!(err.is_config_like());
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut p = minimal();
        p.push(("train.meta_batch".into(), "four".into()));
        let err = resolve(&p).unwrap_err();
        assert!(err.to_string().contains("'train.meta_batch'"), "{err}");

        let mut p = minimal();
        p.push(("include_src".into(), "yes".into()));
        let err = resolve(&p).unwrap_err();
        assert!(err.to_string().contains("'include_src'"), "{err}");
    }

    #[test]
    fn missing_required_keys_are_named() {
        let err = resolve(&pairs(&[("data.source", "synthetic")])).unwrap_err();
        assert!(err.to_string().contains("'algorithm'"), "{err}");
    }

    #[test]
    fn inapplicable_data_keys_are_rejected() {
        let mut p = minimal();
        p.push(("data.path".into(), "x.jsonl".into()));
        let err = resolve(&p).unwrap_err();
        assert!(err.to_string().contains("data.path"), "{err}");

        let p = pairs(&[
            ("algorithm", "fomaml"),
            ("data.source", "jsonl"),
            ("data.path", "x.jsonl"),
            ("data.drift", "1.0"),
            ("split.aux", "g0"),
            ("split.dev", "g1"),
            ("split.target", "g2"),
        ]);
        let err = resolve(&p).unwrap_err();
        assert!(err.to_string().contains("data.drift"), "{err}");
    }

    #[test]
    fn snapshot_closure_reproduces_the_resolution() {
        let mut p = minimal();
        p.push(("train.outer_lr".into(), "3e-5".into()));
        p.push(("inner.lr".into(), "0.0001".into()));
        p.push(("encoder.hidden".into(), "64,32".into()));
        p.push(("split.src".into(), "g0".into()));
        p.push(("split.train_cap".into(), "64".into()));
        p.push(("proto.normalize".into(), "false".into()));
        let a = resolve(&p).unwrap();
        let snap = snapshot(&a);
        let reparsed: Vec<(String, String)> = snap
            .lines()
            .map(|l| split_pair(l).unwrap())
            .collect();
        let b = resolve(&reparsed).unwrap();
        assert_eq!(
            serde_json::to_string(&a.run).unwrap(),
            serde_json::to_string(&b.run).unwrap()
        );
        assert_eq!(a.data, b.data);
        // And the snapshot itself is a fixed point.
        assert_eq!(snap, snapshot(&b));
    }

    #[test]
    fn snapshot_keeps_optional_keys_empty() {
        let r = resolve(&minimal()).unwrap();
        let snap = snapshot(&r);
        assert!(snap.contains("split.src=\n"), "{snap}");
        assert!(snap.contains("proto.normalize=\n"), "{snap}");
        assert!(snap.contains("init_from_checkpoint=\n"), "{snap}");
        assert!(snap.contains("encoder.hidden=\n"), "{snap}");
        // Sorted lines.
        let lines: Vec<&str> = snap.lines().collect();
        let mut sorted = lines.clone();
        sorted.sort_unstable();
        assert_eq!(lines, sorted);
    }

    #[test]
    fn file_parsing_skips_comments_and_names_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# a comment").unwrap();
        writeln!(f).unwrap();
        writeln!(f, "algorithm=fomaml").unwrap();
        writeln!(f, "  train.epochs = 3  ").unwrap();
        drop(f);
        let pairs = parse_file(&path).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1], ("train.epochs".to_string(), "3".to_string()));

        let bad = dir.path().join("bad.cfg");
        std::fs::write(&bad, "algorithm=fomaml\njust-some-words\n").unwrap();
        let err = parse_file(&bad).unwrap_err();
        assert!(err.to_string().contains("bad.cfg:2"), "{err}");

        let missing = dir.path().join("nope.cfg");
        let err = parse_file(&missing).unwrap_err();
        assert!(err.to_string().contains("nope.cfg"), "{err}");
        assert!(err.is_config_like());
    }

    #[test]
    fn override_form_is_validated() {
        assert!(parse_override("a=b").is_ok());
        assert!(parse_override("ab").is_err());
        assert!(parse_override("=b").is_err());
    }

    #[test]
    fn synthetic_data_seed_follows_the_run_seed_by_default() {
        let mut p = minimal();
        p.push(("seed".into(), "9".into()));
        let r = resolve(&p).unwrap();
        match &r.data {
            DataSpec::Synthetic(cfg) => assert_eq!(cfg.seed, 9),
            other => panic!("wrong data spec: {other:?}"),
        }
        // But an explicit data.seed pins the dataset across run seeds.
        p.push(("data.seed".into(), "77".into()));
        let r = resolve(&p).unwrap();
        match &r.data {
            DataSpec::Synthetic(cfg) => assert_eq!(cfg.seed, 77),
            other => panic!("wrong data spec: {other:?}"),
        }
    }
}
