//! Bodies of the CLI subcommands.
//!
//! Every run command resolves its configuration first and writes the
//! canonical snapshot to `<out>/resolved.cfg` before doing anything else, so
//! each artifact directory records exactly what produced it. Commands return
//! the process exit code: 0 for success, 3 when training diverged (artifacts
//! for the best state reached are still written).

use crate::config::{self, DataSpec, Resolved};
use protoshot::episodes::gen_synthetic;
use protoshot::gradcheck::run_gradient_suite;
use protoshot::harness::{
    evaluate_with_seeds, grid_search, meta_train, train_non_episodic, zero_shot_targets,
    zero_shot_train, AuditLog, Checkpoint, EpochMetrics, GridCell, PreparedData, RunConfig,
    TrainOutcome,
};
use protoshot::optim::LrTable;
use protoshot::{Error, Result};
use std::path::{Path, PathBuf};

/// Shared arguments of the run commands, already parsed.
pub struct RunInputs {
    pub config_path: PathBuf,
    pub out_dir: PathBuf,
    pub overrides: Vec<String>,
}

/// Resolve the configuration (file first, then overrides), create the output
/// directory, and persist the canonical snapshot.
fn prepare(inputs: &RunInputs) -> Result<Resolved> {
    let mut pairs = config::parse_file(&inputs.config_path)?;
    for o in &inputs.overrides {
        pairs.push(config::parse_override(o)?);
    }
    let resolved = config::resolve(&pairs)?;
    std::fs::create_dir_all(&inputs.out_dir)
        .map_err(|e| Error::io(inputs.out_dir.display().to_string(), e))?;
    write_text(
        &inputs.out_dir.join("resolved.cfg"),
        &config::snapshot(&resolved),
    )?;
    Ok(resolved)
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

/// One JSON object per epoch, in epoch order.
fn write_metrics(path: &Path, trace: &[EpochMetrics]) -> Result<()> {
    let mut out = String::new();
    for m in trace {
        let line = serde_json::to_string(m)
            .map_err(|e| Error::contract(format!("serializing epoch metrics: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    write_text(path, &out)
}

fn write_training_artifacts(out_dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    write_metrics(&out_dir.join("metrics.jsonl"), &outcome.trace)?;
    outcome.checkpoint.save(&out_dir.join("checkpoint.json"))
}

fn report_outcome(kind: &str, outcome: &TrainOutcome) {
    if outcome.diverged {
        println!(
            "{kind}: diverged after epoch {}; kept best state from epoch {}",
            outcome.trace.len(),
            outcome.best_epoch
        );
    } else {
        println!(
            "{kind}: {} epochs, best epoch {}",
            outcome.trace.len(),
            outcome.best_epoch
        );
    }
    if let Some(best) = outcome.trace.iter().find(|m| m.epoch == outcome.best_epoch) {
        println!(
            "  dev loss {:.6}  dev acc {:.4} ± {:.4}",
            best.dev_loss, best.dev_acc_mean, best.dev_acc_std
        );
    }
    if outcome.rate_clamp_events > 0 {
        println!(
            "  {} learned inner-rate value(s) clamped at the positivity floor",
            outcome.rate_clamp_events
        );
    }
}

fn exit_code(outcome: &TrainOutcome) -> i32 {
    if outcome.diverged {
        3
    } else {
        0
    }
}

pub fn cmd_meta_train(inputs: &RunInputs) -> Result<i32> {
    let resolved = prepare(inputs)?;
    let (features, run) = config::load_features(&resolved)?;
    let prep = PreparedData::build(features, &run)?;
    let outcome = meta_train(&run, &prep)?;
    write_training_artifacts(&inputs.out_dir, &outcome)?;
    report_outcome("meta-train", &outcome);
    Ok(exit_code(&outcome))
}

pub fn cmd_meta_test(inputs: &RunInputs, checkpoint_path: &Path) -> Result<i32> {
    let resolved = prepare(inputs)?;
    let (features, run) = config::load_features(&resolved)?;
    let prep = PreparedData::build(features, &run)?;
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let params = ckpt.model()?;
    // A checkpoint trained without an adaptation loop carries no learned
    // rates; fall back to a constant finetuning schedule at the baseline
    // finetune rate.
    let rates = if ckpt.inner_steps > 0 {
        ckpt.rates()?
    } else {
        LrTable::new(
            ckpt.encoder.n_encoder_layers(),
            run.test_finetune_steps,
            run.baseline_finetune_lr,
            1.0,
        )?
    };
    let mut audit = AuditLog::new();
    let report = evaluate_with_seeds(
        &run.eval_settings(),
        &params,
        &rates,
        &prep,
        &run.split.target_groups,
        run.support_size,
        &run.seed_tree(),
        run.eval_seeds,
        Some(&mut audit),
    )?;
    write_text(&inputs.out_dir.join("report.csv"), &report.to_csv())?;
    audit.save(&inputs.out_dir.join("audit.json"))?;
    for g in &report.groups {
        println!("{}: acc {:.4} ± {:.4}", g.group, g.mean, g.std);
    }
    println!("delta: {:.4}", report.delta);
    Ok(0)
}

pub fn cmd_baseline_train(inputs: &RunInputs) -> Result<i32> {
    let resolved = prepare(inputs)?;
    let (features, run) = config::load_features(&resolved)?;
    let prep = PreparedData::build(features, &run)?;
    let mut audit = AuditLog::new();
    let outcome = train_non_episodic(&run, &prep, Some(&mut audit))?;
    write_training_artifacts(&inputs.out_dir, &outcome)?;
    audit.save(&inputs.out_dir.join("audit.json"))?;
    report_outcome("baseline-train", &outcome);
    Ok(exit_code(&outcome))
}

pub fn cmd_zero_shot(inputs: &RunInputs) -> Result<i32> {
    let resolved = prepare(inputs)?;
    let (features, run) = config::load_features(&resolved)?;
    let prep = PreparedData::build(features, &run)?;
    let mut audit = AuditLog::new();
    let outcome = zero_shot_train(&run, &prep, Some(&mut audit))?;
    write_training_artifacts(&inputs.out_dir, &outcome)?;
    // Even a diverged run is evaluated: the checkpoint holds the best state
    // reached before the failure.
    let params = outcome.checkpoint.model()?;
    let report = zero_shot_targets(&params, &prep, &run.split.target_groups, Some(&mut audit))?;
    write_text(&inputs.out_dir.join("report.csv"), &report.to_csv())?;
    audit.save(&inputs.out_dir.join("audit.json"))?;
    report_outcome("zero-shot", &outcome);
    for g in &report.groups {
        println!("{}: acc {:.4}", g.group, g.mean);
    }
    println!("delta: {:.4}", report.delta);
    Ok(exit_code(&outcome))
}

fn grid_csv(cells: &[GridCell]) -> String {
    let mut out = String::from(
        "rank,index,inner_steps,inner_lr,head_multiplier,alpha_lr,dev_loss,dev_acc,best_epoch,diverged\n",
    );
    for (rank, c) in cells.iter().enumerate() {
        let alpha = c.alpha_lr.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            rank + 1,
            c.index,
            c.inner_steps,
            c.inner_lr,
            c.head_lr_multiplier,
            alpha,
            c.dev_loss,
            c.dev_acc,
            c.best_epoch,
            c.diverged
        ));
    }
    out
}

pub fn cmd_grid_search(inputs: &RunInputs) -> Result<i32> {
    let resolved = prepare(inputs)?;
    let (features, run) = config::load_features(&resolved)?;
    let prep = PreparedData::build(features, &run)?;
    let cells = grid_search(&run, &prep)?;
    write_text(&inputs.out_dir.join("grid.csv"), &grid_csv(&cells))?;
    println!("ranked {} cells", cells.len());
    if let Some(best) = cells.first() {
        let alpha = best
            .alpha_lr
            .map(|a| format!(", alpha_lr {a}"))
            .unwrap_or_default();
        println!(
            "best: cell {} (inner_steps {}, inner_lr {}, head_multiplier {}{}) dev loss {:.6}, dev acc {:.4}",
            best.index, best.inner_steps, best.inner_lr, best.head_lr_multiplier, alpha,
            best.dev_loss, best.dev_acc
        );
    }
    Ok(0)
}

pub fn cmd_synth_gen(inputs: &RunInputs) -> Result<i32> {
    let resolved = prepare(inputs)?;
    let cfg = match &resolved.data {
        DataSpec::Synthetic(cfg) => cfg,
        DataSpec::Jsonl { .. } => {
            return Err(Error::Config(
                "synth-gen needs data.source=synthetic".into(),
            ))
        }
    };
    let (dataset, _) = gen_synthetic(cfg)?;
    let path = inputs.out_dir.join("data.jsonl");
    dataset.write_jsonl(&path)?;
    println!("wrote {} records to {}", dataset.records.len(), path.display());
    Ok(0)
}

pub fn cmd_gradcheck(seed: u64) -> Result<i32> {
    let report = run_gradient_suite(seed)?;
    println!(
        "{} gradient checks, max relative error {:.3e} (threshold {:.0e}), worst case: {}",
        report.cases.len(),
        report.max_rel_err,
        report.threshold,
        report.worst_case
    );
    if report.passed() {
        println!("PASS");
        Ok(0)
    } else {
        println!("FAIL");
        Ok(3)
    }
}

/// Check that a run configuration is structurally valid without running it.
/// Used internally by tests and available as a cheap smoke check.
#[allow(dead_code)]
pub fn validate_only(run: &RunConfig) -> Result<()> {
    run.validate()
}
