//! Data-usage audit: a run records exactly which sample ids each phase
//! consumed, per group and evaluation seed, so the access protocol can be
//! verified after the fact (e.g. a support-based evaluation touches exactly
//! the budgeted number of target-side training samples, and a zero-shot
//! evaluation touches none).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One phase's data consumption for one (group, seed) cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    /// What the samples were used for, e.g. `test-support`, `test-query`,
    /// `baseline-train`.
    pub phase: String,
    pub group: String,
    /// Evaluation seed, or 0 for phases that do not vary by seed.
    pub seed: u64,
    /// Record ids, in consumption order.
    pub ids: Vec<String>,
}

/// Append-only log of every sample a run consumed outside meta-training.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditLog {
    pub entries: Vec<AuditEntry>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        phase: impl Into<String>,
        group: impl Into<String>,
        seed: u64,
        ids: Vec<String>,
    ) {
        self.entries.push(AuditEntry {
            phase: phase.into(),
            group: group.into(),
            seed,
            ids,
        });
    }

    /// All ids recorded for a (phase, group, seed) cell, in order.
    pub fn ids(&self, phase: &str, group: &str, seed: u64) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.phase == phase && e.group == group && e.seed == seed)
            .flat_map(|e| e.ids.iter().map(String::as_str))
            .collect()
    }

    /// Total ids recorded for a phase in a group, across all seeds.
    pub fn count(&self, phase: &str, group: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.phase == phase && e.group == group)
            .map(|e| e.ids.len())
            .sum()
    }

    /// Seeds that show up for a (phase, group), ascending and deduplicated.
    pub fn seeds(&self, phase: &str, group: &str) -> Vec<u64> {
        let mut seeds: Vec<u64> = self
            .entries
            .iter()
            .filter(|e| e.phase == phase && e.group == group)
            .map(|e| e.seed)
            .collect();
        seeds.sort_unstable();
        seeds.dedup();
        seeds
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::contract(format!("serializing audit log: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}
