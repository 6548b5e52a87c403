//! Serializable training state: parameters, inner-loop rates, optimizer
//! accumulators, and enough configuration to rebuild the model exactly.

use crate::error::{Error, Result};
use crate::meta::Algorithm;
use crate::models::{EncoderConfig, ParamSet};
use crate::optim::{LrTable, RangerSnapshot, RangerState};
use crate::tensor::{NamedTensors, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// One tensor's values, shape-first so loads can validate before allocating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A complete snapshot of a training run at one point in time. JSON on disk;
/// all maps are ordered, so identical states serialize identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub algorithm: Algorithm,
    pub encoder: EncoderConfig,
    /// Adaptation steps the inner-rate table covers.
    pub inner_steps: usize,
    pub params: BTreeMap<String, TensorRecord>,
    pub inner_rates: BTreeMap<String, f64>,
    pub optimizer: Option<RangerSnapshot>,
    pub outer_step: u64,
    pub epoch: usize,
}

impl Checkpoint {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn capture(
        algorithm: Algorithm,
        params: &ParamSet<f64>,
        rates: &LrTable<f64>,
        optimizer: Option<&RangerState<f64>>,
        outer_step: u64,
        epoch: usize,
    ) -> Self {
        let param_records = params
            .named()
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    TensorRecord {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        let rate_values = rates
            .named()
            .iter()
            .map(|(k, t)| (k.clone(), t.data()[0]))
            .collect();
        Checkpoint {
            format_version: Self::FORMAT_VERSION,
            algorithm,
            encoder: params.config().clone(),
            inner_steps: rates.steps(),
            params: param_records,
            inner_rates: rate_values,
            optimizer: optimizer.map(RangerState::snapshot),
            outer_step,
            epoch,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::contract(format!("serializing checkpoint: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if ckpt.format_version != Self::FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint {} has format version {}, this build reads {}",
                path.display(),
                ckpt.format_version,
                Self::FORMAT_VERSION
            )));
        }
        Ok(ckpt)
    }

    /// Rebuild the parameters exactly as they were saved.
    pub fn model(&self) -> Result<ParamSet<f64>> {
        self.model_for(&self.encoder)
    }

    /// Rebuild the parameters for `target`, which may ask for a different
    /// adaptation depth than the checkpoint was trained with. Weights and
    /// biases carry over unchanged; if the target needs per-step layer-norm
    /// copies the checkpoint does not have, and the checkpoint holds a
    /// single copy (it was trained without per-step adaptation), that copy
    /// is broadcast to every step. Any other shape or layout difference is
    /// an error.
    pub fn model_for(&self, target: &EncoderConfig) -> Result<ParamSet<f64>> {
        let same_body = target.input_dim == self.encoder.input_dim
            && target.hidden_dims == self.encoder.hidden_dims
            && target.output_dim == self.encoder.output_dim
            && target.n_classes == self.encoder.n_classes;
        if !same_body {
            return Err(Error::Config(format!(
                "checkpoint encoder {:?} is incompatible with the requested encoder {:?}",
                self.encoder, target
            )));
        }
        let reference = ParamSet::<f64>::init(target)?;
        let mut named = NamedTensors::new();
        for name in reference.named().keys() {
            let source = if self.params.contains_key(name) {
                name.clone()
            } else if let Some(base) = broadcast_source(name) {
                if self.encoder.ln_copies() != 1 || !self.params.contains_key(&base) {
                    return Err(Error::Config(format!(
                        "checkpoint has no parameter '{name}' and no single \
                         layer-norm copy to broadcast from"
                    )));
                }
                base
            } else {
                return Err(Error::Config(format!(
                    "checkpoint has no parameter '{name}'"
                )));
            };
            let rec = &self.params[&source];
            named.insert(name.clone(), Tensor::leaf(&rec.shape, rec.data.clone())?);
        }
        ParamSet::from_named(target, named)
    }

    /// Rebuild the inner-rate table as it was saved.
    pub fn rates(&self) -> Result<LrTable<f64>> {
        let mut named = NamedTensors::new();
        for (k, &v) in &self.inner_rates {
            named.insert(k.clone(), Tensor::scalar_leaf(v));
        }
        LrTable::from_named(self.encoder.n_encoder_layers(), self.inner_steps, named)
    }

    pub fn optimizer_state(&self) -> Option<RangerState<f64>> {
        self.optimizer.as_ref().map(RangerState::from_snapshot)
    }
}

/// For a per-step layer-norm key `enc.{l}.ln.{c}.{g}` with c > 0, the copy-0
/// key to broadcast from; None for everything else.
fn broadcast_source(name: &str) -> Option<String> {
    let rest = name.strip_prefix("enc.")?;
    let mut parts = rest.split('.');
    let layer = parts.next()?;
    if parts.next()? != "ln" {
        return None;
    }
    let copy: usize = parts.next()?.parse().ok()?;
    let which = parts.next()?;
    if parts.next().is_some() || copy == 0 {
        return None;
    }
    Some(format!("enc.{layer}.ln.0.{which}"))
}
