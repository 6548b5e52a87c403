//! Optimization machinery: per-layer-per-step learnable inner-loop rates,
//! the inner SGD update, a Ranger-style outer optimizer (variance-rectified
//! Adam + lookahead + gradient centralization), and cosine annealing.

use crate::error::{Error, Result};
use crate::models::{LayerRef, ParamSet};
use crate::scalar::Real;
use crate::tensor::{GradMap, NamedTensors, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Floor applied to learnable inner rates after every outer update.
pub const LR_FLOOR: f64 = 1e-8;

/// Learnable inner-loop learning rates, one positive scalar per
/// (layer, adaptation step). The head row starts at `inner_lr *
/// head_multiplier`; encoder rows start at `inner_lr`. Each rate is a
/// gradient-tracked scalar so the outer loop can train it jointly with the
/// model.
#[derive(Debug, Clone)]
pub struct LrTable<R: Real> {
    n_encoder_layers: usize,
    steps: usize,
    rates: NamedTensors<R>,
}

fn rate_key(layer: LayerRef, step: usize) -> String {
    match layer {
        LayerRef::Encoder(i) => format!("alpha.enc.{i}.step.{step}"),
        LayerRef::Head => format!("alpha.head.step.{step}"),
    }
}

impl<R: Real> LrTable<R> {
    pub fn new(
        n_encoder_layers: usize,
        steps: usize,
        inner_lr: f64,
        head_multiplier: f64,
    ) -> Result<Self> {
        if inner_lr <= 0.0 {
            return Err(Error::contract(format!(
                "inner learning rate must be positive, got {inner_lr}"
            )));
        }
        if n_encoder_layers == 0 {
            return Err(Error::contract("learning-rate table needs at least one layer"));
        }
        let mut rates = NamedTensors::new();
        for step in 0..steps {
            for layer in 0..n_encoder_layers {
                rates.insert(
                    rate_key(LayerRef::Encoder(layer), step),
                    Tensor::scalar_leaf(R::from_f64_lossy(inner_lr)),
                );
            }
            rates.insert(
                rate_key(LayerRef::Head, step),
                Tensor::scalar_leaf(R::from_f64_lossy(inner_lr * head_multiplier)),
            );
        }
        Ok(LrTable {
            n_encoder_layers,
            steps,
            rates,
        })
    }

    /// Rebuild from named values (checkpoint load); the key set must match
    /// the table layout exactly.
    pub fn from_named(
        n_encoder_layers: usize,
        steps: usize,
        rates: NamedTensors<R>,
    ) -> Result<Self> {
        let reference = LrTable::<R>::new(n_encoder_layers, steps, 1.0, 1.0)?;
        if rates.len() != reference.rates.len()
            || !reference.rates.keys().all(|k| rates.contains_key(k))
        {
            return Err(Error::contract(format!(
                "learning-rate table keys do not match a {n_encoder_layers}-layer, {steps}-step layout"
            )));
        }
        for (name, t) in &rates {
            if t.numel() != 1 {
                return Err(Error::contract(format!(
                    "learning rate '{name}' must be scalar, got shape {:?}",
                    t.shape()
                )));
            }
        }
        Ok(LrTable {
            n_encoder_layers,
            steps,
            rates,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn rate(&self, layer: LayerRef, step: usize) -> Result<&Tensor<R>> {
        if step >= self.steps {
            return Err(Error::contract(format!(
                "learning-rate lookup at step {step}, table has {} steps",
                self.steps
            )));
        }
        if let LayerRef::Encoder(i) = layer {
            if i >= self.n_encoder_layers {
                return Err(Error::contract(format!(
                    "learning-rate lookup for encoder layer {i}, table has {}",
                    self.n_encoder_layers
                )));
            }
        }
        Ok(&self.rates[&rate_key(layer, step)])
    }

    /// All rates as named scalars, for outer training and checkpoints.
    pub fn named(&self) -> &NamedTensors<R> {
        &self.rates
    }

    /// New table with updated values swapped in.
    pub fn with_replaced(&self, updates: impl IntoIterator<Item = (String, Tensor<R>)>) -> Result<Self> {
        let mut rates = self.rates.clone();
        for (name, t) in updates {
            if !rates.contains_key(&name) {
                return Err(Error::contract(format!(
                    "cannot replace unknown learning rate '{name}'"
                )));
            }
            if t.numel() != 1 {
                return Err(Error::contract(format!(
                    "learning rate '{name}' must stay scalar, got shape {:?}",
                    t.shape()
                )));
            }
            rates.insert(name, t);
        }
        Ok(LrTable {
            n_encoder_layers: self.n_encoder_layers,
            steps: self.steps,
            rates,
        })
    }

    /// Clamp every rate at [`LR_FLOOR`], returning the clamped table and how
    /// many entries needed clamping.
    pub fn clamped(&self) -> (Self, usize) {
        let floor = R::from_f64_lossy(LR_FLOOR);
        let mut clamps = 0usize;
        let rates = self
            .rates
            .iter()
            .map(|(k, t)| {
                let v = t.item();
                if v < floor {
                    clamps += 1;
                    (k.clone(), Tensor::scalar_leaf(floor))
                } else {
                    (k.clone(), t.clone())
                }
            })
            .collect();
        (
            LrTable {
                n_encoder_layers: self.n_encoder_layers,
                steps: self.steps,
                rates,
            },
            clamps,
        )
    }
}

/// One inner-loop SGD step on the adaptable parameters:
/// `theta' = theta - alpha[layer][step] * g`. Layer-norm copies are left
/// untouched. The step stays inside the graph, so whether the result carries
/// second-order information is decided by whether `grads` was built with
/// `create_graph` (and whether the caller detached it).
pub fn sgd_inner_step<R: Real>(
    params: &ParamSet<R>,
    grads: &GradMap<R>,
    lrs: &LrTable<R>,
    step: usize,
) -> Result<ParamSet<R>> {
    if step >= lrs.steps() {
        return Err(Error::contract(format!(
            "inner step {step} requested, adaptation depth is {}",
            lrs.steps()
        )));
    }
    let mut updates = Vec::new();
    for (name, theta) in params.adaptable() {
        let g = grads.get(&name).ok_or_else(|| {
            Error::contract(format!("inner step: missing gradient for '{name}'"))
        })?;
        let layer = ParamSet::<R>::layer_of(&name).ok_or_else(|| {
            Error::contract(format!("inner step: cannot place '{name}' in a layer"))
        })?;
        let alpha = lrs.rate(layer, step)?;
        updates.push((name, theta.sub(&g.mul(alpha)?)?));
    }
    params.with_replaced(updates)
}

/// Cosine-annealed learning rate without restarts:
/// `eta_t = 0.5 * eta_max * (1 + cos(pi * t / T))`.
pub fn cosine_anneal(t: u64, total: u64, eta_max: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::contract("cosine_anneal: horizon T must be >= 1"));
    }
    if t > total {
        return Err(Error::contract(format!(
            "cosine_anneal: step {t} beyond horizon {total}"
        )));
    }
    Ok(0.5 * eta_max * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// Outer-optimizer state: Adam moments, step counter, and lookahead slow
/// weights. Serializes through [`RangerSnapshot`] for checkpoints.
#[derive(Debug, Clone)]
pub struct RangerState<R: Real> {
    t: u64,
    beta1: R,
    beta2: R,
    eps: R,
    sync_period: u64,
    interp: R,
    m: BTreeMap<String, Vec<R>>,
    v: BTreeMap<String, Vec<R>>,
    slow: BTreeMap<String, Vec<R>>,
}

/// Serializable form of [`RangerState`] (values widened to f64).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RangerSnapshot {
    pub t: u64,
    pub sync_period: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub slow: BTreeMap<String, Vec<f64>>,
}

impl<R: Real> RangerState<R> {
    /// Fresh state for the given parameters; slow weights start at the
    /// current values.
    pub fn new(params: &NamedTensors<R>) -> Self {
        let slow = params
            .iter()
            .map(|(k, t)| (k.clone(), t.data().to_vec()))
            .collect();
        RangerState {
            t: 0,
            beta1: R::from_f64_lossy(0.9),
            beta2: R::from_f64_lossy(0.999),
            eps: R::from_f64_lossy(1e-8),
            sync_period: 5,
            interp: R::from_f64_lossy(0.5),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            slow,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn snapshot(&self) -> RangerSnapshot {
        let widen = |m: &BTreeMap<String, Vec<R>>| {
            m.iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| x.to_f64_lossy()).collect()))
                .collect()
        };
        RangerSnapshot {
            t: self.t,
            sync_period: self.sync_period,
            m: widen(&self.m),
            v: widen(&self.v),
            slow: widen(&self.slow),
        }
    }

    pub fn from_snapshot(snap: &RangerSnapshot) -> Self {
        let narrow = |m: &BTreeMap<String, Vec<f64>>| {
            m.iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        v.iter().map(|&x| R::from_f64_lossy(x)).collect(),
                    )
                })
                .collect()
        };
        RangerState {
            t: snap.t,
            beta1: R::from_f64_lossy(0.9),
            beta2: R::from_f64_lossy(0.999),
            eps: R::from_f64_lossy(1e-8),
            sync_period: snap.sync_period,
            interp: R::from_f64_lossy(0.5),
            m: narrow(&snap.m),
            v: narrow(&snap.v),
            slow: narrow(&snap.slow),
        }
    }

    /// One outer update over every named parameter. `lr_for` supplies the
    /// base learning rate per parameter name (the model rate is annealed, the
    /// inner-rate table has its own fixed rate).
    ///
    /// Order of operations: gradient centralization on matrices, then a
    /// variance-rectified Adam step (falling back to an un-rectified momentum
    /// step while the rectification term is undefined), then lookahead
    /// interpolation every `sync_period` steps. A non-finite gradient rejects
    /// the whole step and leaves the state untouched.
    pub fn step(
        &mut self,
        params: &NamedTensors<R>,
        grads: &GradMap<R>,
        lr_for: impl Fn(&str) -> R,
    ) -> Result<NamedTensors<R>> {
        // Validate everything before mutating any state.
        for (name, p) in params {
            let g = grads.get(name).ok_or_else(|| {
                Error::contract(format!("outer step: missing gradient for '{name}'"))
            })?;
            if g.shape() != p.shape() {
                return Err(Error::contract(format!(
                    "outer step: gradient shape {:?} mismatches '{name}' {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::numeric(
                    "outer step",
                    format!("non-finite gradient for '{name}'; step rejected"),
                ));
            }
        }

        self.t += 1;
        let t = self.t;
        let one = R::one();
        let (b1, b2) = (self.beta1, self.beta2);
        let b1t = b1.powi(t as i32);
        let b2t = b2.powi(t as i32);
        let rho_inf = R::from_f64_lossy(2.0) / (one - b2) - one;
        let rho_t = rho_inf - R::from_f64_lossy(2.0 * t as f64) * b2t / (one - b2t);
        let rectified = rho_t > R::from_f64_lossy(4.0);
        let r_t = if rectified {
            let four = R::from_f64_lossy(4.0);
            let two = R::from_f64_lossy(2.0);
            (((rho_t - four) * (rho_t - two) * rho_inf)
                / ((rho_inf - four) * (rho_inf - two) * rho_t))
                .sqrt()
        } else {
            one
        };

        let mut out = NamedTensors::new();
        for (name, p) in params {
            let g = centralize(p.shape(), grads.get(name).unwrap().data());
            let lr = lr_for(name);
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![R::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![R::zero(); n]);
            if m.len() != n || v.len() != n {
                return Err(Error::contract(format!(
                    "outer step: stored moments for '{name}' have stale shape"
                )));
            }
            let mut fast = p.data().to_vec();
            for i in 0..n {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / (one - b1t);
                let update = if rectified {
                    let l = (one - b2t).sqrt() / (v[i].sqrt() + self.eps);
                    lr * r_t * m_hat * l
                } else {
                    lr * m_hat
                };
                fast[i] = fast[i] - update;
            }
            if self.t % self.sync_period == 0 {
                let slow = self
                    .slow
                    .entry(name.clone())
                    .or_insert_with(|| p.data().to_vec());
                for i in 0..n {
                    slow[i] = slow[i] + self.interp * (fast[i] - slow[i]);
                    fast[i] = slow[i];
                }
            }
            out.insert(name.clone(), Tensor::leaf(p.shape(), fast)?);
        }
        Ok(out)
    }
}

/// Gradient centralization: subtract the per-output-row mean from matrix
/// gradients; vectors and scalars pass through unchanged.
fn centralize<R: Real>(shape: &[usize], g: &[R]) -> Vec<R> {
    if shape.len() < 2 {
        return g.to_vec();
    }
    let cols = shape[1..].iter().product::<usize>();
    let mut out = g.to_vec();
    let cols_r = R::from_f64_lossy(cols as f64);
    for row in out.chunks_mut(cols) {
        let mean = row.iter().copied().sum::<R>() / cols_r;
        for x in row.iter_mut() {
            *x = *x - mean;
        }
    }
    out
}
