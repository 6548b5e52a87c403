//! Feed-forward base learner: MLP encoder with bounded (tanh) output features,
//! per-adaptation-step layer normalization copies, and a linear classification
//! head that can be rebuilt from class prototypes.
//!
//! Parameters live in a flat name -> tensor map so the same structure feeds
//! the autodiff engine, the optimizers, and checkpoints. Adaptation never
//! mutates a `ParamSet`; it produces a new one with some tensors replaced,
//! which is what lets meta-gradients flow through adapted parameters.

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::scalar::Real;
use crate::tensor::{ops, NamedTensors, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Epsilon guard shared by layer norm and prototype normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Architecture and adaptation-protocol shape of the base learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub n_classes: usize,
    /// Number of inner-loop adaptation steps K; layer norm keeps K+1 per-step
    /// copies when `per_step_layer_norm` is set.
    pub inner_steps: usize,
    pub per_step_layer_norm: bool,
    pub init_seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.n_classes == 0 {
            return Err(Error::contract(format!(
                "encoder config: dimensions must be >= 1 (input {}, output {}, classes {})",
                self.input_dim, self.output_dim, self.n_classes
            )));
        }
        if let Some(pos) = self.hidden_dims.iter().position(|&d| d == 0) {
            return Err(Error::contract(format!(
                "encoder config: hidden dim at position {pos} must be >= 1"
            )));
        }
        Ok(())
    }

    /// Encoder layer widths from input to embedding: one entry per layer as
    /// `(in_dim, out_dim)`.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn n_encoder_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// Number of layer-norm copies stored per layer.
    pub fn ln_copies(&self) -> usize {
        if self.per_step_layer_norm {
            self.inner_steps + 1
        } else {
            1
        }
    }
}

/// Which parameter group a named tensor belongs to, for per-layer learning
/// rates and gradient centralization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRef {
    /// Encoder layer by index (0 = closest to the input).
    Encoder(usize),
    /// Classification head.
    Head,
}

/// Complete parameter collection of the base learner. Immutable; adaptation
/// and meta-updates build new sets via [`ParamSet::with_replaced`].
#[derive(Debug, Clone)]
pub struct ParamSet<R: Real> {
    config: EncoderConfig,
    params: NamedTensors<R>,
}

fn weight_key(layer: usize) -> String {
    format!("enc.{layer}.w")
}

fn bias_key(layer: usize) -> String {
    format!("enc.{layer}.b")
}

fn ln_key(layer: usize, copy: usize, which: &str) -> String {
    format!("enc.{layer}.ln.{copy}.{which}")
}

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

impl<R: Real> ParamSet<R> {
    /// Glorot-uniform weights, zero biases, unit-gain layer norm, all seeded
    /// from `config.init_seed`. Same config (seed included) twice gives
    /// bit-identical parameters.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedTree::new(config.init_seed).stream("param-init", &[]);
        let mut params = NamedTensors::new();
        for (i, (fan_in, fan_out)) in config.layer_dims().into_iter().enumerate() {
            params.insert(weight_key(i), glorot(&mut rng, fan_out, fan_in)?);
            params.insert(bias_key(i), Tensor::from_vec(&[fan_out], vec![R::zero(); fan_out])?.leaf_copy());
            for k in 0..config.ln_copies() {
                params.insert(
                    ln_key(i, k, "gamma"),
                    Tensor::leaf(&[fan_out], vec![R::one(); fan_out])?,
                );
                params.insert(
                    ln_key(i, k, "beta"),
                    Tensor::leaf(&[fan_out], vec![R::zero(); fan_out])?,
                );
            }
        }
        let (c, d) = (config.n_classes, config.output_dim);
        params.insert(HEAD_W.to_string(), glorot(&mut rng, c, d)?);
        params.insert(HEAD_B.to_string(), Tensor::leaf(&[c], vec![R::zero(); c])?);
        Ok(ParamSet {
            config: config.clone(),
            params,
        })
    }

    /// Rebuild from a named map, checking the key set and every shape against
    /// the config. Used when loading checkpoints.
    pub fn from_named(config: &EncoderConfig, params: NamedTensors<R>) -> Result<Self> {
        config.validate()?;
        let reference = ParamSet::<R>::init(config)?;
        if params.len() != reference.params.len() {
            let missing: Vec<_> = reference
                .params
                .keys()
                .filter(|k| !params.contains_key(*k))
                .cloned()
                .collect();
            let extra: Vec<_> = params
                .keys()
                .filter(|k| !reference.params.contains_key(*k))
                .cloned()
                .collect();
            return Err(Error::contract(format!(
                "parameter set mismatch: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (name, t) in &params {
            let expected = reference.params.get(name).ok_or_else(|| {
                Error::contract(format!("unexpected parameter '{name}'"))
            })?;
            if expected.shape() != t.shape() {
                return Err(Error::contract(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
        }
        Ok(ParamSet {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn named(&self) -> &NamedTensors<R> {
        &self.params
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<R>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("no parameter named '{name}'")))
    }

    /// The parameters the inner loop adapts: encoder weights and biases plus
    /// the head. Layer-norm copies are outer-trained only.
    pub fn adaptable(&self) -> NamedTensors<R> {
        self.params
            .iter()
            .filter(|(k, _)| !is_layer_norm_key(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// New set with the given tensors swapped in. Every name must already
    /// exist with the same shape.
    pub fn with_replaced(
        &self,
        updates: impl IntoIterator<Item = (String, Tensor<R>)>,
    ) -> Result<Self> {
        let mut params = self.params.clone();
        for (name, t) in updates {
            let old = params.get(&name).ok_or_else(|| {
                Error::contract(format!("cannot replace unknown parameter '{name}'"))
            })?;
            if old.shape() != t.shape() {
                return Err(Error::contract(format!(
                    "replacement for '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    old.shape()
                )));
            }
            params.insert(name, t);
        }
        Ok(ParamSet {
            config: self.config.clone(),
            params,
        })
    }

    /// Value-independent deep copy: every tensor becomes a fresh
    /// gradient-tracked leaf with its own storage.
    pub fn leaf_clone(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.leaf_copy()))
            .collect();
        ParamSet {
            config: self.config.clone(),
            params,
        }
    }

    /// Detached copy (no graph history, nothing gradient-tracked); useful for
    /// snapshots and serialization.
    pub fn detached(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.detach()))
            .collect();
        ParamSet {
            config: self.config.clone(),
            params,
        }
    }

    /// Which layer a parameter belongs to, or `None` for names that do not
    /// follow the scheme.
    pub fn layer_of(name: &str) -> Option<LayerRef> {
        if name == HEAD_W || name == HEAD_B {
            return Some(LayerRef::Head);
        }
        let rest = name.strip_prefix("enc.")?;
        let (idx, _) = rest.split_once('.')?;
        idx.parse().ok().map(LayerRef::Encoder)
    }

    /// Embed a `[n, input_dim]` batch using the layer-norm copy for
    /// `step_index`. Hidden layers normalize after the activation; the final
    /// layer normalizes before its tanh so the embedding stays strictly inside
    /// (-1, 1).
    pub fn encode(&self, x: &Tensor<R>, step_index: usize) -> Result<Tensor<R>> {
        if step_index > self.config.inner_steps {
            return Err(Error::contract(format!(
                "encode: step index {} exceeds adaptation depth K={}",
                step_index, self.config.inner_steps
            )));
        }
        if x.shape().len() != 2 || x.shape()[1] != self.config.input_dim {
            return Err(Error::contract(format!(
                "encode: expected [n, {}] input, got shape {:?}",
                self.config.input_dim,
                x.shape()
            )));
        }
        let copy = if self.config.per_step_layer_norm {
            step_index
        } else {
            0
        };
        let eps = R::from_f64_lossy(NORM_EPS);
        let n_layers = self.config.n_encoder_layers();
        let mut h = x.clone();
        for i in 0..n_layers {
            let w = self.get(&weight_key(i))?;
            let b = self.get(&bias_key(i))?;
            let gamma = self.get(&ln_key(i, copy, "gamma"))?;
            let beta = self.get(&ln_key(i, copy, "beta"))?;
            let z = h.matmul(&w.t()?)?.add(b)?;
            h = if i + 1 == n_layers {
                ops::layer_norm(&z, gamma, beta, eps)?.tanh()
            } else {
                ops::layer_norm(&z.tanh(), gamma, beta, eps)?
            };
        }
        Ok(h)
    }

    /// Linear head: `[n, d]` embeddings to `[n, C]` logits.
    pub fn classify(&self, embedding: &Tensor<R>) -> Result<Tensor<R>> {
        let d = self.config.output_dim;
        if embedding.shape().len() != 2 || embedding.shape()[1] != d {
            return Err(Error::contract(format!(
                "classify: expected [n, {d}] embeddings, got shape {:?}",
                embedding.shape()
            )));
        }
        let w = self.get(HEAD_W)?;
        let b = self.get(HEAD_B)?;
        embedding.matmul(&w.t()?)?.add(b)
    }

    /// Encode then classify.
    pub fn forward(&self, x: &Tensor<R>, step_index: usize) -> Result<Tensor<R>> {
        let emb = self.encode(x, step_index)?;
        self.classify(&emb)
    }

    /// Rebuild the head from per-class prototypes (`[C, d]`, row c = class c):
    /// `w_c = 2 mu_c`, `b_c = -|mu_c|^2`, optionally L2-normalizing each
    /// prototype first (which pins every bias at -1). The new head keeps its
    /// graph history, so gradients of later losses flow back into whatever
    /// produced the prototypes.
    pub fn set_head_from_prototypes(
        &self,
        prototypes: &Tensor<R>,
        normalize: bool,
    ) -> Result<Self> {
        let (c, d) = (self.config.n_classes, self.config.output_dim);
        if prototypes.shape() != [c, d] {
            return Err(Error::contract(format!(
                "set_head_from_prototypes: expected [{c}, {d}] prototypes, got {:?}",
                prototypes.shape()
            )));
        }
        let mu = if normalize {
            ops::l2_normalize_rows(prototypes, R::from_f64_lossy(NORM_EPS))?
        } else {
            prototypes.clone()
        };
        let two = R::from_f64_lossy(2.0);
        let w = mu.scale(two);
        let b = mu.mul(&mu)?.sum_axis(1, false)?.neg();
        self.with_replaced([(HEAD_W.to_string(), w), (HEAD_B.to_string(), b)])
    }
}

fn is_layer_norm_key(name: &str) -> bool {
    name.contains(".ln.")
}

fn glorot<R: Real>(rng: &mut impl Rng, fan_out: usize, fan_in: usize) -> Result<Tensor<R>> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_out * fan_in)
        .map(|_| R::from_f64_lossy(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::leaf(&[fan_out, fan_in], data)
}
