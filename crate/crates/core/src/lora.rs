//! Low-rank adapters on attention query/value projections.
//!
//! Each target carries a pair `A (r × k)`, `B (d × r)` so that the projection
//! used at forward time is `W* + s·B·A`. `B` starts at zero, which makes a
//! fresh adapter an exact no-op on the frozen base.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientMap, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Value,
}

impl Projection {
    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Value => "value",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Target {
    pub layer: usize,
    pub proj: Projection,
}

impl Target {
    pub fn new(layer: usize, proj: Projection) -> Self {
        Self { layer, proj }
    }

    /// Query and value projections of every layer.
    pub fn all_query_value(n_layers: usize) -> Vec<Target> {
        (0..n_layers)
            .flat_map(|l| [Target::new(l, Projection::Query), Target::new(l, Projection::Value)])
            .collect()
    }

    pub fn param_name(&self, factor: Factor) -> String {
        format!("layers.{}.{}.{}", self.layer, self.proj.as_str(), factor.suffix())
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.proj.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factor {
    A,
    B,
}

impl Factor {
    pub fn suffix(self) -> &'static str {
        match self {
            Factor::A => "lora_a",
            Factor::B => "lora_b",
        }
    }

    /// Classifies a trainable tensor name.
    pub fn of_name(name: &str) -> Option<Factor> {
        if name.ends_with(".lora_a") {
            Some(Factor::A)
        } else if name.ends_with(".lora_b") {
            Some(Factor::B)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `s = alpha / r`
    #[default]
    AlphaOverR,
    /// `s = alpha`
    LiteralAlpha,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetFactors<S = f64> {
    pub target: Target,
    /// `r × k`
    pub a: Matrix<S>,
    /// `d × r`
    pub b: Matrix<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<S = f64> {
    pub factors: Vec<TargetFactors<S>>,
    pub rank: usize,
    pub alpha: f64,
    pub scale_mode: ScaleMode,
    pub init_seed: u64,
    /// Dropout rate on the adapter input during training.
    pub dropout: f64,
}

impl<S: Scalar> LoraAdapter<S> {
    pub fn scale(&self) -> S {
        S::of(match self.scale_mode {
            ScaleMode::AlphaOverR => self.alpha / self.rank as f64,
            ScaleMode::LiteralAlpha => self.alpha,
        })
    }

    pub fn factor_index(&self, layer: usize, proj: Projection) -> Option<usize> {
        self.factors
            .iter()
            .position(|f| f.target.layer == layer && f.target.proj == proj)
    }

    pub fn get(&self, target: Target) -> Option<&TargetFactors<S>> {
        self.factors.iter().find(|f| f.target == target)
    }

    pub fn targets(&self) -> Vec<Target> {
        self.factors.iter().map(|f| f.target).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.factors.iter().map(|f| f.a.len() + f.b.len()).sum()
    }

    pub fn named_params(&self) -> GradientMap<S> {
        let mut out = GradientMap::new();
        for f in &self.factors {
            out.insert(f.target.param_name(Factor::A), f.a.clone());
            out.insert(f.target.param_name(Factor::B), f.b.clone());
        }
        out
    }

    pub(crate) fn named_grads(&self, grads: Vec<(Matrix<S>, Matrix<S>)>) -> GradientMap<S> {
        let mut out = GradientMap::new();
        for (f, (da, db)) in self.factors.iter().zip(grads) {
            out.insert(f.target.param_name(Factor::A), da);
            out.insert(f.target.param_name(Factor::B), db);
        }
        out
    }

    /// Overwrites factors from a named map produced by [`Self::named_params`].
    pub fn load_named(&mut self, named: &GradientMap<S>) -> Result<()> {
        for f in &mut self.factors {
            for (factor, slot) in [(Factor::A, &mut f.a), (Factor::B, &mut f.b)] {
                let name = f.target.param_name(factor);
                let src = named
                    .get(&name)
                    .ok_or_else(|| Error::UnknownTarget(name.clone()))?;
                if src.shape() != slot.shape() {
                    return Err(Error::Shape(format!("`{name}` has shape {:?}", src.shape())));
                }
                slot.as_mut_slice().copy_from_slice(src.as_slice());
            }
        }
        Ok(())
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Matrix<S>)) {
        for tf in &mut self.factors {
            f(&tf.target.param_name(Factor::A), &mut tf.a);
            f(&tf.target.param_name(Factor::B), &mut tf.b);
        }
    }

    pub fn norms(&self) -> (f64, f64) {
        let sq = |get: fn(&TargetFactors<S>) -> &Matrix<S>| {
            self.factors
                .iter()
                .map(|f| get(f).frobenius_norm().as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        };
        (sq(|f| &f.a), sq(|f| &f.b))
    }

    pub fn convert<T: Scalar>(&self) -> LoraAdapter<T> {
        LoraAdapter {
            factors: self
                .factors
                .iter()
                .map(|f| TargetFactors {
                    target: f.target,
                    a: f.a.convert(),
                    b: f.b.convert(),
                })
                .collect(),
            rank: self.rank,
            alpha: self.alpha,
            scale_mode: self.scale_mode,
            init_seed: self.init_seed,
            dropout: self.dropout,
        }
    }
}

/// Hyper-parameters shared by every adapter of an ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
    pub scale_mode: ScaleMode,
    pub dropout: f64,
    /// Defaults to query and value on every layer when empty.
    pub targets: Vec<Target>,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 32.0,
            scale_mode: ScaleMode::AlphaOverR,
            dropout: 0.0,
            targets: Vec::new(),
        }
    }
}

impl AdapterSpec {
    pub fn resolved_targets(&self, config: &ModelConfig) -> Vec<Target> {
        if self.targets.is_empty() {
            Target::all_query_value(config.n_layers)
        } else {
            self.targets.clone()
        }
    }

    pub fn parameter_count(&self, config: &ModelConfig) -> usize {
        let d = config.d_model;
        self.resolved_targets(config).len() * (d * self.rank + self.rank * d)
    }
}

/// Builds a fresh adapter: `B = 0`, `A ~ U(−√(6/k), √(6/k))` with `k` the
/// projection's input width, drawn target by target from a stream seeded by
/// `seed`.
pub fn init_adapter<S: Scalar>(
    config: &ModelConfig,
    targets: &[Target],
    rank: usize,
    alpha: f64,
    scale_mode: ScaleMode,
    seed: u64,
) -> Result<LoraAdapter<S>> {
    if rank == 0 {
        return Err(Error::invalid("adapter rank must be at least 1"));
    }
    if targets.is_empty() {
        return Err(Error::invalid("adapter needs at least one target"));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let (d, k) = (config.d_model, config.d_model);
    if rank > d.min(k) {
        return Err(Error::invalid(format!("rank {rank} exceeds min(d, k) = {}", d.min(k))));
    }
    let mut seen = std::collections::BTreeSet::new();
    for t in targets {
        if t.layer >= config.n_layers {
            return Err(Error::UnknownTarget(t.to_string()));
        }
        if !seen.insert(*t) {
            return Err(Error::invalid(format!("duplicate target {t}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (6.0 / k as f64).sqrt();
    let factors = targets
        .iter()
        .map(|&target| TargetFactors {
            target,
            a: Matrix::from_fn(rank, k, |_, _| S::of(rng.random_range(-bound..bound))),
            b: Matrix::zeros(d, rank),
        })
        .collect();
    Ok(LoraAdapter {
        factors,
        rank,
        alpha,
        scale_mode,
        init_seed: seed,
        dropout: 0.0,
    })
}

pub fn init_from_spec<S: Scalar>(config: &ModelConfig, spec: &AdapterSpec, seed: u64) -> Result<LoraAdapter<S>> {
    if !(0.0..1.0).contains(&spec.dropout) {
        return Err(Error::invalid(format!("adapter dropout {} outside [0, 1)", spec.dropout)));
    }
    let mut a = init_adapter(config, &spec.resolved_targets(config), spec.rank, spec.alpha, spec.scale_mode, seed)?;
    a.dropout = spec.dropout;
    Ok(a)
}

/// `s · B · A` for one target.
pub fn effective_delta<S: Scalar>(adapter: &LoraAdapter<S>, target: Target) -> Result<Matrix<S>> {
    let f = adapter
        .get(target)
        .ok_or_else(|| Error::UnknownTarget(target.to_string()))?;
    let mut delta = f.b.matmul(&f.a);
    delta.scale(adapter.scale());
    Ok(delta)
}

/// Canonical adapter file name for ensemble member `index`.
pub fn adapter_file_name(index: usize, seed: u64) -> String {
    format!("member-{index:02}.seed-{seed}.adapter")
}
