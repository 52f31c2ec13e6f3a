// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parameter interventions on a single attention or MLP module.
//!
//! An intervention never mutates its source model. [`apply`] returns a new
//! model that shares every untouched parameter block with the source and owns
//! fresh copies of the transformed ones.
//!
//! Textual encoding used on the command line and on the wire:
//! `kind:target:layer[:seed]`, e.g. `zero:attn:13` or `noise:mlp:2:99`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TaloError};
use crate::linalg::{Linear, Matrix};
use crate::model::LayerStackModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InterventionKind {
    /// All weights and biases set to zero.
    Zeroing,
    /// Every weight set to `1/rows`, every bias entry to `1/len(bias)`.
    UniformScaling,
    /// Every weight set to the matrix mean, every bias entry to the bias mean.
    MeanReplacement,
    /// Refill from `N(0, σ²)` with σ the original per-tensor std.
    RandomNoise(u64),
}

impl InterventionKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Zeroing => "zero",
            Self::UniformScaling => "uniform",
            Self::MeanReplacement => "mean",
            Self::RandomNoise(_) => "noise",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Self::RandomNoise(seed) => Some(*seed),
            _ => None,
        }
    }

    /// Parses a kind name; `noise` takes its seed from `seed`.
    pub fn parse(name: &str, seed: Option<u64>) -> Result<Self> {
        match (name, seed) {
            ("zero", None) => Ok(Self::Zeroing),
            ("uniform", None) => Ok(Self::UniformScaling),
            ("mean", None) => Ok(Self::MeanReplacement),
            ("noise", Some(s)) => Ok(Self::RandomNoise(s)),
            ("noise", None) => Err(TaloError::Intervention("noise requires a seed".into())),
            ("zero" | "uniform" | "mean", Some(_)) => Err(TaloError::Intervention(format!(
                "{name} does not take a seed"
            ))),
            _ => Err(TaloError::Intervention(format!(
                "unknown intervention kind `{name}`"
            ))),
        }
    }
}

impl fmt::Display for InterventionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::RandomNoise(seed) => write!(f, "noise({seed})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    Attention,
    Mlp,
}

impl Target {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Attention => "attn",
            Self::Mlp => "mlp",
        }
    }
}

impl FromStr for Target {
    type Err = TaloError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn" => Ok(Self::Attention),
            "mlp" => Ok(Self::Mlp),
            _ => Err(TaloError::Intervention(format!("unknown target `{s}`"))),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub kind: InterventionKind,
    pub target: Target,
    pub layer: usize,
}

impl InterventionSpec {
    pub fn new(kind: InterventionKind, target: Target, layer: usize) -> Self {
        Self {
            kind,
            target,
            layer,
        }
    }

    pub fn zero_attention(layer: usize) -> Self {
        Self::new(InterventionKind::Zeroing, Target::Attention, layer)
    }
}

impl fmt::Display for InterventionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.kind.name(), self.target, self.layer)?;
        if let Some(seed) = self.kind.seed() {
            write!(f, ":{seed}")?;
        }
        Ok(())
    }
}

impl FromStr for InterventionSpec {
    type Err = TaloError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(TaloError::Intervention(format!(
                "`{s}` is not of the form kind:target:layer[:seed]"
            )));
        }
        let seed = match parts.get(3) {
            Some(raw) => Some(raw.parse::<u64>().map_err(|_| {
                TaloError::Intervention(format!("bad seed `{raw}` in `{s}`"))
            })?),
            None => None,
        };
        let kind = InterventionKind::parse(parts[0], seed)?;
        let target = parts[1].parse()?;
        let layer = parts[2]
            .parse::<usize>()
            .map_err(|_| TaloError::Intervention(format!("bad layer `{}` in `{s}`", parts[2])))?;
        Ok(Self::new(kind, target, layer))
    }
}

impl Serialize for InterventionSpecText {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(&self.0)
    }
}

/// Serde adapter carrying an [`InterventionSpec`] as its text encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterventionSpecText(pub InterventionSpec);

impl<'de> Deserialize<'de> for InterventionSpecText {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse()
            .map(InterventionSpecText)
            .map_err(serde::de::Error::custom)
    }
}

/// Mean of `values`; exact when all entries are equal.
fn exact_mean(values: &[f64]) -> f64 {
    let first = values[0];
    if values.iter().all(|v| *v == first) {
        return first;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn noise_fill(values: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let std = population_std(values);
    if std == 0.0 {
        return vec![0.0; values.len()];
    }
    let normal = Normal::new(0.0, std).expect("finite positive std");
    values.iter().map(|_| normal.sample(rng)).collect()
}

/// Applies `kind` to one weight matrix and its bias.
pub fn transform_parameters(block: &Linear, kind: &InterventionKind) -> Result<Linear> {
    if block.weight.is_empty() || block.bias.is_empty() {
        return Err(TaloError::Intervention("empty parameter block".into()));
    }
    if !block.is_finite() {
        return Err(TaloError::Intervention(
            "parameter block has non-finite entries".into(),
        ));
    }
    let (rows, cols) = block.weight.shape();
    let bias_len = block.bias.len();
    let (weight, bias) = match kind {
        InterventionKind::Zeroing => (Matrix::zeros(rows, cols), vec![0.0; bias_len]),
        InterventionKind::UniformScaling => (
            Matrix::filled(rows, cols, 1.0 / rows as f64),
            vec![1.0 / bias_len as f64; bias_len],
        ),
        InterventionKind::MeanReplacement => (
            Matrix::filled(rows, cols, exact_mean(block.weight.as_slice())),
            vec![exact_mean(&block.bias); bias_len],
        ),
        InterventionKind::RandomNoise(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let weight = Matrix::from_vec(rows, cols, noise_fill(block.weight.as_slice(), &mut rng))?;
            let bias = noise_fill(&block.bias, &mut rng);
            (weight, bias)
        }
    };
    Linear::new(weight, bias)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Gives every block of a module its own noise stream.
fn block_kind(spec: &InterventionSpec, block: usize) -> InterventionKind {
    match spec.kind {
        InterventionKind::RandomNoise(seed) => {
            let target = match spec.target {
                Target::Attention => 0,
                Target::Mlp => 1,
            };
            let mixed = splitmix64(seed)
                ^ splitmix64(((spec.layer as u64) << 8) | (target << 4) | block as u64);
            InterventionKind::RandomNoise(splitmix64(mixed))
        }
        other => other,
    }
}

fn apply_in_place(view: &mut LayerStackModel, spec: &InterventionSpec) -> Result<()> {
    view.check_layer(spec.layer)?;
    let layer = &mut view.layers[spec.layer];
    match spec.target {
        Target::Attention => {
            let fresh = layer
                .attention
                .try_map(|i, block| transform_parameters(block, &block_kind(spec, i)))?;
            layer.attention = Arc::new(fresh);
        }
        Target::Mlp => {
            let fresh = layer
                .mlp
                .try_map(|i, block| transform_parameters(block, &block_kind(spec, i)))?;
            layer.mlp = Arc::new(fresh);
        }
    }
    Ok(())
}

/// Returns a view of `model` with exactly one module of one layer transformed.
pub fn apply(model: &LayerStackModel, spec: &InterventionSpec) -> Result<LayerStackModel> {
    let mut view = model.clone();
    apply_in_place(&mut view, spec)?;
    Ok(view)
}

/// Applies several interventions on pairwise distinct `(layer, target)` slots.
pub fn apply_many(model: &LayerStackModel, specs: &[InterventionSpec]) -> Result<LayerStackModel> {
    let mut seen = HashSet::new();
    for spec in specs {
        if !seen.insert((spec.layer, spec.target)) {
            return Err(TaloError::Intervention(format!(
                "duplicate intervention on layer {} {}",
                spec.layer, spec.target
            )));
        }
    }
    let mut view = model.clone();
    for spec in specs {
        apply_in_place(&mut view, spec)?;
    }
    Ok(view)
}
