// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic decoder-style layer stack.
//!
//! ```text
//! tokens → embedding + position
//!   → for each layer:
//!       → LN1 → causal multi-head attention → residual add
//!       → LN2 → MLP (GELU) → residual add
//!   → final LN → output head → logits
//! ```
//!
//! Parameter blocks are held behind `Arc`, so an intervened view shares every
//! untouched block with its source model.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TaloError};
use crate::harness::McqItem;
use crate::linalg::{Linear, Matrix};

const NORM_EPS: f64 = 1e-5;

/// Shape and seed of a toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            model_dim: 32,
            num_heads: 4,
            mlp_dim: 64,
            vocab_size: 64,
            max_seq_len: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("mlp_dim", self.mlp_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(TaloError::InvalidConfig(format!("{name} must be ≥ 1")));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(TaloError::InvalidConfig(format!(
                "num_heads ({}) must divide model_dim ({})",
                self.num_heads, self.model_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Learned gain and shift of a layer norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
}

impl NormParams {
    fn identity(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        let n = x.cols() as f64;
        for t in 0..x.rows() {
            let row = out.row_mut(t);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gain[i] + self.shift[i];
            }
        }
        out
    }
}

/// Query, key, value and output projections of one attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    pub fn blocks(&self) -> [&Linear; 4] {
        [&self.query, &self.key, &self.value, &self.output]
    }

    pub fn try_map(&self, mut f: impl FnMut(usize, &Linear) -> Result<Linear>) -> Result<Self> {
        Ok(Self {
            query: f(0, &self.query)?,
            key: f(1, &self.key)?,
            value: f(2, &self.value)?,
            output: f(3, &self.output)?,
        })
    }
}

/// Up and down projections of one MLP block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub up: Linear,
    pub down: Linear,
}

impl MlpParams {
    pub fn blocks(&self) -> [&Linear; 2] {
        [&self.up, &self.down]
    }

    pub fn try_map(&self, mut f: impl FnMut(usize, &Linear) -> Result<Linear>) -> Result<Self> {
        Ok(Self {
            up: f(0, &self.up)?,
            down: f(1, &self.down)?,
        })
    }
}

/// One pre-norm residual layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attention_norm: Arc<NormParams>,
    pub attention: Arc<AttentionParams>,
    pub mlp_norm: Arc<NormParams>,
    pub mlp: Arc<MlpParams>,
}

/// Per-position hidden values, `[seq_len × model_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub values: Matrix,
}

/// Alternate forward paths used for instrumentation and equivalence checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Skip the attention computation at this layer and add an all-zero
    /// activation to the residual stream instead.
    pub bypass_attention: Option<usize>,
    /// Record the attention sub-block output (before the residual add) here.
    pub capture_attention: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStackModel {
    pub config: ModelConfig,
    pub embedding: Arc<Matrix>,
    pub positions: Arc<Matrix>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Arc<NormParams>,
    /// Unembedding, `[vocab_size × model_dim]`.
    pub output_head: Arc<Matrix>,
}

/// Builds the seeded toy model described by `config`.
///
/// Every matrix is drawn from a Gaussian scaled by `1/√model_dim` using a
/// ChaCha stream seeded from `config.seed`, so equal configs give
/// bit-identical parameters.
pub fn build_toy_model(config: ModelConfig) -> Result<LayerStackModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.model_dim;
    let scale = 1.0 / (d as f64).sqrt();

    let embedding = Matrix::gaussian(config.vocab_size, d, scale, &mut rng);
    let positions = Matrix::gaussian(config.max_seq_len, d, scale, &mut rng);
    let layers = (0..config.num_layers)
        .map(|_| {
            let attention = AttentionParams {
                query: Linear::gaussian(d, d, scale, &mut rng),
                key: Linear::gaussian(d, d, scale, &mut rng),
                value: Linear::gaussian(d, d, scale, &mut rng),
                output: Linear::gaussian(d, d, scale, &mut rng),
            };
            let mlp = MlpParams {
                up: Linear::gaussian(config.mlp_dim, d, scale, &mut rng),
                down: Linear::gaussian(d, config.mlp_dim, scale, &mut rng),
            };
            LayerParams {
                attention_norm: Arc::new(NormParams::identity(d)),
                attention: Arc::new(attention),
                mlp_norm: Arc::new(NormParams::identity(d)),
                mlp: Arc::new(mlp),
            }
        })
        .collect();
    let output_head = Matrix::gaussian(config.vocab_size, d, scale, &mut rng);

    Ok(LayerStackModel {
        config,
        embedding: Arc::new(embedding),
        positions: Arc::new(positions),
        layers,
        final_norm: Arc::new(NormParams::identity(d)),
        output_head: Arc::new(output_head),
    })
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Causal multi-head self-attention on already-normalized input.
fn attention_block(params: &AttentionParams, x: &Matrix, num_heads: usize) -> Matrix {
    let q = params.query.forward(x);
    let k = params.key.forward(x);
    let v = params.value.forward(x);
    let seq = x.rows();
    let dim = q.cols();
    let head_dim = dim / num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut mixed = Matrix::zeros(seq, dim);
    let mut weights = vec![0.0; seq];
    for h in 0..num_heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        for t in 0..seq {
            let qt = &q.row(t)[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for (s, w) in weights.iter_mut().enumerate().take(t + 1) {
                let ks = &k.row(s)[cols.clone()];
                let score = qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
                *w = score;
                max = max.max(score);
            }
            let mut total = 0.0;
            for w in weights.iter_mut().take(t + 1) {
                *w = (*w - max).exp();
                total += *w;
            }
            let dst = &mut mixed.row_mut(t)[cols.clone()];
            for (s, w) in weights.iter().enumerate().take(t + 1) {
                let p = w / total;
                for (o, vs) in dst.iter_mut().zip(&v.row(s)[cols.clone()]) {
                    *o += p * vs;
                }
            }
        }
    }
    params.output.forward(&mixed)
}

fn mlp_block(params: &MlpParams, x: &Matrix) -> Matrix {
    let mut hidden = params.up.forward(x);
    for h in hidden.as_mut_slice() {
        *h = gelu(*h);
    }
    params.down.forward(&hidden)
}

impl LayerStackModel {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn check_layer(&self, index: usize) -> Result<()> {
        if index >= self.num_layers() {
            return Err(TaloError::LayerOutOfRange {
                index,
                layers: self.num_layers(),
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(TaloError::InvalidInput("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(TaloError::InvalidInput(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(TaloError::InvalidInput(format!(
                "token id {bad} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits `[seq_len × vocab_size]` for `tokens`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        self.forward_with(tokens, ForwardOptions::default())
            .map(|(logits, _)| logits)
    }

    /// Forward pass with optional bypass or capture of one attention block.
    pub fn forward_with(
        &self,
        tokens: &[u32],
        options: ForwardOptions,
    ) -> Result<(Matrix, Option<Activation>)> {
        self.check_tokens(tokens)?;
        for layer in [options.bypass_attention, options.capture_attention]
            .into_iter()
            .flatten()
        {
            self.check_layer(layer)?;
        }

        let d = self.config.model_dim;
        let mut hidden = Matrix::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            let emb = self.embedding.row(tok as usize);
            let pos = self.positions.row(t);
            for ((h, e), p) in hidden.row_mut(t).iter_mut().zip(emb).zip(pos) {
                *h = e + p;
            }
        }

        let mut captured = None;
        for (index, layer) in self.layers.iter().enumerate() {
            let attn_out = if options.bypass_attention == Some(index) {
                Matrix::zeros(tokens.len(), d)
            } else {
                let normed = layer.attention_norm.forward(&hidden);
                attention_block(&layer.attention, &normed, self.config.num_heads)
            };
            if options.capture_attention == Some(index) {
                captured = Some(Activation {
                    values: attn_out.clone(),
                });
            }
            hidden.add_assign(&attn_out);

            let normed = layer.mlp_norm.forward(&hidden);
            hidden.add_assign(&mlp_block(&layer.mlp, &normed));
        }

        let normed = self.final_norm.forward(&hidden);
        let mut logits = Matrix::zeros(tokens.len(), self.config.vocab_size);
        for t in 0..normed.rows() {
            let x = normed.row(t);
            for (tok, out) in logits.row_mut(t).iter_mut().enumerate() {
                *out = self.output_head.row(tok).iter().zip(x).map(|(w, v)| w * v).sum();
            }
        }
        Ok((logits, captured))
    }

    /// Attention sub-block output at `layer_index`, before the residual add.
    pub fn capture_attention_output(&self, tokens: &[u32], layer_index: usize) -> Result<Activation> {
        self.check_layer(layer_index)?;
        let (_, captured) = self.forward_with(
            tokens,
            ForwardOptions {
                capture_attention: Some(layer_index),
                ..ForwardOptions::default()
            },
        )?;
        Ok(captured.expect("capture requested for a valid layer"))
    }

    /// Logits of each option token at the final prompt position.
    pub fn option_logits(&self, item: &McqItem) -> Result<Vec<f64>> {
        item.check_options()?;
        let logits = self.forward(&item.prompt_tokens)?;
        let last = logits.row(logits.rows() - 1);
        item.options
            .iter()
            .map(|&tok| {
                last.get(tok as usize).copied().ok_or_else(|| {
                    TaloError::InvalidInput(format!(
                        "option token {tok} out of range for vocab_size {}",
                        self.config.vocab_size
                    ))
                })
            })
            .collect()
    }

    /// Index of the option whose token has the largest final-position logit;
    /// ties go to the lowest index.
    pub fn predict_choice(&self, item: &McqItem) -> Result<usize> {
        let scores = self.option_logits(item)?;
        Ok(argmax_lowest(&scores))
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.is_finite()
            && self.positions.is_finite()
            && self.output_head.is_finite()
            && self.layers.iter().all(|l| {
                l.attention.blocks().iter().all(|b| b.is_finite())
                    && l.mlp.blocks().iter().all(|b| b.is_finite())
            })
    }
}

/// First index of the maximum.
pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
