// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"TALOCKPT"
//! version  u32 (= 1)
//! config   u32 length + JSON-encoded ModelConfig
//! tensors  repeated: u32 rows, u32 cols, rows*cols f64
//! ```
//!
//! Tensor order: embedding, positions, then per layer the attention norm
//! (gain, shift), query/key/value/output (weight, bias), the MLP norm
//! (gain, shift), up/down (weight, bias); then the final norm and the output
//! head. Floats are stored as raw bits so a save/load round trip is exact.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Result, TaloError};
use crate::linalg::{Linear, Matrix};
use crate::model::{
    AttentionParams, LayerParams, LayerStackModel, MlpParams, ModelConfig, NormParams,
};

const MAGIC: &[u8; 8] = b"TALOCKPT";
const VERSION: u32 = 1;

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn tensor(&mut self, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
        self.u32(rows as u32)?;
        self.u32(cols as u32)?;
        for v in data {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    fn matrix(&mut self, m: &Matrix) -> Result<()> {
        self.tensor(m.rows(), m.cols(), m.as_slice())
    }

    fn vector(&mut self, v: &[f64]) -> Result<()> {
        self.tensor(1, v.len(), v)
    }

    fn linear(&mut self, l: &Linear) -> Result<()> {
        self.matrix(&l.weight)?;
        self.vector(&l.bias)
    }

    fn norm(&mut self, n: &NormParams) -> Result<()> {
        self.vector(&n.gain)?;
        self.vector(&n.shift)
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| TaloError::Checkpoint(format!("truncated checkpoint: {e}")))?;
        Ok(u32::from_le_bytes(buf))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let (r, c) = (self.u32()? as usize, self.u32()? as usize);
        if (r, c) != (rows, cols) {
            return Err(TaloError::Checkpoint(format!(
                "expected a {rows}x{cols} tensor, found {r}x{c}"
            )));
        }
        let mut data = Vec::with_capacity(r * c);
        let mut buf = [0u8; 8];
        for _ in 0..r * c {
            self.inner
                .read_exact(&mut buf)
                .map_err(|e| TaloError::Checkpoint(format!("truncated checkpoint: {e}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        Matrix::from_vec(r, c, data)
    }

    fn vector(&mut self, len: usize) -> Result<Vec<f64>> {
        Ok(self.matrix(1, len)?.into_vec())
    }

    fn linear(&mut self, out_dim: usize, in_dim: usize) -> Result<Linear> {
        let weight = self.matrix(out_dim, in_dim)?;
        let bias = self.vector(out_dim)?;
        Linear::new(weight, bias)
    }

    fn norm(&mut self, dim: usize) -> Result<NormParams> {
        Ok(NormParams {
            gain: self.vector(dim)?,
            shift: self.vector(dim)?,
        })
    }
}

pub fn write_checkpoint<W: Write>(model: &LayerStackModel, out: W) -> Result<()> {
    let mut w = Writer { inner: out };
    w.inner.write_all(MAGIC)?;
    w.u32(VERSION)?;
    let config = serde_json::to_vec(&model.config)?;
    w.u32(config.len() as u32)?;
    w.inner.write_all(&config)?;

    w.matrix(&model.embedding)?;
    w.matrix(&model.positions)?;
    for layer in &model.layers {
        w.norm(&layer.attention_norm)?;
        for block in layer.attention.blocks() {
            w.linear(block)?;
        }
        w.norm(&layer.mlp_norm)?;
        for block in layer.mlp.blocks() {
            w.linear(block)?;
        }
    }
    w.norm(&model.final_norm)?;
    w.matrix(&model.output_head)?;
    w.inner.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<LayerStackModel> {
    let mut r = Reader { inner: input };
    let mut magic = [0u8; 8];
    r.inner
        .read_exact(&mut magic)
        .map_err(|_| TaloError::Checkpoint("missing magic header".into()))?;
    if &magic != MAGIC {
        return Err(TaloError::Checkpoint("not a model checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TaloError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = r.u32()? as usize;
    let mut config_bytes = vec![0u8; len];
    r.inner
        .read_exact(&mut config_bytes)
        .map_err(|e| TaloError::Checkpoint(format!("truncated config: {e}")))?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)?;
    config.validate()?;

    let d = config.model_dim;
    let embedding = r.matrix(config.vocab_size, d)?;
    let positions = r.matrix(config.max_seq_len, d)?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        let attention_norm = r.norm(d)?;
        let attention = AttentionParams {
            query: r.linear(d, d)?,
            key: r.linear(d, d)?,
            value: r.linear(d, d)?,
            output: r.linear(d, d)?,
        };
        let mlp_norm = r.norm(d)?;
        let mlp = MlpParams {
            up: r.linear(config.mlp_dim, d)?,
            down: r.linear(d, config.mlp_dim)?,
        };
        layers.push(LayerParams {
            attention_norm: Arc::new(attention_norm),
            attention: Arc::new(attention),
            mlp_norm: Arc::new(mlp_norm),
            mlp: Arc::new(mlp),
        });
    }
    let final_norm = r.norm(d)?;
    let output_head = r.matrix(config.vocab_size, d)?;

    Ok(LayerStackModel {
        config,
        embedding: Arc::new(embedding),
        positions: Arc::new(positions),
        layers,
        final_norm: Arc::new(final_norm),
        output_head: Arc::new(output_head),
    })
}

pub fn save_checkpoint(model: &LayerStackModel, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(model, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LayerStackModel> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intervention::{apply, InterventionKind, InterventionSpec, Target};
    use crate::model::build_toy_model;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = build_toy_model(ModelConfig {
            seed: 11,
            ..ModelConfig::default()
        })
        .unwrap();
        // an intervened view exercises non-default blocks too
        let view = apply(
            &model,
            &InterventionSpec::new(InterventionKind::RandomNoise(5), Target::Mlp, 2),
        )
        .unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&view, &mut bytes).unwrap();
        let loaded = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(loaded, view);

        let mut again = Vec::new();
        write_checkpoint(&loaded, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncated_and_foreign_files_fail() {
        let model = build_toy_model(ModelConfig::default()).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model, &mut bytes).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(read_checkpoint(&b"NOTACKPT\x01\0\0\0"[..]).is_err());
    }
}
