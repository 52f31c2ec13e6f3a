// SPDX-License-Identifier: MIT OR Apache-2.0

//! The run manifest written next to every set of outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use talo_core::{InterventionKind, ModelConfig, Target};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Sweep,
    Talo,
    Cluster,
    Consistency,
    Ablate,
    Plant,
}

/// Where evaluations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// A toy model rebuilt from its configuration.
    Builtin(ModelConfig),
    /// A binary checkpoint on disk.
    Checkpoint(PathBuf),
    /// A protocol endpoint such as `tcp://127.0.0.1:7000`.
    Endpoint(String),
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSource>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suites: Vec<PathBuf>,
    /// Sweep CSVs used instead of a live model by `cluster` and `consistency`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweeps: Vec<PathBuf>,
    /// Kind encodings: `zero`, `uniform`, `mean` or `noise:<seed>`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kinds: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pair: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite_size: Option<usize>,
    pub out: PathBuf,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }

    pub fn parsed_kinds(&self) -> Result<Vec<InterventionKind>> {
        self.kinds.iter().map(|k| parse_kind(k)).collect()
    }

    pub fn parsed_targets(&self) -> Result<Vec<Target>> {
        self.targets
            .iter()
            .map(|t| t.parse::<Target>().map_err(Into::into))
            .collect()
    }
}

/// Parses `zero`, `uniform`, `mean` or `noise:<seed>`.
pub fn parse_kind(text: &str) -> Result<InterventionKind> {
    let (name, seed) = match text.split_once(':') {
        Some((name, seed)) => {
            let seed = seed
                .parse::<u64>()
                .with_context(|| format!("bad noise seed in `{text}`"))?;
            (name, Some(seed))
        }
        None => (text, None),
    };
    Ok(InterventionKind::parse(name, seed)?)
}

pub fn kind_text(kind: InterventionKind) -> String {
    match kind.seed() {
        Some(seed) => format!("{}:{seed}", kind.name()),
        None => kind.name().to_string(),
    }
}

/// Normalizes a user-supplied kind, attaching `default_seed` to a bare `noise`.
pub fn normalize_kind(text: &str, default_seed: u64) -> Result<String> {
    if text == "noise" {
        return Ok(format!("noise:{default_seed}"));
    }
    Ok(kind_text(parse_kind(text)?))
}

/// Absolute form of an existing input path.
pub fn absolute_input(path: &Path) -> Result<PathBuf> {
    if !path.exists() {
        bail!("input {} does not exist", path.display());
    }
    fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))
}

/// Creates `path` if needed and returns its absolute form.
pub fn absolute_output(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).with_context(|| format!("creating output directory {}", path.display()))?;
    fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))
}
