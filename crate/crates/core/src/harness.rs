// SPDX-License-Identifier: MIT OR Apache-2.0

//! Multiple-choice task suites, probe/held-out splits, accuracy, and planted
//! interference instances.
//!
//! Task suite files are line oriented:
//!
//! ```text
//! #suite task_id=geometry vocab_size=64
//! q000,3 17 22 5,60 61 62 63,2
//! q001,9 4,60 61,0
//! ```
//!
//! Each record is `id,prompt tokens,option tokens,answer_index` with token
//! lists space separated. Blank lines and lines starting with `#` after the
//! header are ignored.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TaloError};
use crate::intervention::{apply_many, InterventionSpec};
use crate::model::{build_toy_model, LayerStackModel, ModelConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    pub prompt_tokens: Vec<u32>,
    pub options: Vec<u32>,
    pub answer_index: usize,
}

impl McqItem {
    pub(crate) fn check_options(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(TaloError::InvalidInput(format!(
                "item `{}` has fewer than 2 options",
                self.id
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.options.iter().find(|o| !seen.insert(**o)) {
            return Err(TaloError::InvalidInput(format!(
                "item `{}` repeats option token {dup}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_options()?;
        if self.prompt_tokens.is_empty() {
            return Err(TaloError::InvalidInput(format!(
                "item `{}` has an empty prompt",
                self.id
            )));
        }
        if self.answer_index >= self.options.len() {
            return Err(TaloError::InvalidInput(format!(
                "item `{}` answer_index {} out of range for {} options",
                self.id,
                self.answer_index,
                self.options.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSuite {
    pub task_id: String,
    pub vocab_size: usize,
    pub items: Vec<McqItem>,
}

impl TaskSuite {
    pub fn new(task_id: impl Into<String>, vocab_size: usize, items: Vec<McqItem>) -> Result<Self> {
        let suite = Self {
            task_id: task_id.into(),
            vocab_size,
            items,
        };
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(TaloError::Suite(format!("task `{}` has no items", self.task_id)));
        }
        let mut ids = HashSet::new();
        for item in &self.items {
            if !ids.insert(item.id.as_str()) {
                return Err(TaloError::Suite(format!("duplicate item id `{}`", item.id)));
            }
            item.validate().map_err(|e| TaloError::Suite(e.to_string()))?;
            if let Some(t) = item
                .prompt_tokens
                .iter()
                .chain(&item.options)
                .find(|&&t| t as usize >= self.vocab_size)
            {
                return Err(TaloError::Suite(format!(
                    "item `{}` uses token {t} outside vocab_size {}",
                    item.id, self.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "#suite task_id={} vocab_size={}\n",
            self.task_id, self.vocab_size
        );
        let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
        for item in &self.items {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                item.id,
                join(&item.prompt_tokens),
                join(&item.options),
                item.answer_index
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| TaloError::Suite("empty suite file".into()))?;
        let header = header
            .strip_prefix("#suite")
            .ok_or_else(|| TaloError::Suite("line 1: missing `#suite` header".into()))?;
        let mut task_id = None;
        let mut vocab_size = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("task_id", v)) => task_id = Some(v.to_string()),
                Some(("vocab_size", v)) => {
                    vocab_size = Some(v.parse::<usize>().map_err(|_| {
                        TaloError::Suite(format!("line 1: bad vocab_size `{v}`"))
                    })?)
                }
                _ => {}
            }
        }
        let task_id = task_id.ok_or_else(|| TaloError::Suite("line 1: missing task_id".into()))?;
        let vocab_size =
            vocab_size.ok_or_else(|| TaloError::Suite("line 1: missing vocab_size".into()))?;

        let mut items = Vec::new();
        for (n, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = n + 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(TaloError::Suite(format!(
                    "line {lineno}: expected 4 comma-separated fields, got {}",
                    fields.len()
                )));
            }
            let tokens = |raw: &str| -> Result<Vec<u32>> {
                raw.split_whitespace()
                    .map(|t| {
                        t.parse::<u32>().map_err(|_| {
                            TaloError::Suite(format!("line {lineno}: bad token `{t}`"))
                        })
                    })
                    .collect()
            };
            items.push(McqItem {
                id: fields[0].trim().to_string(),
                prompt_tokens: tokens(fields[1])?,
                options: tokens(fields[2])?,
                answer_index: fields[3].trim().parse().map_err(|_| {
                    TaloError::Suite(format!("line {lineno}: bad answer_index `{}`", fields[3]))
                })?,
            });
        }
        Self::new(task_id, vocab_size, items)
    }
}

pub fn load_task_suite(path: impl AsRef<Path>) -> Result<TaskSuite> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    TaskSuite::parse(&text).map_err(|e| TaloError::Suite(format!("{}: {e}", path.display())))
}

pub fn save_task_suite(suite: &TaskSuite, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, suite.to_text())?;
    Ok(())
}

/// Exact accuracy as a count ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Score {
    pub correct: usize,
    pub total: usize,
}

impl Score {
    pub fn fraction(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn is_perfect(&self) -> bool {
        self.correct == self.total
    }
}

/// Prediction for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub id: String,
    pub predicted: usize,
    pub correct: bool,
}

pub fn score_outcomes(outcomes: &[ItemOutcome]) -> Result<Score> {
    if outcomes.is_empty() {
        return Err(TaloError::InvalidInput("accuracy of an empty item list".into()));
    }
    Ok(Score {
        correct: outcomes.iter().filter(|o| o.correct).count(),
        total: outcomes.len(),
    })
}

/// Runs `predict` over `items` in parallel; outcomes keep item order.
pub fn evaluate_items<F>(predict: F, items: &[McqItem]) -> Result<Vec<ItemOutcome>>
where
    F: Fn(&McqItem) -> Result<usize> + Sync,
{
    items
        .par_iter()
        .map(|item| {
            let predicted = predict(item)?;
            Ok(ItemOutcome {
                id: item.id.clone(),
                predicted,
                correct: predicted == item.answer_index,
            })
        })
        .collect()
}

/// Fraction of `items` for which `predict` returns the answer index.
pub fn accuracy<F>(predict: F, items: &[McqItem]) -> Result<Score>
where
    F: Fn(&McqItem) -> Result<usize> + Sync,
{
    if items.is_empty() {
        return Err(TaloError::InvalidInput("accuracy of an empty item list".into()));
    }
    score_outcomes(&evaluate_items(predict, items)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSet {
    pub task_id: String,
    pub items: Vec<McqItem>,
    pub shots: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeldOutSet {
    pub task_id: String,
    pub items: Vec<McqItem>,
}

/// Seeded stream over a suite from which probe items are drawn without
/// replacement. Items never drawn form the held-out set.
#[derive(Debug, Clone)]
pub struct ProbePool {
    task_id: String,
    order: Vec<McqItem>,
    cursor: usize,
    reserve: usize,
}

impl ProbePool {
    /// `reserve` items at the end of the stream are never handed out.
    pub fn new(suite: &TaskSuite, seed: u64, reserve: usize) -> Self {
        let mut order = suite.items.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        Self {
            task_id: suite.task_id.clone(),
            order,
            cursor: 0,
            reserve,
        }
    }

    pub fn available(&self) -> usize {
        self.order.len().saturating_sub(self.reserve + self.cursor)
    }

    pub fn draw(&mut self, n: usize) -> Result<Vec<McqItem>> {
        if n > self.available() {
            return Err(TaloError::PoolExhausted(format!(
                "task `{}`: requested {n} probe items, {} left",
                self.task_id,
                self.available()
            )));
        }
        let out = self.order[self.cursor..self.cursor + n].to_vec();
        self.cursor += n;
        Ok(out)
    }

    pub fn drawn(&self) -> &[McqItem] {
        &self.order[..self.cursor]
    }

    /// Every item not yet drawn, in stream order.
    pub fn held_out(&self) -> HeldOutSet {
        HeldOutSet {
            task_id: self.task_id.clone(),
            items: self.order[self.cursor..].to_vec(),
        }
    }
}

/// Splits `suite` into a `shots`-item probe and the remaining held-out items.
pub fn sample_probe_set(suite: &TaskSuite, shots: usize, seed: u64) -> Result<(ProbeSet, HeldOutSet)> {
    if shots == 0 {
        return Err(TaloError::InvalidInput("shots must be ≥ 1".into()));
    }
    if shots >= suite.len() {
        return Err(TaloError::InvalidInput(format!(
            "shots ({shots}) must be smaller than the suite size ({})",
            suite.len()
        )));
    }
    let mut pool = ProbePool::new(suite, seed, 0);
    let items = pool.draw(shots)?;
    Ok((
        ProbeSet {
            task_id: suite.task_id.clone(),
            items,
            shots,
            seed,
        },
        pool.held_out(),
    ))
}

/// Attempts made by [`plant_interference`] before giving up.
pub const MAX_PLANT_ATTEMPTS: u64 = 64;
/// Base accuracy a planted instance must not exceed.
pub const PLANT_MAX_BASE_ACCURACY: f64 = 0.9;
const OPTIONS_PER_ITEM: usize = 8;

/// A model with a suite labelled by its knocked-out teacher view.
#[derive(Debug, Clone)]
pub struct PlantedInstance {
    pub model: LayerStackModel,
    pub suite: TaskSuite,
    /// Layers whose attention is zeroed in the teacher view, ascending.
    pub planted_layers: Vec<usize>,
    pub attempts: u64,
}

impl PlantedInstance {
    pub fn planted_layer(&self) -> usize {
        self.planted_layers[0]
    }
}

fn mix_seed(seed: u64, attempt: u64) -> u64 {
    let mut z = seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z = (z ^ (z >> 33)).wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    z ^ (z >> 33)
}

fn random_items(config: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<McqItem> {
    let max_len = config.max_seq_len.min(12);
    let min_len = max_len.min(4);
    let num_options = OPTIONS_PER_ITEM.min(config.vocab_size);
    let vocab: Vec<u32> = (0..config.vocab_size as u32).collect();
    (0..n)
        .map(|i| {
            let len = rng.random_range(min_len..=max_len);
            let prompt_tokens = (0..len)
                .map(|_| rng.random_range(0..config.vocab_size as u32))
                .collect();
            let options = vocab.choose_multiple(rng, num_options).copied().collect();
            McqItem {
                id: format!("q{i:04}"),
                prompt_tokens,
                options,
                answer_index: 0,
            }
        })
        .collect()
}

fn zero_all(layers: &[usize]) -> Vec<InterventionSpec> {
    layers.iter().map(|&l| InterventionSpec::zero_attention(l)).collect()
}

fn agreement(model: &LayerStackModel, items: &[McqItem]) -> Result<Score> {
    accuracy(|item| model.predict_choice(item), items)
}

/// Builds a model and a suite whose labels are the predictions of the model
/// with the attention of one planted layer zeroed.
///
/// Seeds are resampled until the unmodified model scores at most 0.9 and the
/// planted layer is the only single-layer knockout reaching 1.0.
pub fn plant_interference(config: ModelConfig, suite_size: usize, seed: u64) -> Result<PlantedInstance> {
    plant(config, suite_size, seed, 1)
}

/// Two-layer variant of [`plant_interference`]: labels come from the model
/// with both planted layers zeroed.
///
/// Accepted instances additionally have one of the planted layers as the
/// unique best single-layer knockout and the planted pair as the only pair
/// reaching 1.0.
pub fn plant_interference_pair(
    config: ModelConfig,
    suite_size: usize,
    seed: u64,
) -> Result<PlantedInstance> {
    plant(config, suite_size, seed, 2)
}

fn plant(config: ModelConfig, suite_size: usize, seed: u64, count: usize) -> Result<PlantedInstance> {
    config.validate()?;
    if config.num_layers < 2 {
        return Err(TaloError::InvalidInput(
            "planting interference needs a model with at least 2 layers".into(),
        ));
    }
    if count > 1 && config.num_layers < 3 {
        return Err(TaloError::InvalidInput(
            "planting a layer pair needs at least 3 layers".into(),
        ));
    }
    if suite_size < 20 {
        return Err(TaloError::InvalidInput("suite_size must be ≥ 20".into()));
    }
    if config.vocab_size < 2 {
        return Err(TaloError::InvalidInput("vocab_size must be ≥ 2".into()));
    }
    let num_layers = config.num_layers;

    for attempt in 0..MAX_PLANT_ATTEMPTS {
        let attempt_seed = mix_seed(seed, attempt);
        let model = build_toy_model(ModelConfig {
            seed: attempt_seed,
            ..config
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed ^ 0x5EED_5EED);
        let layers: Vec<usize> = (0..num_layers).collect();
        let mut planted: Vec<usize> = layers.choose_multiple(&mut rng, count).copied().collect();
        planted.sort_unstable();

        let teacher = apply_many(&model, &zero_all(&planted))?;
        let mut items = random_items(&config, suite_size, &mut rng);
        for item in &mut items {
            item.answer_index = teacher.predict_choice(item)?;
        }

        if agreement(&model, &items)?.fraction() > PLANT_MAX_BASE_ACCURACY {
            continue;
        }
        let singles = (0..num_layers)
            .map(|l| agreement(&apply_many(&model, &zero_all(&[l]))?, &items))
            .collect::<Result<Vec<_>>>()?;
        let accepted = if count == 1 {
            singles
                .iter()
                .enumerate()
                .all(|(l, s)| (l == planted[0]) == s.is_perfect())
        } else {
            let best = singles.iter().map(|s| s.correct).max().unwrap_or(0);
            let winners: Vec<usize> = (0..num_layers).filter(|&l| singles[l].correct == best).collect();
            let single_ok = winners.len() == 1 && planted.contains(&winners[0]);
            single_ok && unique_perfect_pair(&model, &items, &planted)?
        };
        if accepted {
            let suite = TaskSuite::new(format!("planted-{seed}"), config.vocab_size, items)?;
            return Ok(PlantedInstance {
                model,
                suite,
                planted_layers: planted,
                attempts: attempt + 1,
            });
        }
    }
    Err(TaloError::InvalidInput(format!(
        "could not plant a detectable interfering layer within {MAX_PLANT_ATTEMPTS} attempts"
    )))
}

fn unique_perfect_pair(model: &LayerStackModel, items: &[McqItem], planted: &[usize]) -> Result<bool> {
    let n = model.num_layers();
    for a in 0..n {
        for b in a + 1..n {
            if [a, b] == planted {
                continue;
            }
            if agreement(&apply_many(model, &zero_all(&[a, b]))?, items)?.is_perfect() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
