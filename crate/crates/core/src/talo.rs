// SPDX-License-Identifier: MIT OR Apache-2.0

//! Test-time layer knockout.
//!
//! For one task: score the unmodified model on a small probe set, zero the
//! attention of each layer in turn, pick the layer with the largest probe
//! gain, and evaluate that knockout on the held-out items.
//!
//! Selection protocol:
//!
//! 1. A probe the base model answers perfectly carries no signal; it is
//!    discarded and redrawn (at most [`MAX_BASELINE_REDRAWS`] times).
//! 2. A gain counts only if it is at least one extra correct probe item,
//!    i.e. `Δ ≥ 1/|probe|`. Without such a gain the model is kept intact.
//! 3. Layers tied at the maximum are rescored on the probe augmented by
//!    `⌈shots/2⌉` fresh items, then by a further `⌈shots/4⌉`. A tie that
//!    survives both rounds goes to the highest layer index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TaloError};
use crate::harness::{McqItem, ProbePool, ProbeSet, Score, TaskSuite};
use crate::intervention::InterventionSpec;
use crate::interaction::delta_points;
use crate::oracle::EvalOracle;

/// Redraws allowed when the probe baseline is perfect.
pub const MAX_BASELINE_REDRAWS: usize = 5;

pub fn first_augmentation(shots: usize) -> usize {
    shots.div_ceil(2)
}

pub fn second_augmentation(shots: usize) -> usize {
    shots.div_ceil(4)
}

/// Items `run_talo` needs beyond the probe before any held-out item is left.
pub fn required_suite_size(shots: usize) -> usize {
    shots + first_augmentation(shots) + second_augmentation(shots) + 1
}

/// Probe accuracy of the base model and of every single-layer knockout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GainProfile {
    pub baseline: Score,
    pub layer_scores: Vec<Score>,
}

impl GainProfile {
    pub fn probe_size(&self) -> usize {
        self.baseline.total
    }

    /// `Δ_ℓ` as a fraction of the probe.
    pub fn gains(&self) -> Vec<f64> {
        self.layer_scores
            .iter()
            .map(|s| delta_points(self.baseline, *s) / 100.0)
            .collect()
    }

    /// `Δ_ℓ` in probe items.
    pub fn gain_counts(&self) -> Vec<i64> {
        self.layer_scores
            .iter()
            .map(|s| s.correct as i64 - self.baseline.correct as i64)
            .collect()
    }

    pub fn threshold(&self) -> f64 {
        1.0 / self.probe_size() as f64
    }
}

/// One baseline evaluation of a drawn probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineDraw {
    pub probe_size: usize,
    pub base_correct: usize,
    pub accepted: bool,
}

/// One scoring round of the selection audit trail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRound {
    /// Items added to the probe in this round (0 for the initial scoring).
    pub added: usize,
    pub probe_size: usize,
    pub base_correct: usize,
    /// Layers scored in this round.
    pub candidates: Vec<usize>,
    /// Gain in probe items, aligned with `candidates`.
    pub gain_counts: Vec<i64>,
    /// Candidates tied at the round's maximum gain.
    pub leaders: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub selected: Option<usize>,
    /// Minimum gain (fraction of the initial probe) for a layer to count.
    pub threshold: f64,
    pub rounds: Vec<SelectionRound>,
}

/// Result of rescoring tied candidates on an augmented probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rescore {
    pub baseline: Score,
    /// Aligned with the requested candidates.
    pub candidate_scores: Vec<Score>,
}

/// Source of augmentation rounds for tie resolution.
pub trait Resampler {
    /// Adds `extra` fresh items to the probe and rescores the base model and
    /// each candidate layer on the enlarged probe.
    fn rescore(&mut self, extra: usize, candidates: &[usize]) -> Result<Rescore>;
}

/// Resampler drawing augmentation items from a probing pool.
pub struct ProbeResampler<'a, O: EvalOracle> {
    oracle: &'a O,
    pool: &'a mut ProbePool,
    probe: Vec<McqItem>,
}

impl<'a, O: EvalOracle> ProbeResampler<'a, O> {
    pub fn new(oracle: &'a O, pool: &'a mut ProbePool, probe: Vec<McqItem>) -> Self {
        Self { oracle, pool, probe }
    }

    /// The probe including every augmentation so far.
    pub fn probe(&self) -> &[McqItem] {
        &self.probe
    }
}

impl<O: EvalOracle> Resampler for ProbeResampler<'_, O> {
    fn rescore(&mut self, extra: usize, candidates: &[usize]) -> Result<Rescore> {
        let fresh = self.pool.draw(extra)?;
        self.probe.extend(fresh);
        let baseline = self.oracle.score(&[], &self.probe)?;
        let candidate_scores = candidates
            .par_iter()
            .map(|&l| {
                self.oracle
                    .score(&[InterventionSpec::zero_attention(l)], &self.probe)
                    .map_err(|e| TaloError::at_layer(l, e))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Rescore {
            baseline,
            candidate_scores,
        })
    }
}

/// Scores the probe; perfect probes are discarded and redrawn from `pool`.
pub fn establish_baseline<O: EvalOracle>(
    oracle: &O,
    probe: ProbeSet,
    pool: &mut ProbePool,
) -> Result<(ProbeSet, Score, Vec<BaselineDraw>)> {
    if probe.items.is_empty() {
        return Err(TaloError::InvalidInput("empty probe set".into()));
    }
    let mut probe = probe;
    let mut draws = Vec::new();
    loop {
        let score = oracle.score(&[], &probe.items)?;
        let accepted = !score.is_perfect();
        draws.push(BaselineDraw {
            probe_size: score.total,
            base_correct: score.correct,
            accepted,
        });
        if accepted {
            return Ok((probe, score, draws));
        }
        if draws.len() > MAX_BASELINE_REDRAWS {
            return Err(TaloError::PoolExhausted(format!(
                "base model scored 100% on {} consecutive probe draws",
                draws.len()
            )));
        }
        let size = probe.items.len();
        probe.items = pool.draw(size).map_err(|e| {
            TaloError::PoolExhausted(format!("every probe draw scored 100% ({e})"))
        })?;
    }
}

/// Zeroes the attention of each layer in turn and scores the probe.
pub fn layer_gains<O: EvalOracle>(oracle: &O, probe: &[McqItem]) -> Result<GainProfile> {
    if probe.is_empty() {
        return Err(TaloError::InvalidInput("empty probe set".into()));
    }
    let baseline = oracle.score(&[], probe)?;
    let layer_scores = (0..oracle.num_layers())
        .into_par_iter()
        .map(|l| {
            oracle
                .score(&[InterventionSpec::zero_attention(l)], probe)
                .map_err(|e| TaloError::at_layer(l, e))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GainProfile {
        baseline,
        layer_scores,
    })
}

fn leaders(candidates: &[usize], gains: &[i64]) -> Vec<usize> {
    let best = gains.iter().copied().max().unwrap_or(0);
    candidates
        .iter()
        .zip(gains)
        .filter(|(_, g)| **g == best)
        .map(|(c, _)| *c)
        .collect()
}

/// Picks the interfering layer from a gain profile, resolving ties through
/// `resampler`.
pub fn select_layer<R: Resampler + ?Sized>(profile: &GainProfile, resampler: &mut R) -> Result<LayerSelection> {
    let shots = profile.probe_size();
    if shots == 0 || profile.layer_scores.iter().any(|s| s.total != shots) {
        return Err(TaloError::InvalidInput("malformed gain profile".into()));
    }
    let all: Vec<usize> = (0..profile.layer_scores.len()).collect();
    let gains = profile.gain_counts();
    let mut candidates = leaders(&all, &gains);
    let mut rounds = vec![SelectionRound {
        added: 0,
        probe_size: shots,
        base_correct: profile.baseline.correct,
        candidates: all,
        gain_counts: gains.clone(),
        leaders: candidates.clone(),
    }];
    let threshold = profile.threshold();
    let best = gains.iter().copied().max().unwrap_or(0);

    let mut selection = LayerSelection {
        selected: None,
        threshold,
        rounds: Vec::new(),
    };
    if best < 1 {
        selection.rounds = rounds;
        return Ok(selection);
    }

    for extra in [first_augmentation(shots), second_augmentation(shots)] {
        if candidates.len() == 1 {
            break;
        }
        let rescore = resampler.rescore(extra, &candidates)?;
        let gains: Vec<i64> = rescore
            .candidate_scores
            .iter()
            .map(|s| s.correct as i64 - rescore.baseline.correct as i64)
            .collect();
        let next = leaders(&candidates, &gains);
        rounds.push(SelectionRound {
            added: extra,
            probe_size: rescore.baseline.total,
            base_correct: rescore.baseline.correct,
            candidates: candidates.clone(),
            gain_counts: gains,
            leaders: next.clone(),
        });
        candidates = next;
    }

    selection.selected = candidates.iter().copied().max();
    selection.rounds = rounds;
    Ok(selection)
}

/// Second-layer search on top of a single-layer knockout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSearch {
    pub first: usize,
    pub probe_size: usize,
    pub base_correct: usize,
    pub single_correct: usize,
    /// `(second layer, probe correct with both zeroed)`.
    pub pair_scores: Vec<(usize, usize)>,
    /// `None` when no pair beats the single-layer knockout.
    pub second: Option<usize>,
}

/// Outcome of one knockout run on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaloResult {
    pub task_id: String,
    pub shots: usize,
    pub seed: u64,
    pub baseline_draws: Vec<BaselineDraw>,
    pub selection: LayerSelection,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pair: Option<PairSearch>,
    /// Layers whose attention is zeroed for the held-out evaluation.
    pub knocked_out: Vec<usize>,
    pub heldout_base: Score,
    pub heldout_knockout: Score,
    pub delta_points: f64,
}

impl TaloResult {
    pub fn selected_layers(&self) -> &[usize] {
        &self.knocked_out
    }
}

struct SingleStage {
    probe: Vec<McqItem>,
    baseline_draws: Vec<BaselineDraw>,
    selection: LayerSelection,
}

fn check_suite(suite: &TaskSuite, shots: usize) -> Result<()> {
    if shots == 0 {
        return Err(TaloError::InvalidInput("shots must be ≥ 1".into()));
    }
    let needed = required_suite_size(shots);
    if suite.len() < needed {
        return Err(TaloError::InvalidInput(format!(
            "task `{}` has {} items; {shots} shots need at least {needed}",
            suite.task_id,
            suite.len()
        )));
    }
    Ok(())
}

fn single_stage<O: EvalOracle>(oracle: &O, pool: &mut ProbePool, suite: &TaskSuite, shots: usize, seed: u64) -> Result<SingleStage> {
    let initial = ProbeSet {
        task_id: suite.task_id.clone(),
        items: pool.draw(shots)?,
        shots,
        seed,
    };
    let (probe, _, baseline_draws) = establish_baseline(oracle, initial, pool)?;
    let profile = layer_gains(oracle, &probe.items)?;
    let mut resampler = ProbeResampler::new(oracle, pool, probe.items);
    let selection = select_layer(&profile, &mut resampler)?;
    Ok(SingleStage {
        probe: resampler.probe,
        baseline_draws,
        selection,
    })
}

fn finish<O: EvalOracle>(
    oracle: &O,
    pool: &ProbePool,
    suite: &TaskSuite,
    shots: usize,
    seed: u64,
    stage: SingleStage,
    pair: Option<PairSearch>,
) -> Result<TaloResult> {
    let mut knocked_out: Vec<usize> = stage.selection.selected.into_iter().collect();
    if let Some(second) = pair.as_ref().and_then(|p| p.second) {
        knocked_out.push(second);
    }
    let heldout = pool.held_out();
    let heldout_base = oracle.score(&[], &heldout.items)?;
    let heldout_knockout = if knocked_out.is_empty() {
        heldout_base
    } else {
        let specs: Vec<_> = knocked_out.iter().map(|&l| InterventionSpec::zero_attention(l)).collect();
        oracle.score(&specs, &heldout.items)?
    };
    Ok(TaloResult {
        task_id: suite.task_id.clone(),
        shots,
        seed,
        baseline_draws: stage.baseline_draws,
        selection: stage.selection,
        pair,
        knocked_out,
        heldout_base,
        heldout_knockout,
        delta_points: delta_points(heldout_base, heldout_knockout),
    })
}

/// Full single-layer knockout on one task.
pub fn run_talo<O: EvalOracle>(oracle: &O, suite: &TaskSuite, shots: usize, seed: u64) -> Result<TaloResult> {
    check_suite(suite, shots)?;
    let mut pool = ProbePool::new(suite, seed, 1);
    let stage = single_stage(oracle, &mut pool, suite, shots, seed)?;
    finish(oracle, &pool, suite, shots, seed, stage, None)
}

/// Knockout with an optional second layer: fixes the single-layer winner and
/// adds the second zeroing that most improves the probe, if any does.
pub fn run_talo_pair<O: EvalOracle>(oracle: &O, suite: &TaskSuite, shots: usize, seed: u64) -> Result<TaloResult> {
    if oracle.num_layers() < 2 {
        return Err(TaloError::InvalidInput(
            "a layer pair needs a model with at least 2 layers".into(),
        ));
    }
    check_suite(suite, shots)?;
    let mut pool = ProbePool::new(suite, seed, 1);
    let stage = single_stage(oracle, &mut pool, suite, shots, seed)?;

    let pair = match stage.selection.selected {
        None => None,
        Some(first) => {
            let probe = &stage.probe;
            let base = oracle.score(&[], probe)?;
            let single = oracle.score(&[InterventionSpec::zero_attention(first)], probe)?;
            let pair_scores = (0..oracle.num_layers())
                .into_par_iter()
                .filter(|&l| l != first)
                .map(|l| {
                    let specs = [InterventionSpec::zero_attention(first), InterventionSpec::zero_attention(l)];
                    oracle
                        .score(&specs, probe)
                        .map(|s| (l, s.correct))
                        .map_err(|e| TaloError::at_layer(l, e))
                })
                .collect::<Result<Vec<_>>>()?;
            let best = pair_scores.iter().map(|p| p.1).max().unwrap_or(0);
            let second = if best > single.correct {
                pair_scores.iter().filter(|p| p.1 == best).map(|p| p.0).max()
            } else {
                None
            };
            Some(PairSearch {
                first,
                probe_size: probe.len(),
                base_correct: base.correct,
                single_correct: single.correct,
                pair_scores,
                second,
            })
        }
    };
    finish(oracle, &pool, suite, shots, seed, stage, pair)
}
