// SPDX-License-Identifier: MIT OR Apache-2.0

//! Task-layer interaction vectors and the cross-task analyses built on them:
//! Pearson correlation, the `1 - ρ` task distance, average-linkage
//! clustering, and the agreement between two intervention sweeps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TaloError};
use crate::harness::{Score, TaskSuite};
use crate::intervention::{InterventionKind, InterventionSpec, Target};
use crate::oracle::EvalOracle;

/// Accuracy of every task under the base model and under an intervention
/// at each layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMatrix {
    pub kind: InterventionKind,
    pub target: Target,
    pub tasks: Vec<String>,
    pub base: Vec<Score>,
    /// `cells[task][layer]`.
    pub cells: Vec<Vec<Score>>,
}

impl SweepMatrix {
    pub fn num_layers(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.num_layers();
        if self.tasks.len() != self.base.len()
            || self.tasks.len() != self.cells.len()
            || self.cells.iter().any(|row| row.len() != layers)
        {
            return Err(TaloError::ShapeMismatch("sweep matrix is not rectangular".into()));
        }
        let bad = |s: &Score| s.total == 0 || s.correct > s.total;
        if self.base.iter().chain(self.cells.iter().flatten()).any(bad) {
            return Err(TaloError::ShapeMismatch("sweep cell with invalid counts".into()));
        }
        Ok(())
    }

    pub fn interaction_vector(&self, task: usize) -> TaskLayerInteractionVector {
        let base = self.base[task];
        TaskLayerInteractionVector {
            task_id: self.tasks[task].clone(),
            kind: self.kind,
            values: self.cells[task]
                .iter()
                .map(|cell| delta_points(base, *cell))
                .collect(),
        }
    }

    pub fn interaction_vectors(&self) -> Vec<TaskLayerInteractionVector> {
        (0..self.tasks.len()).map(|t| self.interaction_vector(t)).collect()
    }
}

/// `100 · (intervened − base)`.
pub fn delta_points(base: Score, intervened: Score) -> f64 {
    if base.total == intervened.total {
        100.0 * (intervened.correct as f64 - base.correct as f64) / base.total as f64
    } else {
        100.0 * (intervened.fraction() - base.fraction())
    }
}

/// Per-layer accuracy change of one task, in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLayerInteractionVector {
    pub task_id: String,
    pub kind: InterventionKind,
    pub values: Vec<f64>,
}

/// Evaluates every suite under the base model and under `kind` on `target`
/// at each layer.
pub fn run_sweep<O: EvalOracle>(
    oracle: &O,
    suites: &[TaskSuite],
    kind: InterventionKind,
    target: Target,
) -> Result<SweepMatrix> {
    let layers = oracle.num_layers();
    let base = suites
        .par_iter()
        .map(|suite| oracle.score(&[], &suite.items))
        .collect::<Result<Vec<_>>>()?;
    let grid: Vec<(usize, usize)> = (0..suites.len())
        .flat_map(|t| (0..layers).map(move |l| (t, l)))
        .collect();
    let flat = grid
        .par_iter()
        .map(|&(t, l)| {
            oracle
                .score(&[InterventionSpec::new(kind, target, l)], &suites[t].items)
                .map_err(|e| TaloError::at_layer(l, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = flat.chunks(layers.max(1)).map(<[Score]>::to_vec).collect();
    Ok(SweepMatrix {
        kind,
        target,
        tasks: suites.iter().map(|s| s.task_id.clone()).collect(),
        base,
        cells,
    })
}

/// `v_i = 100 · (Acc(intervened at i) − Acc(base))` for one suite.
pub fn compute_interaction_vector<O: EvalOracle>(
    oracle: &O,
    suite: &TaskSuite,
    kind: InterventionKind,
    target: Target,
) -> Result<TaskLayerInteractionVector> {
    if suite.is_empty() {
        return Err(TaloError::InvalidInput("empty suite".into()));
    }
    let sweep = run_sweep(oracle, std::slice::from_ref(suite), kind, target)?;
    Ok(sweep.interaction_vector(0))
}

/// Pearson correlation of two equal-length, non-constant vectors.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TaloError::ShapeMismatch(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(TaloError::UndefinedCorrelation(
            "need at least 2 points".into(),
        ));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(TaloError::UndefinedCorrelation(
            "constant vector has zero variance".into(),
        ));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pairwise correlations and `d = 1 − ρ` distances between tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub task_ids: Vec<String>,
    pub rho: Vec<Vec<f64>>,
    pub distance: Vec<Vec<f64>>,
}

impl CorrelationResult {
    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }
}

pub fn distance_matrix(vectors: &[TaskLayerInteractionVector]) -> Result<CorrelationResult> {
    if vectors.len() < 2 {
        return Err(TaloError::InvalidInput("need ≥ 2 tasks".into()));
    }
    let n = vectors.len();
    let mut rho = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let r = pearson(&vectors[i].values, &vectors[j].values).map_err(|e| match e {
                TaloError::UndefinedCorrelation(_) => {
                    let culprit = if is_constant(&vectors[i].values) { i } else { j };
                    TaloError::UndefinedCorrelation(format!(
                        "interaction vector of task `{}` is constant",
                        vectors[culprit].task_id
                    ))
                }
                other => other,
            })?;
            rho[i][j] = r;
            rho[j][i] = r;
        }
    }
    let distance = rho
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, r)| if i == j { 0.0 } else { 1.0 - r })
                .collect()
        })
        .collect();
    Ok(CorrelationResult {
        task_ids: vectors.iter().map(|v| v.task_id.clone()).collect(),
        rho,
        distance,
    })
}

fn is_constant(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] == w[1])
}

/// Cluster label per task, aligned with the input task order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    pub task_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub num_clusters: usize,
}

impl Clustering {
    pub fn label_of(&self, task_id: &str) -> Option<usize> {
        self.task_ids
            .iter()
            .position(|t| t == task_id)
            .map(|i| self.labels[i])
    }
}

/// Average-linkage agglomerative clustering on the task distance, cut at
/// `num_clusters`.
///
/// Equal linkage distances merge the pair whose smallest task ids come first
/// lexicographically. Labels are numbered by each cluster's smallest task id.
pub fn cluster_tasks(result: &CorrelationResult, num_clusters: usize) -> Result<Clustering> {
    let n = result.len();
    if num_clusters == 0 || num_clusters > n {
        return Err(TaloError::InvalidInput(format!(
            "num_clusters must be in 1..={n}, got {num_clusters}"
        )));
    }
    let ids = &result.task_ids;
    let key = |members: &[usize]| members.iter().map(|&m| ids[m].as_str()).min().unwrap();

    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    while clusters.len() > num_clusters {
        let mut best: Option<(f64, (&str, &str), usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        total += result.distance[i][j];
                    }
                }
                let link = total / (clusters[a].len() * clusters[b].len()) as f64;
                let (ka, kb) = (key(&clusters[a]), key(&clusters[b]));
                let pair = if ka <= kb { (ka, kb) } else { (kb, ka) };
                let better = match &best {
                    None => true,
                    Some((d, p, _, _)) => link < *d || (link == *d && pair < *p),
                };
                if better {
                    best = Some((link, pair, a, b));
                }
            }
        }
        let (_, _, a, b) = best.expect("at least two clusters remain");
        let merged = clusters.remove(b);
        clusters[a].extend(merged);
    }

    clusters.sort_by(|x, y| key(x).cmp(key(y)));
    let mut labels = vec![0; n];
    for (label, members) in clusters.iter().enumerate() {
        for &m in members {
            labels[m] = label;
        }
    }
    Ok(Clustering {
        task_ids: ids.clone(),
        labels,
        num_clusters,
    })
}

/// `(task, layer, x, y)` accuracy pairs of two sweeps over one grid.
pub fn consistency_points(
    sweep_x: &SweepMatrix,
    sweep_y: &SweepMatrix,
) -> Result<Vec<(String, usize, f64, f64)>> {
    sweep_x.validate()?;
    sweep_y.validate()?;
    if sweep_x.tasks != sweep_y.tasks || sweep_x.num_layers() != sweep_y.num_layers() {
        return Err(TaloError::ShapeMismatch(format!(
            "sweeps cover different grids ({} tasks × {} layers vs {} × {})",
            sweep_x.tasks.len(),
            sweep_x.num_layers(),
            sweep_y.tasks.len(),
            sweep_y.num_layers()
        )));
    }
    let mut points = Vec::new();
    for (t, task) in sweep_x.tasks.iter().enumerate() {
        for l in 0..sweep_x.num_layers() {
            points.push((
                task.clone(),
                l,
                sweep_x.cells[t][l].fraction(),
                sweep_y.cells[t][l].fraction(),
            ));
        }
    }
    Ok(points)
}

/// Pearson ρ over all flattened `(task, layer)` accuracy pairs.
pub fn consistency_correlation(sweep_x: &SweepMatrix, sweep_y: &SweepMatrix) -> Result<f64> {
    let points = consistency_points(sweep_x, sweep_y)?;
    let xs: Vec<f64> = points.iter().map(|p| p.2).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.3).collect();
    pearson(&xs, &ys)
}

/// Chance-corrected agreement between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TaloError::ShapeMismatch("labelings differ in length".into()));
    }
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let comb2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| comb2(v)).sum();
    let rows: f64 = table.iter().map(|r| comb2(r.iter().sum())).sum();
    let cols: f64 = (0..kb)
        .map(|j| comb2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = comb2(n as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Synthetic interaction vectors drawn around `families` random signals.
///
/// Each task is its family's signal plus Gaussian noise with standard
/// deviation `noise_ratio` times the signal's empirical standard deviation.
/// Returns the vectors and their family labels.
pub fn synthetic_families(
    families: usize,
    per_family: usize,
    layers: usize,
    noise_ratio: f64,
    seed: u64,
) -> (Vec<TaskLayerInteractionVector>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for f in 0..families {
        let signal: Vec<f64> = (0..layers)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                10.0 * z
            })
            .collect();
        let mean = signal.iter().sum::<f64>() / layers as f64;
        let std = (signal.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / layers as f64).sqrt();
        let noise = Normal::new(0.0, noise_ratio * std).expect("finite noise scale");
        for t in 0..per_family {
            vectors.push(TaskLayerInteractionVector {
                task_id: format!("family{f}-task{t:02}"),
                kind: InterventionKind::Zeroing,
                values: signal.iter().map(|s| s + noise.sample(&mut rng)).collect(),
            });
            labels.push(f);
        }
    }
    (vectors, labels)
}
