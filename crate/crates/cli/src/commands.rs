// SPDX-License-Identifier: MIT OR Apache-2.0

//! Execution of a [`RunManifest`]: every command computes its files in
//! memory, then [`write_outputs`] writes them once and reads them back.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::Serialize;
use talo_core::checkpoint::{load_checkpoint, write_checkpoint};
use talo_core::export::{clusters_csv, consistency_csv, distance_csv, parse_sweep_csv, rho_csv, sweep_csv};
use talo_core::interaction::consistency_points;
use talo_core::{
    build_toy_model, cluster_tasks, consistency_correlation, distance_matrix, load_task_suite,
    plant_interference, plant_interference_pair, run_sweep, run_talo, run_talo_pair, Endpoint,
    EvalOracle, InterventionKind, LocalOracle, RemoteOracle, SweepMatrix, Target, TaskSuite,
};

use crate::manifest::{kind_text, Command, ModelSource, RunManifest, MANIFEST_FILE};

/// Files produced by a run plus a human-readable summary.
#[derive(Debug, Default)]
pub struct Outputs {
    pub files: Vec<(String, Vec<u8>)>,
    pub summary: Vec<String>,
}

impl Outputs {
    fn file(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    fn say(&mut self, line: impl Into<String>) {
        self.summary.push(line.into());
    }
}

pub fn execute(manifest: &RunManifest) -> Result<Outputs> {
    match manifest.command {
        Command::Sweep => sweep(manifest),
        Command::Talo => talo(manifest),
        Command::Cluster => cluster(manifest),
        Command::Consistency => consistency(manifest),
        Command::Ablate => ablate(manifest),
        Command::Plant => plant(manifest),
    }
}

/// Writes the manifest and all outputs, then checks every file on disk.
pub fn write_outputs(manifest: &RunManifest, outputs: &Outputs) -> Result<()> {
    let dir = &manifest.out;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let manifest_bytes = manifest.to_json().into_bytes();
    let all = std::iter::once((MANIFEST_FILE, manifest_bytes.as_slice()))
        .chain(outputs.files.iter().map(|(n, b)| (n.as_str(), b.as_slice())));
    for (name, bytes) in all {
        let path = dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        let back = fs::read(&path).with_context(|| format!("re-reading {}", path.display()))?;
        ensure!(back == bytes, "{} does not match what was written", path.display());
    }
    Ok(())
}

fn open_oracle(manifest: &RunManifest, suites: &[TaskSuite]) -> Result<Box<dyn EvalOracle>> {
    let source = manifest
        .model
        .as_ref()
        .ok_or_else(|| anyhow!("this command needs a model source"))?;
    let model = match source {
        ModelSource::Builtin(config) => build_toy_model(*config)?,
        ModelSource::Checkpoint(path) => {
            load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?
        }
        ModelSource::Endpoint(text) => {
            let endpoint: Endpoint = text.parse()?;
            if endpoint == Endpoint::Stdio {
                bail!("a client endpoint must be tcp://host:port or exec:<command>");
            }
            let oracle =
                RemoteOracle::connect(&endpoint).with_context(|| format!("connecting to {endpoint}"))?;
            return Ok(Box::new(oracle));
        }
    };
    let vocab = model.config.vocab_size;
    for suite in suites {
        ensure!(
            suite.vocab_size <= vocab,
            "suite `{}` uses vocabulary size {} but the model has {vocab}",
            suite.task_id,
            suite.vocab_size
        );
    }
    Ok(Box::new(LocalOracle::new(model)))
}

fn load_suites(manifest: &RunManifest) -> Result<Vec<TaskSuite>> {
    ensure!(!manifest.suites.is_empty(), "at least one --suite is required");
    manifest
        .suites
        .iter()
        .map(|p| load_task_suite(p).with_context(|| format!("reading suite {}", p.display())))
        .collect()
}

fn sweep_file_name(kind: InterventionKind, target: Target) -> String {
    format!("sweep_{}_{target}.csv", kind_text(kind).replace(':', "-"))
}

fn first_target(manifest: &RunManifest) -> Result<Target> {
    Ok(manifest.parsed_targets()?.first().copied().unwrap_or(Target::Attention))
}

fn sweep(manifest: &RunManifest) -> Result<Outputs> {
    let suites = load_suites(manifest)?;
    let oracle = open_oracle(manifest, &suites)?;
    let mut out = Outputs::default();
    for kind in manifest.parsed_kinds()? {
        for target in manifest.parsed_targets()? {
            let matrix = run_sweep(&oracle.as_ref(), &suites, kind, target)?;
            let name = sweep_file_name(kind, target);
            out.say(format!(
                "{name}: {} tasks × {} layers",
                matrix.tasks.len(),
                matrix.num_layers()
            ));
            out.file(name, sweep_csv(&matrix));
        }
    }
    Ok(out)
}

fn talo(manifest: &RunManifest) -> Result<Outputs> {
    let shots = manifest.shots.ok_or_else(|| anyhow!("--shots is required"))?;
    let suites = load_suites(manifest)?;
    let oracle = open_oracle(manifest, &suites)?;
    let oracle = oracle.as_ref();
    let mut out = Outputs::default();
    let mut lines = String::new();
    for suite in &suites {
        let result = if manifest.pair {
            run_talo_pair(&oracle, suite, shots, manifest.seed)
        } else {
            run_talo(&oracle, suite, shots, manifest.seed)
        }
        .with_context(|| format!("knockout on task `{}`", suite.task_id))?;
        let layers = if result.knocked_out.is_empty() {
            "none".to_string()
        } else {
            format!("{:?}", result.knocked_out)
        };
        out.say(format!(
            "{}: knocked out {layers}, held-out {:.4} -> {:.4} ({:+.2} points)",
            result.task_id,
            result.heldout_base.fraction(),
            result.heldout_knockout.fraction(),
            result.delta_points
        ));
        lines.push_str(&serde_json::to_string(&result)?);
        lines.push('\n');
    }
    out.file("talo.jsonl", lines);
    Ok(out)
}

fn read_sweep(path: &Path, kind: InterventionKind, target: Target) -> Result<SweepMatrix> {
    let text = fs::read_to_string(path).with_context(|| format!("reading sweep {}", path.display()))?;
    parse_sweep_csv(&text, kind, target).with_context(|| format!("parsing sweep {}", path.display()))
}

fn cluster(manifest: &RunManifest) -> Result<Outputs> {
    let k = manifest.clusters.ok_or_else(|| anyhow!("--clusters is required"))?;
    let kind = manifest
        .parsed_kinds()?
        .first()
        .copied()
        .unwrap_or(InterventionKind::Zeroing);
    let target = first_target(manifest)?;
    let mut out = Outputs::default();

    let mut vectors = Vec::new();
    if manifest.sweeps.is_empty() {
        let suites = load_suites(manifest)?;
        let oracle = open_oracle(manifest, &suites)?;
        let matrix = run_sweep(&oracle.as_ref(), &suites, kind, target)?;
        vectors.extend(matrix.interaction_vectors());
        out.file(sweep_file_name(kind, target), sweep_csv(&matrix));
    } else {
        for path in &manifest.sweeps {
            vectors.extend(read_sweep(path, kind, target)?.interaction_vectors());
        }
    }

    let correlation = distance_matrix(&vectors)?;
    let clustering = cluster_tasks(&correlation, k)?;
    for (task, label) in clustering.task_ids.iter().zip(&clustering.labels) {
        out.say(format!("{task}: cluster {label}"));
    }
    out.file("rho.csv", rho_csv(&correlation));
    out.file("distance.csv", distance_csv(&correlation));
    out.file("clusters.csv", clusters_csv(&clustering));
    Ok(out)
}

#[derive(Serialize)]
struct ConsistencyReport {
    x: String,
    y: String,
    target: String,
    pairs: usize,
    rho: f64,
}

fn consistency(manifest: &RunManifest) -> Result<Outputs> {
    let target = first_target(manifest)?;
    let mut out = Outputs::default();
    let (x, y) = if manifest.sweeps.is_empty() {
        let suites = load_suites(manifest)?;
        let oracle = open_oracle(manifest, &suites)?;
        let x = run_sweep(&oracle.as_ref(), &suites, InterventionKind::UniformScaling, target)?;
        let y = run_sweep(&oracle.as_ref(), &suites, InterventionKind::Zeroing, target)?;
        out.file(sweep_file_name(x.kind, target), sweep_csv(&x));
        out.file(sweep_file_name(y.kind, target), sweep_csv(&y));
        (x, y)
    } else {
        ensure!(
            manifest.sweeps.len() == 2,
            "consistency takes exactly two sweep files (uniform scaling, then zeroing)"
        );
        (
            read_sweep(&manifest.sweeps[0], InterventionKind::UniformScaling, target)?,
            read_sweep(&manifest.sweeps[1], InterventionKind::Zeroing, target)?,
        )
    };
    let points = consistency_points(&x, &y)?;
    let rho = consistency_correlation(&x, &y)?;
    out.say(format!("{} task-layer pairs, rho = {rho:.6}", points.len()));
    let report = ConsistencyReport {
        x: kind_text(x.kind),
        y: kind_text(y.kind),
        target: target.to_string(),
        pairs: points.len(),
        rho,
    };
    out.file("points.csv", consistency_csv(&points));
    out.file("consistency.json", format!("{}\n", serde_json::to_string_pretty(&report)?));
    Ok(out)
}

fn ablate(manifest: &RunManifest) -> Result<Outputs> {
    let suites = load_suites(manifest)?;
    let oracle = open_oracle(manifest, &suites)?;
    let mut table = String::from("task,kind,noise_seed,target,layer,n_items,base_correct,correct,accuracy,delta_points\n");
    let mut out = Outputs::default();
    for kind in manifest.parsed_kinds()? {
        for target in manifest.parsed_targets()? {
            let matrix = run_sweep(&oracle.as_ref(), &suites, kind, target)?;
            let seed = kind.seed().map(|s| s.to_string()).unwrap_or_default();
            let mut worst = f64::INFINITY;
            for (t, task) in matrix.tasks.iter().enumerate() {
                let base = matrix.base[t];
                let vector = matrix.interaction_vector(t);
                for (l, cell) in matrix.cells[t].iter().enumerate() {
                    worst = worst.min(vector.values[l]);
                    table.push_str(&format!(
                        "{task},{},{seed},{target},{l},{},{},{},{:.6},{:.6}\n",
                        kind.name(),
                        cell.total,
                        base.correct,
                        cell.correct,
                        cell.fraction(),
                        vector.values[l]
                    ));
                }
            }
            out.say(format!("{} on {target}: largest drop {:.2} points", kind_text(kind), -worst));
        }
    }
    out.file("ablation.csv", table);
    Ok(out)
}

#[derive(Serialize)]
struct PlantReport<'a> {
    task_id: &'a str,
    planted_layers: &'a [usize],
    attempts: u64,
    suite_size: usize,
    base_correct: usize,
}

fn plant(manifest: &RunManifest) -> Result<Outputs> {
    let config = match &manifest.model {
        None => Default::default(),
        Some(ModelSource::Builtin(config)) => *config,
        Some(_) => bail!("plant builds its own model; pass --model-config, not a checkpoint or endpoint"),
    };
    let size = manifest.suite_size.unwrap_or(100);
    let instance = if manifest.pair {
        plant_interference_pair(config, size, manifest.seed)?
    } else {
        plant_interference(config, size, manifest.seed)?
    };
    let base = LocalOracle::new(instance.model.clone()).score(&[], &instance.suite.items)?;
    let mut out = Outputs::default();
    out.say(format!(
        "{}: planted layers {:?} after {} attempt(s), base accuracy {:.4}",
        instance.suite.task_id,
        instance.planted_layers,
        instance.attempts,
        base.fraction()
    ));
    let report = PlantReport {
        task_id: &instance.suite.task_id,
        planted_layers: &instance.planted_layers,
        attempts: instance.attempts,
        suite_size: instance.suite.len(),
        base_correct: base.correct,
    };
    let mut checkpoint = Vec::new();
    write_checkpoint(&instance.model, &mut checkpoint)?;
    out.file("suite.txt", instance.suite.to_text());
    out.file(
        "model.json",
        format!("{}\n", serde_json::to_string_pretty(&instance.model.config)?),
    );
    out.file("model.ckpt", checkpoint);
    out.file("planted.json", format!("{}\n", serde_json::to_string_pretty(&report)?));
    Ok(out)
}

/// Reads a model configuration file.
pub fn read_model_config(path: &Path) -> Result<talo_core::ModelConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading model config {}", path.display()))?;
    let config: talo_core::ModelConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing model config {}", path.display()))?;
    config.validate()?;
    Ok(config)
}
