// SPDX-License-Identifier: MIT OR Apache-2.0

//! `talo`: layer sweeps, knockout runs, clustering, consistency and ablation
//! studies as reproducible file outputs.

mod commands;
mod manifest;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use talo_core::checkpoint::load_checkpoint;
use talo_core::protocol::{serve_connection, BuiltinService, TcpServer};
use talo_core::{build_toy_model, load_task_suite, Endpoint, LayerStackModel};

use crate::commands::{execute, read_model_config, write_outputs};
use crate::manifest::{absolute_input, absolute_output, normalize_kind, Command, ModelSource, RunManifest};

#[derive(Parser)]
#[command(name = "talo", version, about = "Task-interfering layer discovery and test-time layer knockout")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Base and per-layer intervened accuracy for every suite.
    Sweep(SweepArgs),
    /// Probe-based layer selection and held-out knockout per suite.
    Talo(TaloArgs),
    /// Task correlation, distance and clustering of interaction vectors.
    Cluster(ClusterArgs),
    /// Uniform-scaling versus zeroing agreement over all task-layer pairs.
    Consistency(ConsistencyArgs),
    /// Accuracy table over intervention kinds and targets.
    Ablate(AblateArgs),
    /// Serve the built-in model over the evaluation protocol.
    Serve(ServeArgs),
    /// Write a planted-interference model and suite to disk.
    Plant(PlantArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

/// Model source: a toy-model config (default), a checkpoint, or a remote endpoint.
#[derive(Args)]
struct ModelArgs {
    /// JSON model configuration for the built-in toy model.
    #[arg(long, env = "TALO_MODEL_CONFIG", conflicts_with_all = ["checkpoint", "endpoint"])]
    model_config: Option<PathBuf>,
    /// Binary model checkpoint.
    #[arg(long, env = "TALO_CHECKPOINT", conflicts_with = "endpoint")]
    checkpoint: Option<PathBuf>,
    /// Evaluation server, `tcp://host:port` or `exec:<command>`.
    #[arg(long, env = "TALO_ENDPOINT")]
    endpoint: Option<String>,
}

impl ModelArgs {
    fn source(&self) -> Result<ModelSource> {
        Ok(if let Some(path) = &self.model_config {
            ModelSource::Builtin(read_model_config(path)?)
        } else if let Some(path) = &self.checkpoint {
            ModelSource::Checkpoint(absolute_input(path)?)
        } else if let Some(endpoint) = &self.endpoint {
            ModelSource::Endpoint(endpoint.parse::<Endpoint>()?.to_string())
        } else {
            ModelSource::Builtin(Default::default())
        })
    }
}

#[derive(Args)]
struct RunArgs {
    /// Seed for probe sampling and noise interventions.
    #[arg(long, env = "TALO_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, env = "TALO_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Task suite files.
    #[arg(long = "suite", env = "TALO_SUITE", value_delimiter = ',', required = true)]
    suites: Vec<PathBuf>,
    /// Intervention kinds: zero, uniform, mean, noise[:seed].
    #[arg(long = "kind", env = "TALO_KIND", value_delimiter = ',', default_value = "zero")]
    kinds: Vec<String>,
    /// Targeted modules: attn, mlp.
    #[arg(long = "target", env = "TALO_TARGET", value_delimiter = ',', default_value = "attn")]
    targets: Vec<String>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct TaloArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "suite", env = "TALO_SUITE", value_delimiter = ',', required = true)]
    suites: Vec<PathBuf>,
    /// Probe set size.
    #[arg(long, env = "TALO_SHOTS")]
    shots: usize,
    /// Also search for a second layer to knock out.
    #[arg(long)]
    pair: bool,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Task suites to sweep live; ignored when --sweep is given.
    #[arg(long = "suite", env = "TALO_SUITE", value_delimiter = ',')]
    suites: Vec<PathBuf>,
    /// Existing sweep CSVs to cluster.
    #[arg(long = "sweep", value_delimiter = ',')]
    sweeps: Vec<PathBuf>,
    #[arg(long, env = "TALO_KIND", default_value = "zero")]
    kind: String,
    #[arg(long, env = "TALO_TARGET", default_value = "attn")]
    target: String,
    /// Number of clusters.
    #[arg(long, env = "TALO_CLUSTERS")]
    clusters: usize,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct ConsistencyArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "suite", env = "TALO_SUITE", value_delimiter = ',')]
    suites: Vec<PathBuf>,
    /// Two sweep CSVs: uniform scaling first, then zeroing.
    #[arg(long = "sweep", value_delimiter = ',')]
    sweeps: Vec<PathBuf>,
    #[arg(long, env = "TALO_TARGET", default_value = "attn")]
    target: String,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "suite", env = "TALO_SUITE", value_delimiter = ',', required = true)]
    suites: Vec<PathBuf>,
    #[arg(long = "kind", env = "TALO_KIND", value_delimiter = ',', default_value = "zero,uniform,mean,noise")]
    kinds: Vec<String>,
    #[arg(long = "target", env = "TALO_TARGET", value_delimiter = ',', default_value = "attn,mlp")]
    targets: Vec<String>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "TALO_MODEL_CONFIG", conflicts_with = "checkpoint")]
    model_config: Option<PathBuf>,
    #[arg(long, env = "TALO_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Suites whose items may be referenced by id.
    #[arg(long = "suite", env = "TALO_SUITE", value_delimiter = ',')]
    suites: Vec<PathBuf>,
    /// `stdio` or `tcp://host:port` (port 0 picks a free port).
    #[arg(long, env = "TALO_ENDPOINT", default_value = "stdio")]
    endpoint: String,
}

#[derive(Args)]
struct PlantArgs {
    #[arg(long, env = "TALO_MODEL_CONFIG")]
    model_config: Option<PathBuf>,
    /// Number of items in the planted suite.
    #[arg(long, default_value_t = 100)]
    suite_size: usize,
    /// Plant a pair of interfering layers.
    #[arg(long)]
    pair: bool,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct ReplayArgs {
    /// Manifest file written by an earlier run.
    manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    paths.iter().map(|p| absolute_input(p)).collect()
}

fn kinds(kinds: &[String], seed: u64) -> Result<Vec<String>> {
    kinds.iter().map(|k| normalize_kind(k, seed)).collect()
}

fn targets(targets: &[String]) -> Result<Vec<String>> {
    targets
        .iter()
        .map(|t| Ok(t.parse::<talo_core::Target>()?.to_string()))
        .collect()
}

fn base_manifest(command: Command, run: &RunArgs) -> Result<RunManifest> {
    Ok(RunManifest {
        command,
        seed: run.seed,
        model: None,
        suites: Vec::new(),
        sweeps: Vec::new(),
        kinds: Vec::new(),
        targets: Vec::new(),
        shots: None,
        pair: false,
        clusters: None,
        suite_size: None,
        out: absolute_output(&run.out)?,
    })
}

fn manifest_for(cmd: &Cmd) -> Result<RunManifest> {
    Ok(match cmd {
        Cmd::Sweep(a) => RunManifest {
            model: Some(a.model.source()?),
            suites: inputs(&a.suites)?,
            kinds: kinds(&a.kinds, a.run.seed)?,
            targets: targets(&a.targets)?,
            ..base_manifest(Command::Sweep, &a.run)?
        },
        Cmd::Talo(a) => RunManifest {
            model: Some(a.model.source()?),
            suites: inputs(&a.suites)?,
            shots: Some(a.shots),
            pair: a.pair,
            ..base_manifest(Command::Talo, &a.run)?
        },
        Cmd::Cluster(a) => {
            let live = a.sweeps.is_empty();
            RunManifest {
                model: if live { Some(a.model.source()?) } else { None },
                suites: if live { inputs(&a.suites)? } else { Vec::new() },
                sweeps: inputs(&a.sweeps)?,
                kinds: kinds(std::slice::from_ref(&a.kind), a.run.seed)?,
                targets: targets(std::slice::from_ref(&a.target))?,
                clusters: Some(a.clusters),
                ..base_manifest(Command::Cluster, &a.run)?
            }
        }
        Cmd::Consistency(a) => {
            let live = a.sweeps.is_empty();
            RunManifest {
                model: if live { Some(a.model.source()?) } else { None },
                suites: if live { inputs(&a.suites)? } else { Vec::new() },
                sweeps: inputs(&a.sweeps)?,
                targets: targets(std::slice::from_ref(&a.target))?,
                ..base_manifest(Command::Consistency, &a.run)?
            }
        }
        Cmd::Ablate(a) => RunManifest {
            model: Some(a.model.source()?),
            suites: inputs(&a.suites)?,
            kinds: kinds(&a.kinds, a.run.seed)?,
            targets: targets(&a.targets)?,
            ..base_manifest(Command::Ablate, &a.run)?
        },
        Cmd::Plant(a) => RunManifest {
            model: a
                .model_config
                .as_deref()
                .map(read_model_config)
                .transpose()?
                .map(ModelSource::Builtin),
            suite_size: Some(a.suite_size),
            pair: a.pair,
            ..base_manifest(Command::Plant, &a.run)?
        },
        Cmd::Replay(a) => {
            let mut manifest = manifest::RunManifest::load(&a.manifest)?;
            if let Some(out) = &a.out {
                manifest.out = absolute_output(out)?;
            }
            manifest
        }
        Cmd::Serve(_) => unreachable!("serve does not produce a manifest"),
    })
}

fn serve(args: &ServeArgs) -> Result<()> {
    let model: LayerStackModel = if let Some(path) = &args.checkpoint {
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?
    } else {
        let config = match &args.model_config {
            Some(path) => read_model_config(path)?,
            None => Default::default(),
        };
        build_toy_model(config)?
    };
    let suites = args
        .suites
        .iter()
        .map(|p| load_task_suite(p).with_context(|| format!("reading suite {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let service = BuiltinService::new(model, &suites);
    match args.endpoint.parse::<Endpoint>()? {
        Endpoint::Stdio => {
            let (stdin, stdout) = (std::io::stdin(), std::io::stdout());
            Ok(serve_connection(&service, stdin.lock(), stdout.lock())?)
        }
        Endpoint::Tcp(addr) => {
            let server = TcpServer::bind(service, &addr)?;
            eprintln!("listening on {}", server.endpoint()?);
            Ok(server.run()?)
        }
        Endpoint::Exec(_) => bail!("serve listens on stdio or tcp://host:port"),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Cmd::Serve(args) = &cli.command {
        return serve(args);
    }
    let manifest = manifest_for(&cli.command)?;
    let outputs = execute(&manifest)?;
    write_outputs(&manifest, &outputs)?;
    let mut stdout = std::io::stdout().lock();
    for line in &outputs.summary {
        writeln!(stdout, "{line}")?;
    }
    writeln!(stdout, "wrote {} file(s) to {}", outputs.files.len() + 1, manifest.out.display())?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("talo: error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
