// SPDX-License-Identifier: MIT OR Apache-2.0

//! Task-interfering layer discovery and test-time layer knockout.
//!
//! The crate provides a small deterministic layer-stack model, reversible
//! parameter interventions on its attention and MLP modules, a
//! multiple-choice evaluation harness, task-layer interaction analysis
//! (correlation, distance, clustering, sweep consistency), and the knockout
//! driver that picks and bypasses the most interfering layer for a task.
//!
//! All drivers talk to the model through [`EvalOracle`], so the same code
//! runs against the built-in model or a remote server speaking the
//! line-delimited [`protocol`].

pub mod checkpoint;
pub mod error;
pub mod export;
pub mod harness;
pub mod interaction;
pub mod intervention;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod protocol;
pub mod talo;

pub use error::{Result, TaloError};
pub use harness::{
    accuracy, load_task_suite, plant_interference, plant_interference_pair, sample_probe_set,
    save_task_suite, HeldOutSet, ItemOutcome, McqItem, PlantedInstance, ProbePool, ProbeSet, Score,
    TaskSuite,
};
pub use interaction::{
    cluster_tasks, compute_interaction_vector, consistency_correlation, distance_matrix, pearson,
    run_sweep, Clustering, CorrelationResult, SweepMatrix, TaskLayerInteractionVector,
};
pub use intervention::{apply, apply_many, transform_parameters, InterventionKind, InterventionSpec, Target};
pub use linalg::{Linear, Matrix};
pub use model::{build_toy_model, Activation, ForwardOptions, LayerStackModel, ModelConfig};
pub use oracle::{EvalOracle, LocalOracle};
pub use protocol::{Endpoint, RemoteOracle};
pub use talo::{run_talo, run_talo_pair, GainProfile, LayerSelection, TaloResult};
