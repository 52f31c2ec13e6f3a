// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic fixtures shared by the benchmarks.

use talo_core::interaction::synthetic_families;
use talo_core::{
    build_toy_model, plant_interference, LayerStackModel, ModelConfig, PlantedInstance,
    TaskLayerInteractionVector,
};

/// Toy model with the default shape and `num_layers` layers.
pub fn model(num_layers: usize) -> LayerStackModel {
    build_toy_model(ModelConfig {
        num_layers,
        ..ModelConfig::default()
    })
    .expect("benchmark model config is valid")
}

/// Planted instance on the default six-layer shape.
pub fn planted(suite_size: usize, seed: u64) -> PlantedInstance {
    plant_interference(ModelConfig::default(), suite_size, seed).expect("planting succeeds for benchmark seeds")
}

/// Three families of interaction vectors with mild noise.
pub fn family_vectors(per_family: usize, layers: usize) -> Vec<TaskLayerInteractionVector> {
    synthetic_families(3, per_family, layers, 0.1, 17).0
}

/// `n` token sequences of length `len`, cycling through the vocabulary.
pub fn token_batch(n: usize, len: usize, vocab: u32) -> Vec<Vec<u32>> {
    (0..n)
        .map(|i| (0..len).map(|t| ((i * 31 + t * 7) as u32) % vocab).collect())
        .collect()
}
