// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;

use talo_core::checkpoint::{read_checkpoint, write_checkpoint};
use talo_core::interaction::run_sweep;
use talo_core::{
    apply_many, build_toy_model, plant_interference, plant_interference_pair, run_talo, run_talo_pair,
    EvalOracle, InterventionKind, InterventionSpec, LocalOracle, ModelConfig, Target,
};

#[test]
fn planted_labels_come_from_the_teacher_view() {
    let planted = plant_interference(ModelConfig::default(), 60, 5).unwrap();
    let oracle = LocalOracle::new(planted.model.clone());
    let layer = planted.planted_layer();
    let teacher = oracle
        .score(&[InterventionSpec::zero_attention(layer)], &planted.suite.items)
        .unwrap();
    assert!(teacher.is_perfect());
    let base = oracle.score(&[], &planted.suite.items).unwrap();
    assert!(base.fraction() <= 0.9);
}

#[test]
fn zeroing_sweep_peaks_at_the_planted_layer() {
    for seed in 0..4 {
        let planted = plant_interference(ModelConfig::default(), 60, seed).unwrap();
        let oracle = LocalOracle::new(planted.model.clone());
        let sweep = run_sweep(
            &oracle,
            std::slice::from_ref(&planted.suite),
            InterventionKind::Zeroing,
            Target::Attention,
        )
        .unwrap();
        let v = sweep.interaction_vector(0).values;
        let peak = (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(peak, planted.planted_layer(), "seed {seed}: {v:?}");
    }
}

#[test]
fn planting_is_deterministic() {
    let a = plant_interference(ModelConfig::default(), 40, 9).unwrap();
    let b = plant_interference(ModelConfig::default(), 40, 9).unwrap();
    assert_eq!(a.suite, b.suite);
    assert_eq!(a.planted_layers, b.planted_layers);
    assert_eq!(a.model.config, b.model.config);
}

#[test]
fn pair_search_recovers_both_planted_layers() {
    let mut recovered = 0;
    for seed in 0..6 {
        let planted = plant_interference_pair(ModelConfig::default(), 120, seed).unwrap();
        let oracle = LocalOracle::new(planted.model.clone());
        let result = run_talo_pair(&oracle, &planted.suite, 20, seed).unwrap();
        let got: HashSet<usize> = result.knocked_out.iter().copied().collect();
        let want: HashSet<usize> = planted.planted_layers.iter().copied().collect();
        if got == want {
            recovered += 1;
            assert!(result.heldout_knockout.is_perfect());
            let pair = result.pair.as_ref().unwrap();
            assert!(pair.pair_scores.iter().all(|&(l, _)| l != pair.first));
        }
    }
    assert!(recovered >= 5, "pair recovered in {recovered}/6 instances");
}

#[test]
fn single_knockout_beats_base_on_held_out_items() {
    let planted = plant_interference(ModelConfig::default(), 100, 2).unwrap();
    let oracle = LocalOracle::new(planted.model.clone());
    let result = run_talo(&oracle, &planted.suite, 10, 77).unwrap();
    assert_eq!(result.selection.selected, Some(planted.planted_layer()));
    assert!(result.delta_points > 0.0);
    let probe_total: usize = result.baseline_draws.iter().map(|d| d.probe_size).sum::<usize>()
        + result.selection.rounds.iter().map(|r| r.added).sum::<usize>();
    assert_eq!(probe_total + result.heldout_base.total, planted.suite.len());
}

#[test]
fn knockout_preconditions() {
    let planted = plant_interference(ModelConfig::default(), 30, 1).unwrap();
    let oracle = LocalOracle::new(planted.model.clone());
    assert!(run_talo(&oracle, &planted.suite, 0, 0).is_err());
    let err = run_talo(&oracle, &planted.suite, 25, 0).unwrap_err().to_string();
    assert!(err.contains("25 shots"), "{err}");

    let one_layer = build_toy_model(ModelConfig {
        num_layers: 1,
        ..ModelConfig::default()
    })
    .unwrap();
    assert!(run_talo_pair(&LocalOracle::new(one_layer), &planted.suite, 5, 0).is_err());
}

#[test]
fn checkpoint_preserves_predictions_under_interventions() {
    let planted = plant_interference(ModelConfig::default(), 30, 3).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&planted.model, &mut bytes).unwrap();
    let restored = read_checkpoint(bytes.as_slice()).unwrap();
    let specs = [
        InterventionSpec::zero_attention(1),
        InterventionSpec::new(InterventionKind::RandomNoise(4), Target::Mlp, 3),
    ];
    let a = apply_many(&planted.model, &specs).unwrap();
    let b = apply_many(&restored, &specs).unwrap();
    for item in &planted.suite.items {
        let la = a.option_logits(item).unwrap();
        let lb = b.option_logits(item).unwrap();
        assert_eq!(
            la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
