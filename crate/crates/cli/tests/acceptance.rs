// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use talo_core::interaction::{adjusted_rand_index, synthetic_families};
use talo_core::protocol::{BuiltinService, ItemMode, TcpServer};
use talo_core::{
    apply, build_toy_model, cluster_tasks, compute_interaction_vector, consistency_correlation,
    distance_matrix, pearson, plant_interference, run_sweep, run_talo, run_talo_pair, EvalOracle,
    ForwardOptions, InterventionKind, InterventionSpec, ItemOutcome, LayerStackModel, LocalOracle,
    McqItem, ModelConfig, ProbePool, RemoteOracle, Score, SweepMatrix, Target, TaskSuite,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn toy(seed: u64) -> LayerStackModel {
    build_toy_model(ModelConfig {
        seed,
        ..ModelConfig::default()
    })
    .expect("default config is valid")
}

fn random_tokens(rng: &mut ChaCha8Rng, min_len: usize, max_len: usize, vocab: u32) -> Vec<u32> {
    let len = rng.random_range(min_len..=max_len);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Seeded suites with random prompts, four options and random answers.
fn fixture_suites(count: usize) -> Vec<TaskSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1C5);
    (0..count)
        .map(|t| {
            let n = rng.random_range(24..=40);
            let items = (0..n)
                .map(|i| {
                    let mut options = Vec::new();
                    while options.len() < 4 {
                        let tok = rng.random_range(0..64u32);
                        if !options.contains(&tok) {
                            options.push(tok);
                        }
                    }
                    McqItem {
                        id: format!("f{t}-{i:03}"),
                        prompt_tokens: random_tokens(&mut rng, 3, 12, 64),
                        options,
                        answer_index: rng.random_range(0..4),
                    }
                })
                .collect();
            TaskSuite::new(format!("fixture-{t}"), 64, items).expect("fixture suite is valid")
        })
        .collect()
}

fn bits(m: &talo_core::Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn bypass_exactness() -> Outcome {
    let model = toy(7);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let inputs: Vec<Vec<u32>> = (0..100).map(|_| random_tokens(&mut rng, 1, 16, 64)).collect();
    let mut compared = 0;
    for layer in 0..model.num_layers() {
        let zeroed = apply(&model, &InterventionSpec::zero_attention(layer)).map_err(err)?;
        for tokens in &inputs {
            let intervened = zeroed.forward(tokens).map_err(err)?;
            let (bypassed, _) = model
                .forward_with(
                    tokens,
                    ForwardOptions {
                        bypass_attention: Some(layer),
                        ..ForwardOptions::default()
                    },
                )
                .map_err(err)?;
            check(bits(&intervened) == bits(&bypassed), || {
                format!("layer {layer}: zeroed forward differs from bypass on {tokens:?}")
            })?;
            compared += 1;
        }
    }
    Ok(format!("{compared} forwards bit-identical over 6 layers"))
}

fn rank_one() -> Outcome {
    let model = toy(8);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let inputs: Vec<Vec<u32>> = (0..50).map(|_| random_tokens(&mut rng, 4, 16, 64)).collect();
    let mut worst: f64 = 0.0;
    for layer in 0..model.num_layers() {
        let spec = InterventionSpec::new(InterventionKind::UniformScaling, Target::Attention, layer);
        let scaled = apply(&model, &spec).map_err(err)?;
        for tokens in &inputs {
            let act = scaled.capture_attention_output(tokens, layer).map_err(err)?.values;
            let m = DMatrix::from_row_slice(act.rows(), act.cols(), act.as_slice());
            let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            check(sv[0] > 0.0, || format!("layer {layer}: zero attention output"))?;
            worst = worst.max(sv[1] / sv[0]);
        }
    }
    check(worst < 1e-6, || format!("max σ2/σ1 = {worst:e}"))?;
    Ok(format!("max σ2/σ1 = {worst:.3e} over 300 captures"))
}

/// Independent predictor: last-position option logits, first maximum wins.
fn predict_by_logits(logits: &talo_core::Matrix, item: &McqItem) -> usize {
    let last = logits.row(logits.rows() - 1);
    let mut best = 0;
    for (i, &tok) in item.options.iter().enumerate() {
        if last[tok as usize] > last[item.options[best] as usize] {
            best = i;
        }
    }
    best
}

fn count_correct(items: &[McqItem], mut logits: impl FnMut(&[u32]) -> talo_core::Matrix) -> usize {
    items
        .iter()
        .filter(|item| predict_by_logits(&logits(&item.prompt_tokens), item) == item.answer_index)
        .count()
}

fn interaction_oracle() -> Outcome {
    let model = toy(9);
    let oracle = LocalOracle::new(model.clone());
    let suites = fixture_suites(5);
    let mut nonzero = 0;
    for suite in &suites {
        let n = suite.len();
        let base = count_correct(&suite.items, |t| model.forward(t).unwrap());

        let zero = compute_interaction_vector(&oracle, suite, InterventionKind::Zeroing, Target::Attention)
            .map_err(err)?;
        let mean = compute_interaction_vector(&oracle, suite, InterventionKind::MeanReplacement, Target::Mlp)
            .map_err(err)?;
        for layer in 0..model.num_layers() {
            let bypass = ForwardOptions {
                bypass_attention: Some(layer),
                ..ForwardOptions::default()
            };
            let c_zero = count_correct(&suite.items, |t| model.forward_with(t, bypass).unwrap().0);
            let expect_zero = 100.0 * (c_zero as f64 - base as f64) / n as f64;
            check(zero.values[layer] == expect_zero, || {
                format!(
                    "{} zero:attn:{layer}: {} vs independent {expect_zero}",
                    suite.task_id, zero.values[layer]
                )
            })?;

            let meaned = apply(
                &model,
                &InterventionSpec::new(InterventionKind::MeanReplacement, Target::Mlp, layer),
            )
            .map_err(err)?;
            let c_mean = count_correct(&suite.items, |t| meaned.forward(t).unwrap());
            let expect_mean = 100.0 * (c_mean as f64 - base as f64) / n as f64;
            check(mean.values[layer] == expect_mean, || {
                format!(
                    "{} mean:mlp:{layer}: {} vs independent {expect_mean}",
                    suite.task_id, mean.values[layer]
                )
            })?;
            nonzero += usize::from(expect_zero != 0.0) + usize::from(expect_mean != 0.0);
        }
    }
    Ok(format!("5 suites × 6 layers × 2 kinds exact ({nonzero} non-zero entries)"))
}

fn planted_recovery() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig::default();
    let mut hits = 0;
    let mut min_delta = f64::INFINITY;
    let mut misses = Vec::new();
    for seed in 0..20u64 {
        let planted = plant_interference(config, 100, seed).map_err(err)?;
        let oracle = LocalOracle::new(planted.model.clone());
        let result = run_talo(&oracle, &planted.suite, 15, seed).map_err(err)?;
        if result.selection.selected == Some(planted.planted_layer()) {
            hits += 1;
            min_delta = min_delta.min(result.delta_points);
        } else {
            misses.push(format!(
                "seed {seed}: planted {} selected {:?}",
                planted.planted_layer(),
                result.selection.selected
            ));
        }
    }
    let elapsed = start.elapsed();
    check(hits >= 19, || format!("{hits}/20 recovered; {}", misses.join("; ")))?;
    check(min_delta >= 10.0, || {
        format!("{hits}/20 recovered but minimum held-out delta is {min_delta:.2} points")
    })?;
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{hits}/20 recovered, min held-out delta {min_delta:.2} points, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

/// Oracle with hand-assigned item behaviour: items in `hard` are answered
/// correctly only when one of the `fixers` layers is zeroed; items in
/// `fragile[l]` become wrong when layer `l` is zeroed.
struct ScriptedOracle {
    layers: usize,
    hard: HashSet<String>,
    fixers: Vec<usize>,
    fragile: Vec<HashSet<String>>,
}

impl EvalOracle for ScriptedOracle {
    fn num_layers(&self) -> usize {
        self.layers
    }

    fn evaluate(&self, interventions: &[InterventionSpec], items: &[McqItem]) -> talo_core::Result<Vec<ItemOutcome>> {
        let zeroed: Vec<usize> = interventions.iter().map(|s| s.layer).collect();
        Ok(items
            .iter()
            .map(|item| {
                let fixed = zeroed.iter().any(|l| self.fixers.contains(l));
                let broken = zeroed.iter().any(|&l| self.fragile[l].contains(&item.id));
                let correct = !broken && (!self.hard.contains(&item.id) || fixed);
                let wrong = (item.answer_index + 1) % item.options.len();
                ItemOutcome {
                    id: item.id.clone(),
                    predicted: if correct { item.answer_index } else { wrong },
                    correct,
                }
            })
            .collect())
    }
}

fn scripted_suite(n: usize) -> TaskSuite {
    let items = (0..n)
        .map(|i| McqItem {
            id: format!("s{i:03}"),
            prompt_tokens: vec![1, 2, 3],
            options: vec![4, 5, 6, 7],
            answer_index: i % 4,
        })
        .collect();
    TaskSuite::new("scripted", 8, items).expect("scripted suite is valid")
}

fn tie_break_transcript() -> Outcome {
    let (shots, seed) = (15, 2024);
    let suite = scripted_suite(60);
    let mut pool = ProbePool::new(&suite, seed, 1);
    let order: Vec<String> = pool.draw(59).map_err(err)?.into_iter().map(|i| i.id).collect();
    let mut order = order;
    order.extend(pool.held_out().items.into_iter().map(|i| i.id));

    // stream positions: first probe all easy; redraw has 3 hard items; the
    // 8- and 4-item augmentations carry 4 and 2; the 18 held-out items 9.
    let hard_positions = (27..30).chain(34..38).chain(40..42).chain((42..60).step_by(2));
    let oracle = ScriptedOracle {
        layers: 6,
        hard: hard_positions.map(|p| order[p].clone()).collect(),
        fixers: vec![2, 4],
        fragile: vec![HashSet::new(); 6],
    };
    let result = run_talo(&oracle, &suite, shots, seed).map_err(err)?;

    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/tiebreak_transcript.json");
    let golden: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&golden_path).map_err(err)?).map_err(err)?;
    let full = serde_json::to_value(&result).map_err(err)?;
    let mut actual = serde_json::Map::new();
    for key in golden.as_object().ok_or("golden is not an object")?.keys() {
        actual.insert(key.clone(), full[key].clone());
    }
    let actual = serde_json::Value::Object(actual);
    check(actual == golden, || {
        format!(
            "transcript differs from golden:\n{}",
            serde_json::to_string_pretty(&actual).unwrap()
        )
    })?;
    Ok("1 redraw, +8 then +4 augmentation, tie kept, layer 4 selected".into())
}

fn fallback_safety() -> Outcome {
    let suite = scripted_suite(80);
    let ids: Vec<String> = suite.items.iter().map(|i| i.id.clone()).collect();
    let oracle = ScriptedOracle {
        layers: 6,
        hard: ids.iter().step_by(3).cloned().collect(),
        fixers: vec![],
        fragile: (0..6)
            .map(|l| ids.iter().skip(1 + l).step_by(7).cloned().collect())
            .collect(),
    };
    let mut runs = 0;
    for seed in 0..5 {
        for shots in [10, 15, 20] {
            let result = run_talo(&oracle, &suite, shots, seed).map_err(err)?;
            let gains = &result.selection.rounds[0].gain_counts;
            check(gains.iter().all(|&g| g <= 0), || format!("scripted gain positive: {gains:?}"))?;
            check(result.selection.selected.is_none(), || {
                format!("seed {seed} shots {shots}: selected {:?}", result.selection.selected)
            })?;
            check(
                result.knocked_out.is_empty()
                    && result.heldout_knockout == result.heldout_base
                    && result.delta_points == 0.0,
                || format!("seed {seed} shots {shots}: held-out changed: {result:?}"),
            )?;
            runs += 1;
        }
    }
    Ok(format!("{runs} runs, all None with knockout accuracy equal to base"))
}

/// Pair-counting form of the adjusted Rand index.
fn pair_count_ari(a: &[usize], b: &[usize]) -> f64 {
    let (mut both, mut only_a, mut only_b, mut neither) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let num = 2.0 * (both * neither - only_a * only_b);
    let den = (both + only_a) * (only_a + neither) + (both + only_b) * (only_b + neither);
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

fn correlation_math() -> Outcome {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12;
    let fixtures: [(&[f64], &[f64], f64); 4] = [
        (&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0], 0.8),
        (&[1.0, 2.0, 3.0], &[1.0, 0.0, 4.0], 9.0 / 156f64.sqrt()),
        (&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0], -1.0),
        (&[2.0, 0.0, -2.0, 1.0], &[1.0, 1.0, -1.0, -1.0], 3.0 / 35f64.sqrt()),
    ];
    for (a, b, expected) in fixtures {
        let r = pearson(a, b).map_err(err)?;
        check(close(r, expected), || format!("pearson({a:?}, {b:?}) = {r}, expected {expected}"))?;
    }

    let tlv = |id: &str, v: &[f64]| talo_core::TaskLayerInteractionVector {
        task_id: id.into(),
        kind: InterventionKind::Zeroing,
        values: v.to_vec(),
    };
    let result = distance_matrix(&[
        tlv("x", &[1.0, 2.0, 3.0, 4.0]),
        tlv("y", &[1.0, 3.0, 2.0, 4.0]),
        tlv("z", &[4.0, 3.0, 2.0, 1.0]),
    ])
    .map_err(err)?;
    let expected_d = [[0.0, 0.2, 2.0], [0.2, 0.0, 1.8], [2.0, 1.8, 0.0]];
    for (i, (row, want)) in result.distance.iter().zip(&expected_d).enumerate() {
        for (j, (&d, &w)) in row.iter().zip(want).enumerate() {
            check(close(d, w), || format!("d[{i}][{j}] = {d}, expected {w}"))?;
        }
    }

    let mut worst: f64 = 1.0;
    for seed in 0..10 {
        let (vectors, truth) = synthetic_families(3, 8, 32, 0.1, seed);
        let clustering = cluster_tasks(&distance_matrix(&vectors).map_err(err)?, 3).map_err(err)?;
        let ari = pair_count_ari(&clustering.labels, &truth);
        let lib_ari = adjusted_rand_index(&clustering.labels, &truth).map_err(err)?;
        check(close(ari, lib_ari), || format!("seed {seed}: ARI {lib_ari} vs pair-count {ari}"))?;
        worst = worst.min(ari);
    }
    check(worst >= 0.9, || format!("minimum ARI {worst}"))?;
    Ok(format!("4 ρ fixtures and 3×3 distances within 1e-12, min ARI {worst:.3} over 10 seeds"))
}

fn noise_sweep(seed: u64) -> SweepMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tasks, layers, n) = (20, 10, 50);
    let mut score = || Score {
        correct: rng.random_range(0..=n),
        total: n,
    };
    SweepMatrix {
        kind: InterventionKind::Zeroing,
        target: Target::Attention,
        tasks: (0..tasks).map(|t| format!("noise-{t:02}")).collect(),
        base: (0..tasks).map(|_| score()).collect(),
        cells: (0..tasks).map(|_| (0..layers).map(|_| score()).collect()).collect(),
    }
}

fn consistency() -> Outcome {
    let oracle = LocalOracle::new(toy(10));
    let sweep = run_sweep(&oracle, &fixture_suites(5), InterventionKind::Zeroing, Target::Attention)
        .map_err(err)?;
    let own = consistency_correlation(&sweep, &sweep).map_err(err)?;
    check(own == 1.0, || format!("self-consistency {own}"))?;

    let mut worst: f64 = 0.0;
    for (a, b) in [(1, 2), (3, 4), (5, 6)] {
        let (x, y) = (noise_sweep(a), noise_sweep(b));
        let rho = consistency_correlation(&x, &y).map_err(err)?;
        worst = worst.max(rho.abs());
    }
    check(worst < 0.3, || format!("independent noise sweeps gave |ρ| = {worst}"))?;
    Ok(format!("self ρ = 1 exactly, max |ρ| = {worst:.3} on 200-pair noise sweeps"))
}

fn talo_bin() -> &'static str {
    env!("CARGO_BIN_EXE_talo")
}

fn cli(args: &[&str]) -> Result<String, String> {
    let output = Command::new(talo_bin()).args(args).output().map_err(err)?;
    if !output.status.success() {
        return Err(format!(
            "talo {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&output.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&output.stdout).into_owned())
}

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(err)? {
        let entry = entry.map_err(err)?;
        files.insert(
            entry.file_name().to_string_lossy().into_owned(),
            std::fs::read(entry.path()).map_err(err)?,
        );
    }
    Ok(files)
}

fn determinism_and_duality() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let root = tmp.path();
    let path = |name: &str| -> PathBuf { root.join(name) };
    let s = |p: PathBuf| p.to_string_lossy().into_owned();

    for seed in ["1", "2", "3"] {
        cli(&["plant", "--seed", seed, "--out", &s(path(&format!("plant{seed}")))])?;
    }
    let model = s(path("plant1/model.json"));
    let suites = format!(
        "{},{},{}",
        s(path("plant1/suite.txt")),
        s(path("plant2/suite.txt")),
        s(path("plant3/suite.txt"))
    );
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("talo", vec!["talo", "--model-config", &model, "--suite", &suites, "--shots", "15", "--seed", "5"]),
        ("pair", vec!["talo", "--pair", "--model-config", &model, "--suite", &suites, "--shots", "10"]),
        ("sweep", vec!["sweep", "--model-config", &model, "--suite", &suites, "--kind", "zero,uniform,noise", "--target", "attn,mlp"]),
        ("cluster", vec!["cluster", "--model-config", &model, "--suite", &suites, "--clusters", "2"]),
        ("consistency", vec!["consistency", "--model-config", &model, "--suite", &suites]),
        ("ablate", vec!["ablate", "--model-config", &model, "--suite", &suites, "--seed", "3"]),
    ]
    .into_iter()
    .map(|(name, args)| (name, args.into_iter().map(String::from).collect()))
    .collect();

    let mut dirs = vec![path("plant1"), path("plant2"), path("plant3")];
    for (name, mut args) in runs {
        args.extend(["--out".to_string(), s(path(name))]);
        cli(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
        dirs.push(path(name));
    }
    let mut files = 0;
    for dir in &dirs {
        let before = snapshot(dir)?;
        cli(&["replay", &s(dir.join("manifest.json"))])?;
        let after = snapshot(dir)?;
        check(before == after, || format!("replay of {} changed its outputs", dir.display()))?;
        files += before.len();
    }

    // Protocol duality, in process over loopback TCP.
    let planted = plant_interference(ModelConfig::default(), 100, 4).map_err(err)?;
    let mut suites = fixture_suites(2);
    suites.push(planted.suite.clone());
    let local = LocalOracle::new(planted.model.clone());
    let server = TcpServer::bind(BuiltinService::new(planted.model.clone(), &suites), "127.0.0.1:0").map_err(err)?;
    let endpoint = server.endpoint().map_err(err)?;
    server.spawn();
    let inline = RemoteOracle::connect(&endpoint).map_err(err)?;
    let by_id = RemoteOracle::connect(&endpoint).map_err(err)?.with_item_mode(ItemMode::ById);
    let mut compared = 0;
    for remote in [&inline, &by_id] {
        for shots in [10, 15] {
            let r = run_talo(remote, &planted.suite, shots, 7).map_err(err)?;
            let l = run_talo(&local, &planted.suite, shots, 7).map_err(err)?;
            check(r == l, || format!("remote talo differs at shots {shots}"))?;
            let r = run_talo_pair(remote, &planted.suite, shots, 7).map_err(err)?;
            let l = run_talo_pair(&local, &planted.suite, shots, 7).map_err(err)?;
            check(r == l, || format!("remote talo pair differs at shots {shots}"))?;
            compared += 2;
        }
        for kind in [
            InterventionKind::Zeroing,
            InterventionKind::UniformScaling,
            InterventionKind::MeanReplacement,
            InterventionKind::RandomNoise(11),
        ] {
            for target in [Target::Attention, Target::Mlp] {
                let r = run_sweep(remote, &suites, kind, target).map_err(err)?;
                let l = run_sweep(&local, &suites, kind, target).map_err(err)?;
                check(r == l, || format!("remote sweep differs for {kind} on {target}"))?;
                compared += 1;
            }
        }
    }

    // Same through the CLI: a spawned stdio server versus the built-in model.
    let plant4 = path("plant4");
    cli(&["plant", "--seed", "4", "--out", &s(plant4.clone())])?;
    let model4 = s(plant4.join("model.json"));
    let suite4 = s(plant4.join("suite.txt"));
    let exec = format!("exec:{} serve --model-config {model4}", talo_bin());
    for (cmd, file) in [("talo", "talo.jsonl"), ("sweep", "sweep_zero_attn.csv")] {
        let mut common = vec![cmd, "--suite", suite4.as_str()];
        if cmd == "talo" {
            common.extend(["--shots", "15"]);
        }
        let local_out = s(path(&format!("{cmd}-local")));
        let remote_out = s(path(&format!("{cmd}-remote")));
        let mut local_args = common.clone();
        local_args.extend(["--model-config", model4.as_str(), "--out", local_out.as_str()]);
        let mut remote_args = common.clone();
        remote_args.extend(["--endpoint", exec.as_str(), "--out", remote_out.as_str()]);
        cli(&local_args)?;
        cli(&remote_args)?;
        let a = std::fs::read(Path::new(&local_out).join(file)).map_err(err)?;
        let b = std::fs::read(Path::new(&remote_out).join(file)).map_err(err)?;
        check(a == b, || format!("{file} differs between local and exec transport"))?;
        compared += 1;
    }

    Ok(format!(
        "{} manifests replayed byte-identically ({files} files), {compared} local/remote comparisons equal",
        dirs.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("residual-bypass exactness", bypass_exactness),
        ("rank-one attention output under uniform scaling", rank_one),
        ("interaction-vector oracle equivalence", interaction_oracle),
        ("planted interference recovery", planted_recovery),
        ("tie-break protocol conformance", tie_break_transcript),
        ("fallback safety", fallback_safety),
        ("correlation and clustering math", correlation_math),
        ("consistency analysis", consistency),
        ("determinism and protocol duality", determinism_and_duality),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail} ({secs:.2}s)", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {reason} ({secs:.2}s)", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
