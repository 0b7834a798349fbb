//! End-to-end acceptance checks. Runs without the libtest harness so that each
//! check prints one PASS/FAIL line; the process fails if any check fails.

mod common;

use std::time::Instant;

use common::*;
use featmerge::archive::save_network;
use featmerge::cli::{cmd_merge, MergeArgs};
use featmerge::connectivity::{
    build_swap_permutation, default_alphas, interpolation_curve, llfc_residual, random_swap_avoiding_clusters,
    swaps_within_clusters,
};
use featmerge::ifm::{beta_grid_search, ifm, IfmConfig, Recompute, DEFAULT_BETA_GRID};
use featmerge::inference::max_relative_deviation;
use featmerge::matching::{distance_matrix, DistanceOptions};
use featmerge::toytrain::{
    init_mlp, loss_and_gradients, make_synthetic_dataset, plant_duplicates, train_mlp, SyntheticKind, TrainConfig,
    DEFAULT_MAX_WIDTH,
};
use featmerge::{
    apply_permutation, enumerate_mergeable_positions, evaluate, forward, LabeledDataset, LayerSpec, NetworkGraph,
    Permutation, Precision,
};
use rand::seq::{index, SliceRandom};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn planted_cluster_recovery() -> Outcome {
    let start = Instant::now();
    let mut worst_dev = 0.0f64;
    for trial in 0..20u64 {
        let mut r = rng(1000 + trial);
        let depth = r.random_range(2..=3);
        let input = r.random_range(3..=12);
        let classes = r.random_range(2..=8);
        let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(16..=56)).collect();
        let mut widths = vec![input];
        widths.extend(&hidden);
        widths.push(classes);
        let mut net = random_mlp(&mut r, &widths, true, Precision::F32);

        let mut expected = Vec::new();
        for (h, &dim) in hidden.iter().enumerate() {
            let producer = 2 * h;
            let count = r.random_range(1..=(64 - dim).min(8));
            let sources = index::sample(&mut r, dim, count).into_vec();
            let pairs: Vec<(usize, usize)> = sources.iter().map(|&s| (s, 1)).collect();
            net = plant_duplicates(&net, producer, &pairs, DEFAULT_MAX_WIDTH).map_err(|e| e.to_string())?;
            let mut clusters: Vec<Vec<usize>> = sources.iter().enumerate().map(|(k, &s)| vec![s, dim + k]).collect();
            clusters.sort();
            expected.push(clusters);
        }

        let (merged, records) = ifm(&net, &IfmConfig::new(0.01)).map_err(|e| e.to_string())?;
        let found: Vec<Vec<Vec<usize>>> = records
            .iter()
            .map(|rec| {
                let mut c: Vec<Vec<usize>> = rec.merged_clusters().map(<[usize]>::to_vec).collect();
                c.sort();
                c
            })
            .collect();
        if found != expected {
            return Err(format!("trial {trial}: found {found:?}, planted {expected:?}"));
        }
        let batch = random_batch(&mut r, 100, &[input]);
        let dev = max_relative_deviation(
            &forward(&merged, &batch).map_err(|e| e.to_string())?,
            &forward(&net, &batch).map_err(|e| e.to_string())?,
        );
        worst_dev = worst_dev.max(dev);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_dev <= 1e-5 && secs < 30.0,
        format!("20/20 exact recoveries, max deviation {worst_dev:.2e}, {secs:.2}s"),
    )
}

fn distance_oracle() -> Outcome {
    let start = Instant::now();
    let mut compared = 0usize;
    for trial in 0..50u64 {
        let mut r = rng(2000 + trial);
        let net = if trial % 5 == 4 {
            let (c1, c2, hidden) = (r.random_range(2..=16), r.random_range(2..=16), r.random_range(2..=64));
            random_cnn(&mut r, c1, c2, hidden, 3)
        } else {
            let widths = [r.random_range(1..=16), r.random_range(2..=64), r.random_range(2..=64), 4];
            random_mlp(&mut r, &widths, trial % 2 == 0, Precision::F32)
        };
        for pos in enumerate_mergeable_positions(&net).map_err(|e| e.to_string())? {
            let consumer = &net.layers()[pos.consumers[0].layer];
            let inner = match consumer.kind {
                featmerge::LayerKind::Conv2d { kernel_h, kernel_w, .. } => kernel_h * kernel_w,
                _ => pos.consumers[0].block,
            };
            for include_bias in [true, false] {
                let matrix = distance_matrix(&net, &pos, DistanceOptions { include_bias }).map_err(|e| e.to_string())?;
                let oracle = naive_distance_matrix(&net, pos.producer, &[(pos.consumers[0].layer, inner)], include_bias);
                for m in 0..pos.dim {
                    for n in 0..pos.dim {
                        if m != n && matrix.get(m, n).to_bits() != oracle[m][n].to_bits() {
                            return Err(format!("network {trial} layer {} ({m},{n})", pos.producer));
                        }
                        compared += 1;
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, format!("50 networks, {compared} entries bitwise equal, {secs:.2}s"))
}

fn ring_data() -> LabeledDataset {
    make_synthetic_dataset(SyntheticKind::Ring, 1000, 0.05, 0).expect("dataset")
}

fn small_ring_mlp(data: &LabeledDataset) -> NetworkGraph {
    let config = TrainConfig {
        hidden: vec![16, 16],
        epochs: 40,
        seed: 0,
        ..TrainConfig::default()
    };
    train_mlp(&config, data).expect("training")
}

fn permutation_and_interpolation() -> Outcome {
    let start = Instant::now();
    let data = ring_data();
    let net = small_ring_mlp(&data);
    let base = evaluate(&net, &data).map_err(|e| e.to_string())?;

    let mut worst_loss = 0.0f64;
    for seed in 0..10 {
        let mut r = rng(seed);
        let mut perm = Permutation::identity();
        for pos in enumerate_mergeable_positions(&net).map_err(|e| e.to_string())? {
            let mut map: Vec<usize> = (0..pos.dim).collect();
            map.shuffle(&mut r);
            perm.insert(pos.producer, map).map_err(|e| e.to_string())?;
        }
        let m = evaluate(&apply_permutation(&net, &perm).map_err(|e| e.to_string())?, &data).map_err(|e| e.to_string())?;
        if m.accuracy != base.accuracy {
            return Err(format!("permutation {seed} changed accuracy {} -> {}", base.accuracy, m.accuracy));
        }
        worst_loss = worst_loss.max((m.loss - base.loss).abs());
    }

    // every hidden unit gets one exact twin
    let all: Vec<(usize, usize)> = (0..16).map(|i| (i, 1)).collect();
    let planted = plant_duplicates(&net, 0, &all, DEFAULT_MAX_WIDTH).map_err(|e| e.to_string())?;
    let planted = plant_duplicates(&planted, 2, &all, DEFAULT_MAX_WIDTH).map_err(|e| e.to_string())?;
    let (_, records) = ifm(&planted, &IfmConfig::new(0.01)).map_err(|e| e.to_string())?;
    let matched = build_swap_permutation(&records).map_err(|e| e.to_string())?;
    let random = random_swap_avoiding_clusters(&records, 0).map_err(|e| e.to_string())?;
    if matched.moved() != random.moved() || matched.moved() != 64 || swaps_within_clusters(&random, &records) {
        return Err(format!("swap cardinalities {} vs {}", matched.moved(), random.moved()));
    }
    let alphas = default_alphas();
    let flat = interpolation_curve(&planted, &matched, &data, &alphas).map_err(|e| e.to_string())?;
    let rough = interpolation_curve(&planted, &random, &data, &alphas).map_err(|e| e.to_string())?;
    let mid = rough.accuracy_at(0.5).ok_or("no alpha 0.5")?;
    let random_drop = base.accuracy - mid;
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_loss <= 1e-6 && flat.max_accuracy_drop() <= 0.005 && random_drop >= 0.05 && secs < 60.0,
        format!(
            "loss shift {worst_loss:.1e}, matched drop {:.3}, random drop at 0.5 {random_drop:.3} ({} of 64 moved), {secs:.2}s",
            flat.max_accuracy_drop(),
            random.moved()
        ),
    )
}

fn llfc_self_consistency() -> Outcome {
    let data = ring_data();
    let net = small_ring_mlp(&data);
    let alphas = default_alphas();
    let mut worst_self = 0.0f64;
    for layer in 0..net.num_layers() {
        worst_self = worst_self.max(llfc_residual(&net, &net, &data, layer, &alphas).map_err(|e| e.to_string())?);
    }

    let mut worst_linear = 0.0f64;
    for seed in 0..10 {
        let mut r = rng(3000 + seed);
        let mut linear = || {
            let layers = vec![LayerSpec::linear("fc1", 2, 16, true), LayerSpec::linear("fc2", 16, 2, true)];
            let mut w = std::collections::BTreeMap::new();
            w.insert("fc1.weight".to_string(), gaussian(&mut r, vec![16, 2], 1.0));
            w.insert("fc1.bias".to_string(), gaussian(&mut r, vec![16], 1.0));
            w.insert("fc2.weight".to_string(), gaussian(&mut r, vec![2, 16], 1.0));
            w.insert("fc2.bias".to_string(), gaussian(&mut r, vec![2], 1.0));
            NetworkGraph::new(vec![2], layers, w, Precision::F32).expect("linear network")
        };
        let (a, b) = (linear(), linear());
        worst_linear = worst_linear.max(llfc_residual(&a, &b, &data, 0, &alphas).map_err(|e| e.to_string())?);
    }
    check(
        worst_self <= 1e-6 && worst_linear <= 1e-6,
        format!("self residual {worst_self:.1e} over all layers, linear first layer {worst_linear:.1e}"),
    )
}

fn gradient_check() -> Outcome {
    let net = init_mlp(4, &[12, 12], 3, 5, Precision::F64).map_err(|e| e.to_string())?;
    let mut r = rng(4000);
    let x = random_batch(&mut r, 20, &[4]);
    let y: Vec<usize> = (0..20).map(|i| i % 3).collect();
    let (_, grads) = loss_and_gradients(&net, &x, &y).map_err(|e| e.to_string())?;
    let keys: Vec<&String> = net.weights().keys().collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let key = keys[r.random_range(0..keys.len())];
        let idx = r.random_range(0..net.weights()[key].numel());
        let loss_at = |delta: f64| -> Result<f64, String> {
            let mut w = net.weights().clone();
            w.get_mut(key).expect("key").data_mut()[idx] += delta;
            let moved = NetworkGraph::new(net.input_shape().to_vec(), net.layers().to_vec(), w, Precision::F64)
                .map_err(|e| e.to_string())?;
            Ok(loss_and_gradients(&moved, &x, &y).map_err(|e| e.to_string())?.0)
        };
        let numeric = (loss_at(h)? - loss_at(-h)?) / (2.0 * h);
        let analytic = grads[key].data()[idx];
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale == 0.0 { 0.0 } else { (analytic - numeric).abs() / scale.max(1e-8) };
        worst = worst.max(rel);
    }
    check(worst <= 1e-4, format!("100 probes, max relative error {worst:.2e}"))
}

fn scaled_pruning() -> Outcome {
    let start = Instant::now();
    let data = ring_data();
    let config = TrainConfig {
        hidden: vec![256, 256],
        epochs: 40,
        weight_decay: 3e-3,
        milestones: vec![30],
        seed: 0,
        ..TrainConfig::default()
    };
    let net = train_mlp(&config, &data).map_err(|e| e.to_string())?;
    let base = evaluate(&net, &data).map_err(|e| e.to_string())?;
    if base.accuracy < 0.97 {
        return Err(format!("train accuracy {:.3} below 0.97", base.accuracy));
    }
    let retention = (base.accuracy - 0.02) / base.accuracy;
    let ifm_base = IfmConfig::new(0.01).with_recompute(Recompute::Incremental);
    let search = beta_grid_search(&net, &DEFAULT_BETA_GRID, &data, retention, &ifm_base).map_err(|e| e.to_string())?;
    let monotone = search.rows.windows(2).all(|w| w[1].params <= w[0].params);
    let secs = start.elapsed().as_secs_f64();
    let Some(best) = search.best_row() else {
        return Err("no beta keeps accuracy within 2%".into());
    };
    let removed = 1.0 - best.param_fraction;
    check(
        removed >= 0.2 && base.accuracy - best.accuracy <= 0.02 && monotone && secs < 300.0,
        format!(
            "train acc {:.3}, beta {} removes {:.1}% of params at acc {:.3}, monotone {monotone}, {secs:.1}s",
            base.accuracy,
            best.beta,
            100.0 * removed,
            best.accuracy
        ),
    )
}

fn timing_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model = dir.path().join("planted.fma");
    let net = init_mlp(2, &[64, 64], 2, 9, Precision::F32).map_err(|e| e.to_string())?;
    let all: Vec<(usize, usize)> = (0..64).map(|i| (i, 1)).collect();
    let net = plant_duplicates(&net, 0, &all, DEFAULT_MAX_WIDTH).map_err(|e| e.to_string())?;
    let net = plant_duplicates(&net, 2, &all, DEFAULT_MAX_WIDTH).map_err(|e| e.to_string())?;
    save_network(&net, &model).map_err(|e| e.to_string())?;
    let args = MergeArgs {
        model,
        beta: Some(0.01),
        ..MergeArgs::default()
    };
    let report = cmd_merge(&args).map_err(|e| e.to_string())?;
    let timing = report.timing.ok_or("no timing in report")?;
    check(
        timing.iterations >= 100 && timing.mean_seconds >= 0.0 && timing.std_seconds >= 0.0,
        format!("{timing}"),
    )
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 7] = [
        ("planted cluster recovery", planted_cluster_recovery),
        ("distance oracle equivalence", distance_oracle),
        ("permutation and interpolation", permutation_and_interpolation),
        ("layerwise feature connectivity", llfc_self_consistency),
        ("gradient correctness", gradient_check),
        ("scaled pruning on ring", scaled_pruning),
        ("per-iteration timing", timing_harness),
    ];
    let mut failed = 0;
    for (name, run) in checks {
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
