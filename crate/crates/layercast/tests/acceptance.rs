//! Acceptance suite: one pass/fail line per criterion, run sequentially so
//! wall-clock bounds are meaningful on a single core.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the table.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use layercast::data::{split, synth_generate, to_thickness, ThicknessRecord};
use layercast::gradcheck::{check_tiny_model, run_op_suite};
use layercast::graph::{build_partitioned_edges, window_starts, PartitionSpec};
use layercast::model::{
    alpha_param_names, forward, init_params, sage_layer, Aggregator, ModelConfig, ModelInput,
    SkipMode,
};
use layercast::params::ParamSet;
use layercast::report::{boundary_rmse, rmse, run_trials};
use layercast::tape::Tape;
use layercast::tensor::Tensor;
use layercast::train::{step_lr, train_one, PlateauScheduler, TrainConfig};

fn desk_corpus(count: usize, seed: u64) -> Vec<ThicknessRecord> {
    synth_generate(count, seed, 256, 21)
        .iter()
        .map(|r| to_thickness(r).unwrap())
        .collect()
}

fn c01_gradient_suite() -> String {
    let started = Instant::now();
    let report = run_op_suite(0, 1e-5, 1e-4).unwrap();
    for e in &report.entries {
        assert!(
            e.max_rel_err <= 1e-4,
            "op {} rel err {:.3e} > 1e-4",
            e.name,
            e.max_rel_err
        );
    }
    let model_err = check_tiny_model(0, 1e-5).unwrap();
    assert!(model_err <= 1e-4, "tiny model rel err {model_err:.3e} > 1e-4");
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient suite took {secs:.1}s, budget 60s");
    format!(
        "worst op {:.2e}, model {:.2e}, {:.1}s",
        report.worst(),
        model_err,
        secs
    )
}

fn c02_sage_oracle() -> String {
    // hand example: identity weights, neighbors {2,3} of node 1 (1-based)
    let mut tape = Tape::new();
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let w_root = tape.leaf(eye.clone()).unwrap();
    let w_neigh = tape.leaf(eye).unwrap();
    let x = tape
        .leaf(Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 2.0, 2.0, 0.0]).unwrap())
        .unwrap();
    let input = ModelInput {
        features: vec![],
        adjacency: Arc::new(vec![vec![1, 2], vec![0], vec![0]]),
        weighted_adjacency: None,
    };
    let out = sage_layer(
        &mut tape,
        x,
        w_root,
        w_neigh,
        None,
        &input,
        Aggregator::UnweightedMean,
    )
    .unwrap();
    let row0 = &tape.value(out).data()[..2];
    assert!(
        (row0[0] - 2.0).abs() <= 1e-12 && (row0[1] - 1.0).abs() <= 1e-12,
        "hand example gave {row0:?}, expected [2, 1]"
    );

    // 100 random graphs against a naive per-node loop
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(4..12usize);
        let d_in = rng.gen_range(2..5usize);
        let d_out = rng.gen_range(2..5usize);
        let feats: Vec<f64> = (0..n * d_in).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let wr: Vec<f64> = (0..d_out * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wn: Vec<f64> = (0..d_out * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lists: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut l: Vec<usize> =
                    (0..n).filter(|&j| j != i && rng.gen::<f64>() < 0.4).collect();
                if l.is_empty() {
                    l.push((i + 1) % n);
                }
                l
            })
            .collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![n, d_in], feats.clone()).unwrap()).unwrap();
        let a = tape.leaf(Tensor::new(vec![d_out, d_in], wr.clone()).unwrap()).unwrap();
        let b = tape.leaf(Tensor::new(vec![d_out, d_in], wn.clone()).unwrap()).unwrap();
        let input = ModelInput {
            features: vec![],
            adjacency: Arc::new(lists.clone()),
            weighted_adjacency: None,
        };
        let out =
            sage_layer(&mut tape, x, a, b, None, &input, Aggregator::UnweightedMean).unwrap();
        for i in 0..n {
            let mut mean = vec![0.0; d_in];
            for &j in &lists[i] {
                for c in 0..d_in {
                    mean[c] += feats[j * d_in + c];
                }
            }
            for m in mean.iter_mut() {
                *m /= lists[i].len() as f64;
            }
            for o in 0..d_out {
                let mut expect = 0.0;
                for c in 0..d_in {
                    expect += feats[i * d_in + c] * wr[o * d_in + c] + mean[c] * wn[o * d_in + c];
                }
                let err = (tape.value(out).at2(i, o) - expect).abs();
                worst = worst.max(err);
                assert!(err <= 1e-12, "naive oracle mismatch: {err:.3e}");
            }
        }
    }
    format!("hand case exact, 100 random graphs worst abs err {worst:.2e}")
}

fn c03_partition_oracle() -> String {
    let spec = PartitionSpec::new(5, 3).unwrap();
    let edges = build_partitioned_edges(7, &spec).unwrap();
    assert_eq!(edges.len(), 17, "(n=7, W=5, S=3) must give 17 edges");

    let mut cases = 0usize;
    for w in [2usize, 3, 5, 8] {
        for s in 1..w {
            let spec = PartitionSpec::new(w, s).unwrap();
            for n in 5..=64usize {
                if n < w {
                    assert!(build_partitioned_edges(n, &spec).is_err());
                    continue;
                }
                let got = build_partitioned_edges(n, &spec).unwrap();
                let starts = window_starts(n, &spec).unwrap();
                let mut oracle = Vec::new();
                for i in 0..n {
                    for j in i + 1..n {
                        if starts.iter().any(|&st| i >= st && j < st + w) {
                            oracle.push((i, j));
                        }
                    }
                }
                assert_eq!(got, oracle, "mismatch at n={n} w={w} s={s}");
                cases += 1;
            }
        }
    }
    format!("17-edge case exact; {cases} (n,W,S) grids match the membership oracle")
}

fn c04_skip_limit_identities() -> String {
    let cfg = ModelConfig {
        d: 8,
        l_sage: 2,
        n_blocks: 3,
        n_heads: 2,
        dropout_p: 0.0,
        m: 2,
        k: 3,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let n = 10;
    let features: Vec<Tensor> = (0..cfg.k)
        .map(|_| {
            let data: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::new(vec![n, 3], data).unwrap()
        })
        .collect();
    let edges = build_partitioned_edges(n, &PartitionSpec::default()).unwrap();
    let input = ModelInput {
        features,
        adjacency: layercast::graph::neighbor_lists(n, &edges),
        weighted_adjacency: None,
    };
    let eval = |params: &ParamSet, cfg: &ModelConfig| {
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let out = forward(&mut tape, params, cfg, &input, &mut drng, false).unwrap();
        tape.value(out).data().to_vec()
    };

    // alpha = 1: output invariant under randomized attention/FFN parameters
    let mut params = init_params(&cfg, 77).unwrap();
    for name in alpha_param_names(&cfg) {
        params.set_value(&name, Tensor::scalar(1.0)).unwrap();
    }
    let base = eval(&params, &cfg);
    let block_param_names: Vec<String> = params
        .iter()
        .map(|(_, p)| p.name.clone())
        .filter(|nm| {
            nm.contains(".attn.") || nm.contains(".ffn.") || nm.contains(".ln1") || nm.contains(".ln2")
        })
        .collect();
    for nm in block_param_names {
        let id = params.id(&nm).unwrap();
        let shape = params.value(id).shape().to_vec();
        let data: Vec<f64> = (0..params.value(id).len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        params.set_value(&nm, Tensor::new(shape, data).unwrap()).unwrap();
    }
    let randomized = eval(&params, &cfg);
    let mut worst1 = 0.0f64;
    for (a, b) in base.iter().zip(&randomized) {
        worst1 = worst1.max((a - b).abs());
    }
    assert!(worst1 <= 1e-12, "alpha=1 invariance violated: {worst1:.3e}");

    // alpha = 0: equals the no-skip chain with per-block LN
    let mut params0 = init_params(&cfg, 78).unwrap();
    for name in alpha_param_names(&cfg) {
        params0.set_value(&name, Tensor::scalar(0.0)).unwrap();
    }
    let a = eval(&params0, &cfg);
    let cfg_ln = ModelConfig { skip: SkipMode::LayerNormOnly, ..cfg.clone() };
    let b = eval(&params0, &cfg_ln);
    let mut worst0 = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        worst0 = worst0.max((x - y).abs());
    }
    assert!(worst0 <= 1e-12, "alpha=0 chain mismatch: {worst0:.3e}");
    format!("alpha=1 invariance {worst1:.2e}, alpha=0 chain diff {worst0:.2e}")
}

fn c05_boundary_rmse_identity() -> String {
    let y = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let yhat = Tensor::new(vec![1, 4], vec![2.0, 2.0, 3.0, 6.0]).unwrap();
    let hand = boundary_rmse(&yhat, &y, 1).unwrap();
    assert!(
        (hand - 2.5f64.sqrt()).abs() <= 1e-9,
        "hand case gave {hand}, expected sqrt(2.5)"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let m = rng.gen_range(1..6usize);
        let half = rng.gen_range(1..8usize);
        let w = 2 * half;
        let p: Vec<f64> = (0..m * w).map(|_| rng.gen_range(-9.0..9.0)).collect();
        let t: Vec<f64> = (0..m * w).map(|_| rng.gen_range(-9.0..9.0)).collect();
        let pt = Tensor::new(vec![m, w], p).unwrap();
        let tt = Tensor::new(vec![m, w], t).unwrap();
        let full = boundary_rmse(&pt, &tt, half).unwrap();
        let pooled = rmse(&pt, &tt).unwrap();
        let diff = (full - pooled).abs();
        worst = worst.max(diff);
        assert!(diff <= 1e-9, "2p=w identity violated by {diff:.3e}");
    }
    format!("hand case sqrt(2.5) exact; 50 random 2p=w cases, worst diff {worst:.2e}")
}

fn c06_overfit_one_record() -> String {
    let started = Instant::now();
    let records = desk_corpus(1, 606);
    let cfg = ModelConfig {
        d: 32,
        n_blocks: 2,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        lr0: 1e-3,
        epochs: 500,
        ..TrainConfig::default()
    };
    let seqs = layercast::train::build_all_sequences(
        &records,
        &cfg,
        &PartitionSpec::default(),
        false,
    )
    .unwrap();
    let train_set: Vec<_> = seqs.iter().collect();
    let run = train_one(&train_set, &[], &cfg, &tc, 606).unwrap();
    assert!(run.diverged.is_none(), "diverged: {:?}", run.diverged);
    // eval-mode RMSE on the memorized record
    let params = run.checkpoint.to_param_set().unwrap();
    let data = [(
        layercast::train::encode_sequence(&seqs[0], &run.checkpoint.norm_stats, cfg.aggregator),
        seqs[0].targets.clone(),
    )];
    let mse = layercast::train::pooled_mse(&params, &cfg, &data).unwrap();
    let train_rmse = mse.sqrt();
    let secs = started.elapsed().as_secs_f64();
    assert!(
        train_rmse < 0.5,
        "train RMSE {train_rmse:.4} px did not memorize below 0.5 px"
    );
    assert!(secs < 300.0, "overfit check took {secs:.1}s, budget 300s");
    format!("train RMSE {train_rmse:.3} px in {secs:.0}s")
}

fn c07_ordering_property() -> String {
    let started = Instant::now();
    let records = desk_corpus(60, 707);
    let spec = PartitionSpec::default();
    let tc = TrainConfig { epochs: 100, seed: 707, ..TrainConfig::default() };
    let base = ModelConfig {
        d: 32,
        n_blocks: 4,
        alpha0: 0.25,
        ..ModelConfig::default()
    };
    let graph_only = ModelConfig { n_blocks: 0, ..base.clone() };
    let no_skip = ModelConfig { skip: SkipMode::Off, ..base.clone() };

    let full_agg = run_trials(&records, &base, &tc, &spec, false, 3, &[1, 2, 5, 10]).unwrap();
    let graph_agg = run_trials(&records, &graph_only, &tc, &spec, false, 3, &[1, 2, 5, 10]).unwrap();
    let noskip_agg = run_trials(&records, &no_skip, &tc, &spec, false, 3, &[1, 2, 5, 10]).unwrap();

    let secs = started.elapsed().as_secs_f64();
    println!(
        "    [c07 detail] full {:.4}+/-{:.4} | no-skip {:.4}+/-{:.4} | graph-only {:.4}+/-{:.4} | {:.0}s",
        full_agg.rmse_mean,
        full_agg.rmse_std,
        noskip_agg.rmse_mean,
        noskip_agg.rmse_std,
        graph_agg.rmse_mean,
        graph_agg.rmse_std,
        secs
    );
    assert!(
        full_agg.rmse_mean < graph_agg.rmse_mean,
        "full ({:.4}) not below graph-only ({:.4})",
        full_agg.rmse_mean,
        graph_agg.rmse_mean
    );
    assert!(
        full_agg.rmse_mean < noskip_agg.rmse_mean,
        "full ({:.4}) not below no-skip ({:.4})",
        full_agg.rmse_mean,
        noskip_agg.rmse_mean
    );
    assert!(secs < 1800.0, "ordering experiment took {secs:.0}s, budget 1800s");
    format!(
        "full {:.3} < no-skip {:.3} and < graph-only {:.3} ({:.0}s)",
        full_agg.rmse_mean, noskip_agg.rmse_mean, graph_agg.rmse_mean, secs
    )
}

fn c08_train_determinism() -> String {
    let bin = env!("CARGO_BIN_EXE_layercast");
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let status = Command::new(bin)
        .args([
            "synth-gen",
            "--count",
            "8",
            "--seed",
            "3",
            "--width",
            "32",
            "--boundaries",
            "8",
            "--out",
        ])
        .arg(&corpus)
        .status()
        .unwrap();
    assert!(status.success());
    let train = |out: &str| {
        let status = Command::new(bin)
            .args([
                "train",
                "--data",
            ])
            .arg(&corpus)
            .args([
                "--out",
                &dir.path().join(out).display().to_string(),
                "--l",
                "3",
                "--m",
                "2",
                "--min-layers",
                "5",
                "--d",
                "8",
                "--blocks",
                "1",
                "--heads",
                "2",
                "--epochs",
                "4",
                "--seed",
                "9",
            ])
            .status()
            .unwrap();
        assert!(status.success());
    };
    train("a");
    train("b");
    let read = |name: &str, file: &str| std::fs::read(dir.path().join(name).join(file)).unwrap();
    assert_eq!(
        read("a", "loss_trace.csv"),
        read("b", "loss_trace.csv"),
        "loss traces differ"
    );
    assert_eq!(
        read("a", "checkpoint.json"),
        read("b", "checkpoint.json"),
        "checkpoints differ"
    );
    "two train invocations byte-identical (trace + checkpoint)".to_string()
}

fn c09_scheduler_contract() -> String {
    // plateau: constant validation loss halves at epochs 12, 24, 36
    let mut sched = PlateauScheduler::new(12, 0.5);
    let mut lr = 0.0003;
    let mut halvings = Vec::new();
    for epoch in 0..40 {
        let before = lr;
        lr = sched.observe(1.0, lr);
        if lr < before {
            halvings.push(epoch);
        }
    }
    assert_eq!(halvings, vec![12, 24, 36], "halvings at {halvings:?}");

    // step: lr(e) = lr0 * 0.5^(e/75) exactly
    for e in 0..400 {
        let expect = 0.01 * 0.5f64.powi((e / 75) as i32);
        assert_eq!(step_lr(0.01, 0.5, 75, e), expect, "step lr wrong at epoch {e}");
    }
    "plateau halves at 12/24/36; step lr exact over 400 epochs".to_string()
}

fn c10_alpha_bound_and_reporting() -> String {
    let records = desk_corpus(8, 1010);
    let cfg = ModelConfig {
        d: 8,
        l_sage: 2,
        n_blocks: 2,
        n_heads: 2,
        m: 3,
        k: 3,
        ..ModelConfig::default()
    };
    // aggressive rate to push the mix scalars against their bounds
    let tc = TrainConfig { epochs: 5, lr0: 0.05, ..TrainConfig::default() };
    let agg = run_trials(&records, &cfg, &tc, &PartitionSpec::default(), false, 2, &[1]).unwrap();
    let mut seen = 0;
    for trial in &agg.trials {
        assert_eq!(
            trial.final_alphas.len(),
            cfg.n_blocks,
            "report must record one final alpha per block"
        );
        for a in &trial.final_alphas {
            assert!((0.0..=1.0).contains(a), "alpha out of bounds: {a}");
            seen += 1;
        }
    }
    format!("{seen} stored alphas all in [0,1]; reports carry one per block")
}

#[test]
fn acceptance_criteria() {
    let criteria: Vec<(&str, fn() -> String)> = vec![
        ("C1 gradient suite", c01_gradient_suite),
        ("C2 sage oracle", c02_sage_oracle),
        ("C3 partition oracle", c03_partition_oracle),
        ("C4 skip limit identities", c04_skip_limit_identities),
        ("C5 boundary rmse identity", c05_boundary_rmse_identity),
        ("C6 overfit one record", c06_overfit_one_record),
        ("C7 ordering property", c07_ordering_property),
        ("C8 train determinism", c08_train_determinism),
        ("C9 scheduler contract", c09_scheduler_contract),
        ("C10 learned alpha bound", c10_alpha_bound_and_reporting),
    ];
    let mut failures = Vec::new();
    for (name, f) in criteria {
        let started = Instant::now();
        match catch_unwind(AssertUnwindSafe(f)) {
            Ok(detail) => {
                println!("[acceptance] {name}: PASS ({detail}) [{:.1}s]", started.elapsed().as_secs_f64());
            }
            Err(err) => {
                let msg = err
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| err.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".to_string());
                println!("[acceptance] {name}: FAIL ({msg})");
                failures.push(format!("{name}: {msg}"));
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}

// The split/aggregation plumbing the criteria rely on.
#[test]
fn split_ratio_holds_on_the_desk_corpus() {
    let records = desk_corpus(60, 707);
    let s = split(&records, 1).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (36, 12, 12));
    let mut all: BTreeMap<&String, usize> = BTreeMap::new();
    for id in s.train.iter().chain(&s.val).chain(&s.test) {
        *all.entry(id).or_default() += 1;
    }
    assert!(all.values().all(|&c| c == 1));
    assert_eq!(all.len(), 60);
}
