//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are always printed:
//! the end-to-end criteria share trained models and run in sequence.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tad_core::config::Variant;
use tad_core::data::{BBox, FlowFrame, TrainingSample};
use tad_core::decoders::ReconstructedFlow;
use tad_core::graph::hard_shrink;
use tad_core::mamr::{sparsity_loss, AttentionTrace};
use tad_core::model::Model;
use tad_core::objective::{box_loss, flow_loss, LossWeights};
use tad_core::scoring::{frame_auc, fuse_scores, minmax_normalize};
use tad_core::tensor::Tensor;
use tad_core::training::evaluate;
use tad_core::TrainConfig;

use common::bench::{benchmark, run, Run};
use common::{fixture, structure};

/// Frozen after the first full run on the benchmark (0.910, post-norm
/// residuals); the current residual form measures 0.888 on seed 0.
const AUC_THRESHOLD: f64 = 0.85;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn analytic_suite() -> String {
    let eps = 1e-12;
    assert_eq!(hard_shrink(0.1, 0.2, eps), 0.0);
    assert_eq!(hard_shrink(0.2, 0.2, eps), 0.0);
    assert!(close(hard_shrink(0.3, 0.0, eps), 0.3, 1e-10));
    assert!(close(hard_shrink(0.3, 0.03, eps), 0.3, 1e-10));

    let m = 8;
    let trace = |rows: Vec<Vec<f64>>| AttentionTrace {
        addressing: vec![Tensor::from_rows(&rows).unwrap()],
        ..AttentionTrace::default()
    };
    let one_hot: Vec<f64> = (0..m).map(|j| f64::from(j == 3)).collect();
    assert_eq!(sparsity_loss(&trace(vec![one_hot])), 0.0);
    let uniform = vec![1.0 / m as f64; m];
    assert!(close(sparsity_loss(&trace(vec![uniform])), (m as f64).ln(), 1e-9));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let l = sparsity_loss(&trace(vec![raw.iter().map(|v| v / s).collect()]));
        assert!((0.0..=(m as f64).ln() + 1e-12).contains(&l));
    }

    assert_eq!(minmax_normalize(&[1.0, 2.0, 3.0]), vec![0.0, 0.5, 1.0]);
    assert_eq!(minmax_normalize(&[5.0, 5.0, 5.0]), vec![0.0; 3]);

    let pixel = FlowFrame::new(0, 1, 1, vec![3.0], vec![4.0]).unwrap();
    let zero = ReconstructedFlow {
        height: 1,
        width: 1,
        data: vec![0.0, 0.0],
    };
    let (motion, recon) = flow_loss(&pixel, &zero).unwrap();
    assert!(close(motion, 5.0, 1e-9) && close(recon, 3.5, 1e-9));

    let y = vec![vec![BBox::new(0.0, 0.0, 0.0, 0.0)]];
    let y_hat = vec![vec![BBox::new(1.0, 1.0, 1.0, 1.0)]];
    assert!(close(box_loss(&y, &y_hat).unwrap(), 2.0, 1e-9));

    assert_eq!(fuse_scores(&[0.0, 1.0], &[1.0, 0.0], 0.4).unwrap(), vec![1.0, 0.0]);
    "hard shrinkage, entropy bounds, min-max, flow 5/3.5, box 2.0, fusion [1,0]".into()
}

fn gradient_checks() -> String {
    let cfg = common::grad_config(Variant::Full);
    let mut model = Model::new(cfg.clone(), 0).unwrap();
    let flow = common::random_flow(cfg.height, cfg.width, 3);
    let sample = TrainingSample {
        clip_id: "grad",
        t: 2,
        flow: &flow,
        objects: common::random_windows(2, cfg.obs_len, cfg.pred_len, 5),
    };
    let weights = LossWeights {
        lambda3: 0.5,
        ..LossWeights::default()
    };
    let groups = common::gradcheck(&mut model, &sample, weights, 6);
    for prefix in [
        "flow_enc",
        "obj_enc",
        "mamr.0.self",
        "mamr.0.mem",
        "mamr.0.bank",
        "mamr.0.ffn",
        "flow_dec",
        "box_dec",
    ] {
        assert!(
            groups.iter().any(|g| g.group.starts_with(prefix)),
            "no parameter group {prefix}"
        );
    }
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for g in &groups {
        assert!(g.grad_norm > 0.0, "{}: zero gradient", g.group);
        assert!(g.worst_rel < 1e-3, "{}: relative error {:.3e}", g.group, g.worst_rel);
        worst = worst.max(g.worst_rel);
        entries += g.checked;
    }
    format!("{} groups, {entries} entries, worst relative error {worst:.1e}", groups.len())
}

fn auc_oracle() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(2..=200);
        // coarse scores on half the instances to force ties
        let levels = if rng.random_bool(0.5) { 6 } else { 1_000_000 };
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        if !(labels.contains(&0) && labels.contains(&1)) {
            continue;
        }
        let fast = frame_auc(&scores, &labels).unwrap();
        let slow = common::pairwise_auc(&scores, &labels);
        assert_eq!(fast.to_bits(), slow.to_bits(), "n={n}: {fast} vs {slow}");
        done += 1;
    }
    "1000 random instances, n ≤ 200, bitwise equal".into()
}

fn structural_properties() -> String {
    for n in [0, 1, 5] {
        structure::check_shapes(n);
    }
    let perm = structure::check_permutation_equivariance();
    let rows = structure::check_rows_sum_to_one();
    structure::check_sparsity_monotone(200);
    let softmax = structure::check_lambda_zero_is_softmax();
    format!("shapes N∈{{0,1,5}}; equivariance {perm:.0e}; row sums {rows:.0e}; λ=0 vs softmax {softmax:.0e}")
}

fn dota_ingestion() -> String {
    format!("{} fixture clips, labels and tags exact", fixture::check_dota_fixture())
}

struct Benchmark {
    full: Vec<Run>,
    concat: Vec<Run>,
    flow_only: Run,
    fol_only: Run,
    rerun: Run,
    untrained_auc: f64,
}

fn train_benchmark() -> Benchmark {
    let cfg = TrainConfig::toy();
    let (train, test) = benchmark(&cfg);
    let go = |v: Variant, seed: u64| {
        let r = run(&cfg, v, seed, &train, &test);
        eprintln!("  trained {v} seed {seed}: AUC {:.4} ({:.0} s)", r.auc(), r.seconds);
        r
    };
    let untrained = Model::new(cfg.model.clone(), cfg.seed).unwrap();
    let untrained_auc = evaluate(&untrained, &cfg.scoring, &test).unwrap().auc.unwrap();
    Benchmark {
        untrained_auc,
        full: (0..3).map(|s| go(Variant::Full, s)).collect(),
        flow_only: go(Variant::FlowOnly, 0),
        fol_only: go(Variant::FolOnly, 0),
        concat: (0..3).map(|s| go(Variant::ConcatOnly, s)).collect(),
        rerun: go(Variant::Full, 0),
    }
}

fn end_to_end(b: &Benchmark) -> String {
    let full = &b.full[0];
    let single = b.flow_only.auc().max(b.fol_only.auc());
    let detail = format!(
        "full {:.4} (threshold {AUC_THRESHOLD}), flow_only {:.4}, fol_only {:.4}; {:.0} s",
        full.auc(),
        b.flow_only.auc(),
        b.fol_only.auc(),
        full.seconds
    );
    assert!(full.auc() >= AUC_THRESHOLD && full.auc() >= single, "{detail}");
    assert!(full.seconds < 15.0 * 60.0, "{detail}");
    detail
}

/// Not a numbered criterion: training must improve on the initialization.
fn trained_beats_untrained(b: &Benchmark) -> String {
    let detail = format!("trained {:.4} vs untrained {:.4}", b.full[0].auc(), b.untrained_auc);
    assert!(b.full[0].auc() > b.untrained_auc, "{detail}");
    detail
}

fn ablation_direction(b: &Benchmark) -> String {
    let pairs: Vec<String> = b
        .full
        .iter()
        .zip(&b.concat)
        .map(|(f, c)| format!("seed {}: {:.4} vs {:.4}", f.seed, f.auc(), c.auc()))
        .collect();
    let wins = b.full.iter().zip(&b.concat).filter(|(f, c)| f.auc() >= c.auc()).count();
    let detail = format!("full ≥ concat_only on {wins}/3 seeds ({})", pairs.join(", "));
    assert!(wins >= 2, "{detail}");
    detail
}

fn determinism(b: &Benchmark) -> String {
    let (a, r) = (&b.full[0], &b.rerun);
    assert_eq!(a.checkpoint.history.len(), r.checkpoint.history.len());
    for (x, y) in a.checkpoint.history.iter().zip(&r.checkpoint.history) {
        assert_eq!(x.l_total.to_bits(), y.l_total.to_bits(), "loss histories differ");
    }
    assert_eq!(a.checkpoint.model.store, r.checkpoint.model.store, "parameters differ");
    let mut frames = 0;
    for (x, y) in a.evaluation.series.iter().zip(&r.evaluation.series) {
        let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.s_f), bits(&y.s_f), "{}: s_f differs", x.clip_id);
        frames += x.s_f.len();
    }
    format!(
        "{} epochs of loss history and {frames} s_f values bitwise identical",
        a.checkpoint.history.len()
    )
}

fn check(label: &str, f: impl FnOnce() -> String) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("{label}: PASS — {detail} [{secs:.1} s]");
            true
        }
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            println!("{label}: FAIL — {msg} [{secs:.1} s]");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= check("criterion 1", analytic_suite);
    ok &= check("criterion 2", gradient_checks);
    ok &= check("criterion 3", auc_oracle);
    ok &= check("criterion 4", structural_properties);

    let start = Instant::now();
    let bench = catch_unwind(train_benchmark);
    eprintln!("  benchmark training took {:.0} s", start.elapsed().as_secs_f64());
    match &bench {
        Ok(b) => {
            ok &= check("criterion 5", || end_to_end(b));
            ok &= check("criterion 6", || ablation_direction(b));
        }
        Err(_) => {
            for id in [5, 6] {
                println!("criterion {id}: FAIL — benchmark training panicked");
            }
            ok = false;
        }
    }
    ok &= check("criterion 7", dota_ingestion);
    match &bench {
        Ok(b) => {
            ok &= check("criterion 8", || determinism(b));
            ok &= check("supplementary (trained > untrained)", || trained_beats_untrained(b));
        }
        Err(_) => {
            println!("criterion 8: FAIL — benchmark training panicked");
            ok = false;
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
