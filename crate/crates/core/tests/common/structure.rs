//! Structural checks on the model: shapes, object-permutation equivariance,
//! normalized attention rows and the shrinkage path. Each check panics with
//! a description on failure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tad_core::config::{ModelConfig, Variant};
use tad_core::data::ObjectWindow;
use tad_core::graph::Graph;
use tad_core::layers::LAYER_NORM_EPS;
use tad_core::mamr::{shrink_address, MemoryBank, MemoryLayer};
use tad_core::model::Model;
use tad_core::params::{Bound, ParamStore};
use tad_core::tensor::{matmul, Tensor};

use super::{random_flow, random_windows};

/// Small but non-degenerate: two blocks, several heads, a real rollout.
pub fn structure_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        height: 16,
        width: 16,
        enc_channels: [4, 8, 8],
        memory_slots: 10,
        layers: 2,
        heads: 4,
        obs_len: 3,
        pred_len: 4,
        variant,
        ..ModelConfig::default()
    }
}

/// Token, reconstruction and rollout shapes for `n` objects.
pub fn check_shapes(n: usize) {
    for variant in Variant::ALL {
        let cfg = structure_config(variant);
        let model = Model::new(cfg.clone(), 1).unwrap();
        let flow = random_flow(cfg.height, cfg.width, 2);
        let objects = random_windows(n, cfg.obs_len, cfg.pred_len, 3);
        let g = Graph::new();
        let p = Bound::new(&g, &model.store);
        let out = model.forward(&p, &flow, &objects).unwrap();

        let rows = usize::from(variant.uses_flow()) + if variant.uses_boxes() { n } else { 0 };
        match out.tokens {
            Some(t) => assert_eq!(g.shape(t), vec![rows, cfg.d_model], "{variant} N={n}: tokens"),
            None => assert_eq!(rows, 0, "{variant} N={n}: tokens missing"),
        }
        match out.recon {
            Some(r) => assert_eq!(g.shape(r), vec![2, cfg.height, cfg.width], "{variant} N={n}: recon"),
            None => assert!(!variant.uses_flow(), "{variant} N={n}: recon missing"),
        }
        match out.boxes {
            Some(b) => assert_eq!(g.shape(b), vec![n, 4 * cfg.pred_len], "{variant} N={n}: rollout"),
            None => assert!(n == 0 || !variant.uses_boxes(), "{variant} N={n}: rollout missing"),
        }
        let inf = model.infer(&flow, &objects).unwrap();
        if variant.uses_boxes() {
            assert_eq!(inf.rollouts.len(), n);
            assert!(inf.rollouts.iter().all(|(_, r)| r.len() == cfg.pred_len));
        }
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Reordering the objects reorders object tokens, fused tokens and rollouts
/// the same way and leaves the reconstruction untouched. Returns the largest
/// deviation seen.
pub fn check_permutation_equivariance() -> f64 {
    let perm = [3usize, 0, 4, 1, 2];
    let mut worst: f64 = 0.0;
    for variant in [Variant::Full, Variant::NoMemory, Variant::ConcatOnly, Variant::FolOnly] {
        let cfg = structure_config(variant);
        let model = Model::new(cfg.clone(), 7).unwrap();
        let flow = random_flow(cfg.height, cfg.width, 8);
        let objects = random_windows(perm.len(), cfg.obs_len, cfg.pred_len, 9);
        let permuted: Vec<ObjectWindow> = perm.iter().map(|&i| objects[i].clone()).collect();

        let run = |objs: &[ObjectWindow]| {
            let g = Graph::new();
            let p = Bound::new(&g, &model.store);
            let enc = model.object_encoder.as_ref().unwrap().forward(&p, objs, &flow).unwrap();
            let out = model.forward(&p, &flow, objs).unwrap();
            let encoded = g.value(enc).clone();
            let tokens = g.value(out.tokens.unwrap()).clone();
            let boxes = g.value(out.boxes.unwrap()).clone();
            let recon = out.recon.map(|r| g.value(r).clone());
            (encoded, tokens, boxes, recon)
        };
        let (e0, t0, b0, r0) = run(&objects);
        let (e1, t1, b1, r1) = run(&permuted);

        let skip = usize::from(variant.uses_flow());
        let obj_rows = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = (skip..t.rows()).map(|i| t.row(i).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let checks = [
            ("object encoder", permute_rows(&e0, &perm).max_abs_diff(&e1)),
            ("fused object tokens", permute_rows(&obj_rows(&t0), &perm).max_abs_diff(&obj_rows(&t1))),
            ("rollout", permute_rows(&b0, &perm).max_abs_diff(&b1)),
        ];
        for (what, d) in checks {
            assert!(d < 1e-10, "{variant}: {what} not equivariant (max diff {d:e})");
            worst = worst.max(d);
        }
        if skip == 1 {
            let d = t0.row(0).iter().zip(t1.row(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-10, "{variant}: global token changed under reordering ({d:e})");
            let d = r0.unwrap().max_abs_diff(&r1.unwrap());
            assert!(d < 1e-10, "{variant}: reconstruction changed under reordering ({d:e})");
            worst = worst.max(d);
        }
    }
    worst
}

/// Every self-attention and memory-addressing row sums to one. Returns the
/// largest deviation.
pub fn check_rows_sum_to_one() -> f64 {
    let mut worst: f64 = 0.0;
    for (seed, n) in [(0u64, 0usize), (1, 1), (2, 5)] {
        for threshold in [None, Some(0.0), Some(0.2), Some(0.9)] {
            let cfg = ModelConfig {
                shrink_threshold: threshold,
                ..structure_config(Variant::Full)
            };
            let model = Model::new(cfg.clone(), seed).unwrap();
            let flow = random_flow(cfg.height, cfg.width, seed + 10);
            let objects = random_windows(n, cfg.obs_len, cfg.pred_len, seed + 20);
            let inf = model.infer(&flow, &objects).unwrap();
            assert_eq!(inf.traces.len(), cfg.layers);
            for trace in &inf.traces {
                for map in trace.self_attention.iter().chain(&trace.addressing) {
                    for r in 0..map.rows() {
                        let row = map.row(r);
                        assert!(row.iter().all(|&a| a >= 0.0), "negative attention weight");
                        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                    }
                }
            }
        }
    }
    assert!(worst < 1e-6, "attention row sum off by {worst:e}");
    worst
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Raising λ never adds non-zero addressing entries, as long as the row
/// still has an entry above λ (past that the softmax fallback takes over).
pub fn check_sparsity_monotone(cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..cases {
        let m = rng.random_range(2..40);
        let logits: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let row = softmax(&logits);
        let top = row.iter().copied().fold(0.0, f64::max);
        let mut prev = usize::MAX;
        for k in 0..=50 {
            let lambda = top * k as f64 / 51.0;
            let (w, fallback) = shrink_address(&row, lambda, 1e-12);
            assert!(!fallback);
            let nnz = w.iter().filter(|&&a| a > 0.0).count();
            assert!(nnz <= prev, "support grew from {prev} to {nnz} at λ={lambda}");
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prev = nnz;
        }
        let (w, fallback) = shrink_address(&row, top, 1e-12);
        assert!(fallback && w == row, "all-below-threshold row must fall back");
    }
}

/// With λ = 0 the memory read equals plain softmax cross-attention followed
/// by the normalized residual, computed here independently. Returns the
/// largest deviation.
pub fn check_lambda_zero_is_softmax() -> f64 {
    let cfg = ModelConfig {
        shrink_threshold: Some(0.0),
        ..structure_config(Variant::Full)
    };
    let (d, heads, m) = (cfg.d_model, cfg.heads, cfg.memory_slots);
    let dh = d / heads;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let bank = MemoryBank::new(&mut store, "mem", m, d, &mut rng);
    let layer = MemoryLayer::new(&mut store, "read", &cfg, &mut rng);
    let rows = 6;
    let h = Tensor::from_vec(&[rows, d], (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

    let g = Graph::new();
    let p = Bound::new(&g, &store);
    let read = layer.forward(&p, &bank, g.leaf(h.clone()));
    let got = g.value(read.output).clone();
    assert!(read.fallback.iter().flatten().all(|&f| !f));

    let mem = store.get(bank.slots);
    let q = matmul(&h, store.get(layer.wq.w));
    let k = matmul(mem, store.get(layer.wk.w));
    let v = matmul(mem, store.get(layer.wv.w));
    let mut worst: f64 = 0.0;
    for r in 0..rows {
        let mut attended = vec![0.0; d];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            let scores: Vec<f64> = (0..m)
                .map(|j| {
                    cols.clone().map(|c| q.at(r, c) * k.at(j, c)).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let a = softmax(&scores);
            let addr = g.value(read.addressing[hd]);
            for j in 0..m {
                worst = worst.max((addr.at(r, j) - a[j]).abs());
            }
            for c in cols {
                attended[c] = (0..m).map(|j| a[j] * v.at(j, c)).sum::<f64>();
            }
        }
        let mean = attended.iter().sum::<f64>() / d as f64;
        let var = attended.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        let gamma = store.get(layer.norm.gamma).data();
        let beta = store.get(layer.norm.beta).data();
        for c in 0..d {
            let want = h.at(r, c) + gamma[c] * (attended[c] - mean) / (var + LAYER_NORM_EPS).sqrt() + beta[c];
            worst = worst.max((got.at(r, c) - want).abs());
        }
    }
    assert!(worst < 1e-6, "λ=0 read deviates from softmax attention by {worst:e}");
    worst
}
