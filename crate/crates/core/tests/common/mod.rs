#![allow(dead_code)]

pub mod bench;
pub mod fixture;
pub mod structure;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tad_core::config::{ModelConfig, Variant};
use tad_core::data::{BBox, FlowFrame, ObjectWindow, TrainingSample};
use tad_core::graph::Graph;
use tad_core::model::Model;
use tad_core::objective::LossWeights;
use tad_core::params::{Bound, ParamId};

/// Tiny model used for finite-difference checks.
pub fn grad_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        height: 8,
        width: 8,
        enc_channels: [3, 4, 4],
        memory_slots: 6,
        shrink_threshold: Some(0.1),
        layers: 1,
        heads: 2,
        obs_len: 3,
        pred_len: 2,
        variant,
        ..ModelConfig::default()
    }
}

pub fn random_flow(h: usize, w: usize, seed: u64) -> FlowFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f32> = (0..h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
    let v: Vec<f32> = (0..h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
    FlowFrame::new(0, h, w, u, v).unwrap()
}

pub fn random_windows(n: usize, obs: usize, pred: usize, seed: u64) -> Vec<ObjectWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let x: f64 = rng.random_range(0.1..0.5);
            let y: f64 = rng.random_range(0.1..0.5);
            let vx: f64 = rng.random_range(-0.02..0.02);
            let vy: f64 = rng.random_range(-0.02..0.02);
            let at = |k: usize| {
                let (dx, dy) = (vx * k as f64, vy * k as f64);
                BBox::new(x + dx, y + dy, x + 0.3 + dx, y + 0.25 + dy)
            };
            ObjectWindow {
                id: i as u64 + 1,
                history: (0..obs).map(at).collect(),
                future: (obs..obs + pred).map(at).collect(),
            }
        })
        .collect()
}

#[derive(Debug)]
pub struct GroupCheck {
    pub group: String,
    pub checked: usize,
    pub worst_rel: f64,
    /// L2 norm of the analytic gradient over the group.
    pub grad_norm: f64,
}

fn loss_value(model: &Model, sample: &TrainingSample<'_>, w: LossWeights) -> f64 {
    let g = Graph::new();
    let p = Bound::new(&g, &model.store);
    let (l, _) = model.loss(&p, sample, w).unwrap();
    let v = g.value(l).item();
    v
}

/// Central differences against the analytic gradient on up to `per_tensor`
/// entries of every parameter tensor (the largest-gradient entry included),
/// grouped by parameter name prefix.
pub fn gradcheck(model: &mut Model, sample: &TrainingSample<'_>, w: LossWeights, per_tensor: usize) -> Vec<GroupCheck> {
    let analytic = {
        let g = Graph::new();
        let p = Bound::new(&g, &model.store);
        let (l, _) = model.loss(&p, sample, w).unwrap();
        let mut grads = g.backward(l);
        p.gradients(&mut grads)
    };
    let h = 1e-5;
    let mut groups: Vec<GroupCheck> = Vec::new();
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        // attention stack tensors are grouped per sub-layer: self-attention,
        // memory read, memory bank, feedforward
        let depth = if name.starts_with("mamr.") { 3 } else { 2 };
        let group = name.split('.').take(depth).collect::<Vec<_>>().join(".");
        let n = model.store.get(id).len();
        let grad = analytic[id.0].data().to_vec();
        let mut picks: Vec<usize> = (0..per_tensor.min(n)).map(|k| k * n / per_tensor.min(n)).collect();
        let argmax = (0..n).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())).unwrap();
        if !picks.contains(&argmax) {
            picks.push(argmax);
        }
        let norm_sq: f64 = grad.iter().map(|g| g * g).sum();
        let mut worst: f64 = 0.0;
        for k in picks.iter().copied() {
            let orig = model.store.get(id).data()[k];
            model.store.get_mut(id).data_mut()[k] = orig + h;
            let up = loss_value(model, sample, w);
            model.store.get_mut(id).data_mut()[k] = orig - h;
            let down = loss_value(model, sample, w);
            model.store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad[k];
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-4));
            worst = worst.max(rel);
        }
        match groups.iter_mut().find(|g| g.group == group) {
            Some(g) => {
                g.checked += picks.len();
                g.worst_rel = g.worst_rel.max(worst);
                g.grad_norm = (g.grad_norm.powi(2) + norm_sq).sqrt();
            }
            None => groups.push(GroupCheck {
                group,
                checked: picks.len(),
                worst_rel: worst,
                grad_norm: norm_sq.sqrt(),
            }),
        }
    }
    groups
}

/// Mann–Whitney statistic by enumerating every (positive, negative) pair,
/// ties counting one half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1;
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}
