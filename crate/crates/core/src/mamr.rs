//! Memory-augmented motion representation: a stack of blocks, each made of
//! inter-motion self-attention, a sparse read from a learned memory bank and
//! a position-wise feedforward layer.

use rand::Rng;

use crate::config::{ModelConfig, PositionMode};
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub use crate::graph::hard_shrink;

/// Sinusoidal encoding table for the given positions, `[len, d]`.
pub fn positional_table(positions: &[usize], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &pos in positions {
        for i in 0..d {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / freq;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_vec(&[positions.len(), d], data).expect("table shape")
}

pub fn token_positions(rows: usize, mode: PositionMode) -> Vec<usize> {
    match mode {
        PositionMode::TokenType => (0..rows).map(|r| (r > 0) as usize).collect(),
        PositionMode::RowIndex => (0..rows).collect(),
    }
}

/// Adds the positional encoding to a `[1 + N, D]` token matrix.
pub fn positional_encode(g: &Graph, tokens: Var, mode: PositionMode) -> Var {
    let shape = g.shape(tokens);
    let table = positional_table(&token_positions(shape[0], mode), shape[1]);
    g.add(tokens, g.leaf(table))
}

/// Stacks the global token above the object tokens.
pub fn stack_tokens(g: &Graph, global: Var, objects: Var) -> Var {
    g.concat_rows(&[global, objects])
}

/// Hard shrinkage of one addressing row followed by L1 renormalization.
/// When every entry is at or below `lambda` the row is returned unchanged
/// and the flag is set.
pub fn shrink_address(row: &[f64], lambda: f64, eps: f64) -> (Vec<f64>, bool) {
    let shrunk: Vec<f64> = row.iter().map(|&a| hard_shrink(a, lambda, eps)).collect();
    let s: f64 = shrunk.iter().sum();
    if s > 0.0 {
        (shrunk.into_iter().map(|v| v / s).collect(), false)
    } else {
        (row.to_vec(), true)
    }
}

/// Attention maps recorded during one block's forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub layer: usize,
    /// Per head, `[1 + N, 1 + N]` self-attention weights.
    pub self_attention: Vec<Tensor>,
    /// Per head, `[1 + N, M]` sparse memory addressing weights.
    pub addressing: Vec<Tensor>,
    /// Per head and query row: shrinkage removed every entry and the
    /// unshrunk weights were used instead.
    pub fallback: Vec<Vec<bool>>,
}

/// Mean row entropy of one block's memory addressing, averaged over heads
/// and query rows. Lies in `[0, log M]`.
pub fn sparsity_loss(trace: &AttentionTrace) -> f64 {
    if trace.addressing.is_empty() {
        return 0.0;
    }
    let per_head = trace.addressing.iter().map(|a| {
        let rows = a.rows().max(1) as f64;
        a.data()
            .iter()
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum::<f64>()
            / rows
    });
    per_head.sum::<f64>() / trace.addressing.len() as f64
}

/// Sum of the per-block sparsity losses.
pub fn total_sparsity_loss(traces: &[AttentionTrace]) -> f64 {
    traces.iter().map(sparsity_loss).sum()
}

/// Graph form of [`total_sparsity_loss`] over the addressing nodes of a pass,
/// `heads` consecutive nodes per block.
pub fn sparsity_loss_graph(g: &Graph, addressing: &[Var], heads: usize) -> Option<Var> {
    if addressing.is_empty() {
        return None;
    }
    let terms: Vec<Var> = addressing
        .iter()
        .map(|&a| g.reshape(g.entropy_rows(a), &[1, 1]))
        .collect();
    let sum = g.sum_all(g.concat_rows(&terms));
    Some(g.scale(sum, 1.0 / heads as f64))
}

fn split_heads(g: &Graph, x: Var, heads: usize, dh: usize) -> Vec<Var> {
    (0..heads).map(|h| g.slice_cols(x, h * dh, (h + 1) * dh)).collect()
}

fn scaled_scores(g: &Graph, q: Var, k: Var, dh: usize) -> Var {
    g.scale(g.matmul(q, g.transpose(k)), 1.0 / (dh as f64).sqrt())
}

#[derive(Clone, Debug)]
pub struct InterMotionLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub norm: LayerNorm,
    pub heads: usize,
}

impl InterMotionLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.q"), d, d, false, rng),
            wk: Linear::new(store, &format!("{name}.k"), d, d, false, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, d, false, rng),
            norm: LayerNorm::new(store, &format!("{name}.ln"), d),
            heads,
        }
    }

    /// `M + LN(concat_h softmax(Q_h K_hᵀ / √d_h) V_h)` and the per-head maps.
    pub fn forward(&self, p: &Bound, m: Var) -> (Var, Vec<Var>) {
        let g = p.graph;
        let d = self.wq.fan_out;
        let dh = d / self.heads;
        let q = split_heads(g, self.wq.forward(p, m), self.heads, dh);
        let k = split_heads(g, self.wk.forward(p, m), self.heads, dh);
        let v = split_heads(g, self.wv.forward(p, m), self.heads, dh);
        let mut maps = Vec::with_capacity(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let a = g.softmax_rows(scaled_scores(g, q[h], k[h], dh));
            outs.push(g.matmul(a, v[h]));
            maps.push(a);
        }
        let attended = g.concat_cols(&outs);
        (g.add(m, self.norm.forward(p, attended)), maps)
    }
}

pub fn inter_motion_layer(p: &Bound, layer: &InterMotionLayer, m: Var) -> (Var, Vec<Var>) {
    layer.forward(p, m)
}

/// Learned bank of `M` slots with dimension `D`.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    pub slots: ParamId,
}

impl MemoryBank {
    pub fn new(store: &mut ParamStore, name: &str, m: usize, d: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            slots: store.uniform(format!("{name}.slots"), &[m, d], bound, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MemoryLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub norm: LayerNorm,
    pub heads: usize,
    pub threshold: f64,
    pub eps: f64,
}

/// Result of one memory read.
#[derive(Clone, Debug)]
pub struct MemoryRead {
    pub output: Var,
    /// Per-head sparse addressing nodes.
    pub addressing: Vec<Var>,
    pub fallback: Vec<Vec<bool>>,
}

impl MemoryLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.d_model;
        Self {
            wq: Linear::new(store, &format!("{name}.q"), d, d, false, rng),
            wk: Linear::new(store, &format!("{name}.k"), d, d, false, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, d, false, rng),
            norm: LayerNorm::new(store, &format!("{name}.ln"), d),
            heads: cfg.heads,
            threshold: cfg.threshold(),
            eps: cfg.shrink_eps,
        }
    }

    /// Queries the bank with `h`; addressing weights are softmax scores,
    /// hard-shrunk and renormalized per row.
    pub fn forward(&self, p: &Bound, bank: &MemoryBank, h: Var) -> MemoryRead {
        let g = p.graph;
        let d = self.wq.fan_out;
        let dh = d / self.heads;
        let mem = p.var(bank.slots);
        let q = split_heads(g, self.wq.forward(p, h), self.heads, dh);
        let k = split_heads(g, self.wk.forward(p, mem), self.heads, dh);
        let v = split_heads(g, self.wv.forward(p, mem), self.heads, dh);
        let mut addressing = Vec::with_capacity(self.heads);
        let mut fallback = Vec::with_capacity(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let a = g.softmax_rows(scaled_scores(g, q[hd], k[hd], dh));
            let (sparse, fb) = g.shrink_renorm(a, self.threshold, self.eps);
            outs.push(g.matmul(sparse, v[hd]));
            addressing.push(sparse);
            fallback.push(fb);
        }
        let read = g.concat_cols(&outs);
        MemoryRead {
            output: g.add(h, self.norm.forward(p, read)),
            addressing,
            fallback,
        }
    }
}

pub fn memory_read(p: &Bound, layer: &MemoryLayer, bank: &MemoryBank, h: Var) -> MemoryRead {
    layer.forward(p, bank, h)
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub norm: LayerNorm,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, 4 * d, true, rng),
            down: Linear::new(store, &format!("{name}.down"), 4 * d, d, true, rng),
            norm: LayerNorm::new(store, &format!("{name}.ln"), d),
        }
    }

    pub fn forward(&self, p: &Bound, y: Var) -> Var {
        let g = p.graph;
        let f = self.down.forward(p, g.relu(self.up.forward(p, y)));
        g.add(y, self.norm.forward(p, f))
    }
}

pub fn feedforward_layer(p: &Bound, layer: &FeedForward, y: Var) -> Var {
    layer.forward(p, y)
}

#[derive(Clone, Debug)]
pub struct MamrBlock {
    pub inter: InterMotionLayer,
    pub memory: Option<MemoryLayer>,
    pub ffn: FeedForward,
}

/// The full stack.
#[derive(Clone, Debug)]
pub struct Mamr {
    pub blocks: Vec<MamrBlock>,
    /// One bank per block, a single shared bank, or none.
    pub banks: Vec<MemoryBank>,
    pub position_mode: PositionMode,
}

#[derive(Clone, Debug)]
pub struct MamrOutput {
    /// `[1 + N, D]` refined tokens.
    pub tokens: Var,
    pub addressing: Vec<Var>,
    pub traces: Vec<AttentionTrace>,
}

impl Mamr {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, with_memory: bool, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let mut blocks = Vec::with_capacity(cfg.layers);
        let mut banks = Vec::new();
        for l in 0..cfg.layers {
            let name = format!("mamr.{l}");
            let inter = InterMotionLayer::new(store, &format!("{name}.self"), d, cfg.heads, rng);
            let memory = with_memory.then(|| MemoryLayer::new(store, &format!("{name}.mem"), cfg, rng));
            if with_memory && (!cfg.shared_memory || banks.is_empty()) {
                let bank_name = if cfg.shared_memory { "mamr.bank".to_string() } else { format!("{name}.bank") };
                banks.push(MemoryBank::new(store, &bank_name, cfg.memory_slots, d, rng));
            }
            let ffn = FeedForward::new(store, &format!("{name}.ffn"), d, rng);
            blocks.push(MamrBlock { inter, memory, ffn });
        }
        Self {
            blocks,
            banks,
            position_mode: cfg.position_mode,
        }
    }

    pub fn forward(&self, p: &Bound, tokens: Var) -> MamrOutput {
        self.forward_encoded(p, positional_encode(p.graph, tokens, self.position_mode))
    }

    /// Runs the blocks on tokens that already carry their positions.
    pub fn forward_encoded(&self, p: &Bound, encoded: Var) -> MamrOutput {
        let g = p.graph;
        let mut m = encoded;
        let mut addressing = Vec::new();
        let mut traces = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let (h, self_maps) = block.inter.forward(p, m);
            let mut trace = AttentionTrace {
                layer: l,
                self_attention: self_maps.iter().map(|&a| g.value(a).clone()).collect(),
                ..AttentionTrace::default()
            };
            let y = match &block.memory {
                Some(mem) => {
                    let bank = &self.banks[l.min(self.banks.len() - 1)];
                    let read = mem.forward(p, bank, h);
                    trace.addressing = read.addressing.iter().map(|&a| g.value(a).clone()).collect();
                    trace.fallback = read.fallback;
                    addressing.extend(read.addressing);
                    read.output
                }
                None => h,
            };
            m = block.ffn.forward(p, y);
            traces.push(trace);
        }
        MamrOutput {
            tokens: m,
            addressing,
            traces,
        }
    }
}

/// Runs the stack over the global token and the object tokens.
pub fn mamr_forward(p: &Bound, stack: &Mamr, global: Var, objects: Var) -> MamrOutput {
    let tokens = stack_tokens(p.graph, global, objects);
    stack.forward(p, tokens)
}
