//! Flow reconstruction and future box rollout from the refined tokens.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Result, TadError};
use crate::graph::{Graph, Var};
use crate::layers::{Conv, GruCell, Linear, Mlp2};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Row 0 of the refined tokens is the global token, the rest are objects.
pub fn split_tokens(g: &Graph, tokens: Var) -> (Var, Var) {
    let rows = g.shape(tokens)[0];
    (g.slice_rows(tokens, 0, 1), g.slice_rows(tokens, 1, rows))
}

/// Reconstructed `[2, H, W]` flow, u-plane first.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructedFlow {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ReconstructedFlow {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [2, h, w] => Ok(Self {
                height: h,
                width: w,
                data: t.data().to_vec(),
            }),
            _ => Err(TadError::Shape(format!("reconstruction {:?} is not [2, H, W]", t.shape()))),
        }
    }

    pub fn u(&self) -> &[f64] {
        &self.data[..self.height * self.width]
    }

    pub fn v(&self) -> &[f64] {
        &self.data[self.height * self.width..]
    }
}

/// Projects the global token to the coarsest map, optionally adds the
/// encoder's skip state, then upsamples three times back to `[2, H, W]`.
#[derive(Clone, Debug)]
pub struct FlowDecoder {
    pub seed: Linear,
    pub up: Vec<Conv>,
    /// Plain convolution before the output layer; a drop-in slot for a
    /// self-supervised reconstruction block.
    pub refine: Conv,
    pub out: Conv,
    pub coarse: [usize; 3],
    pub use_skip: bool,
}

impl FlowDecoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let [c1, c2, c3] = cfg.enc_channels;
        let coarse = [c3, cfg.height / 8, cfg.width / 8];
        Self {
            seed: Linear::new(store, "flow_dec.seed", cfg.d_model, coarse.iter().product(), true, rng),
            up: vec![
                Conv::new(store, "flow_dec.up0", c3, c2, 4, 2, 1, true, rng),
                Conv::new(store, "flow_dec.up1", c2, c1, 4, 2, 1, true, rng),
            ],
            refine: Conv::new(store, "flow_dec.refine", c1, c1, 3, 1, 1, false, rng),
            out: Conv::new(store, "flow_dec.out", c1, 2, 4, 2, 1, true, rng),
            coarse,
            use_skip: cfg.use_skip,
        }
    }

    pub fn forward(&self, p: &Bound, global: Var, skip: Option<Var>) -> Var {
        let g = p.graph;
        let mut x = g.reshape(self.seed.forward(p, global), &self.coarse);
        if let (true, Some(s)) = (self.use_skip, skip) {
            x = g.add(x, s);
        }
        for conv in &self.up {
            x = g.relu(conv.forward(p, x));
        }
        x = g.relu(self.refine.forward(p, x));
        self.out.forward(p, x)
    }
}

pub fn decode_flow(p: &Bound, decoder: &FlowDecoder, global: Var, skip: Option<Var>) -> Var {
    decoder.forward(p, global, skip)
}

/// Recurrent rollout of per-step box offsets.
#[derive(Clone, Debug)]
pub struct BoxDecoder {
    pub init: Linear,
    pub gru: GruCell,
    pub embed: Mlp2,
    pub offset: Mlp2,
    pub d_model: usize,
}

impl BoxDecoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        Self {
            init: Linear::new(store, "box_dec.init", d, d, true, rng),
            gru: GruCell::new(store, "box_dec.gru", d, d, rng),
            embed: Mlp2::new(store, "box_dec.embed", (d, d, d), rng),
            offset: Mlp2::new(store, "box_dec.offset", (d, d, 4), rng),
            d_model: d,
        }
    }

    /// Absolute boxes `[N, horizon·4]`: step `k` occupies columns
    /// `4k..4k+4` and equals the last observed box plus the cumulative sum
    /// of the first `k + 1` predicted offsets.
    pub fn forward(&self, p: &Bound, objects: Var, last_boxes: &Tensor, horizon: usize) -> Result<Var> {
        let g = p.graph;
        let n = g.shape(objects)[0];
        if last_boxes.shape() != [n, 4] {
            return Err(TadError::Shape(format!(
                "last boxes {:?}, expected [{n}, 4]",
                last_boxes.shape()
            )));
        }
        let mut h = g.relu(self.init.forward(p, objects));
        let mut e = g.leaf(Tensor::zeros(&[n, self.d_model]));
        let mut current = g.leaf(last_boxes.clone());
        let mut steps = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            h = self.gru.forward(p, e, h);
            e = self.embed.forward(p, h);
            current = g.add(current, self.offset.forward(p, h));
            steps.push(current);
        }
        Ok(g.concat_cols(&steps))
    }
}

pub fn rollout_boxes(
    p: &Bound,
    decoder: &BoxDecoder,
    objects: Var,
    last_boxes: &Tensor,
    horizon: usize,
) -> Result<Var> {
    decoder.forward(p, objects, last_boxes, horizon)
}
