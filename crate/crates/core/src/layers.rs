//! Parameterized building blocks shared by the encoders, the attention stack
//! and the decoders. Each layer owns only [`ParamId`]s; values live in a
//! [`ParamStore`] and are bound per graph through [`Bound`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::Var;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = store.uniform(format!("{name}.w"), &[fan_in, fan_out], bound, rng);
        let b = bias.then(|| store.uniform(format!("{name}.b"), &[fan_out], bound, rng));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, p: &Bound, x: Var) -> Var {
        let g = p.graph;
        let y = g.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => g.add_bias(y, p.var(b)),
            None => y,
        }
    }

    /// Zeroes weight and bias in place.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data_mut().fill(0.0);
        if let Some(b) = self.b {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, p: &Bound, x: Var) -> Var {
        p.graph
            .layer_norm(x, p.var(self.gamma), p.var(self.beta), LAYER_NORM_EPS)
    }
}

/// Two fully connected layers with a rectifier in between.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp2 {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), dims.0, dims.1, true, rng),
            out: Linear::new(store, &format!("{name}.1"), dims.1, dims.2, true, rng),
        }
    }

    pub fn forward(&self, p: &Bound, x: Var) -> Var {
        let h = p.graph.relu(self.hidden.forward(p, x));
        self.out.forward(p, h)
    }
}

/// Gated recurrent cell operating on a batch of rows:
///
/// ```text
/// r  = σ(x W_r + b_r + h U_r + c_r)
/// z  = σ(x W_z + b_z + h U_z + c_z)
/// n  = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))
/// h' = n + z ⊙ (h − n)
/// ```
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub dim: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let input = gru_linear(store, &format!("{name}.ih"), input_dim, hidden_dim, rng);
        let hidden = gru_linear(store, &format!("{name}.hh"), hidden_dim, hidden_dim, rng);
        Self {
            input,
            hidden,
            dim: hidden_dim,
        }
    }

    pub fn forward(&self, p: &Bound, x: Var, h: Var) -> Var {
        let g = p.graph;
        let d = self.dim;
        let gi = self.input.forward(p, x);
        let gh = self.hidden.forward(p, h);
        let r = g.sigmoid(g.add(g.slice_cols(gi, 0, d), g.slice_cols(gh, 0, d)));
        let z = g.sigmoid(g.add(g.slice_cols(gi, d, 2 * d), g.slice_cols(gh, d, 2 * d)));
        let n = g.tanh(g.add(
            g.slice_cols(gi, 2 * d, 3 * d),
            g.mul(r, g.slice_cols(gh, 2 * d, 3 * d)),
        ));
        g.add(n, g.mul(z, g.sub(h, n)))
    }
}

fn gru_linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    hidden_dim: usize,
    rng: &mut impl Rng,
) -> Linear {
    // Both gate matrices use the hidden size for their init bound.
    let bound = 1.0 / (hidden_dim as f64).sqrt();
    let w = store.uniform(format!("{name}.w"), &[fan_in, 3 * hidden_dim], bound, rng);
    let b = store.uniform(format!("{name}.b"), &[3 * hidden_dim], bound, rng);
    Linear {
        w,
        b: Some(b),
        fan_in,
        fan_out: 3 * hidden_dim,
    }
}

/// Square-kernel convolution (`transposed == false`) or transposed
/// convolution over `[C, H, W]` maps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        transposed: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let (shape, fan_in) = if transposed {
            ([in_ch, out_ch, kernel, kernel], out_ch * kernel * kernel)
        } else {
            ([out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel)
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: store.uniform(format!("{name}.w"), &shape, bound, rng),
            b: store.uniform(format!("{name}.b"), &[out_ch], bound, rng),
            stride,
            pad,
            transposed,
        }
    }

    pub fn forward(&self, p: &Bound, x: Var) -> Var {
        let (w, b) = (p.var(self.w), p.var(self.b));
        if self.transposed {
            p.graph.conv_transpose2d(x, w, b, self.stride, self.pad)
        } else {
            p.graph.conv2d(x, w, b, self.stride, self.pad)
        }
    }
}
