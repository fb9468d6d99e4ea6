//! Flow and location encoders producing the D-dimensional motion tokens.

use rand::Rng;

use crate::config::ModelConfig;
use crate::data::{BBox, FlowFrame, ObjectWindow};
use crate::error::{Result, TadError};
use crate::graph::Var;
use crate::layers::{Conv, GruCell, Linear, Mlp2};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Output of the flow encoder.
#[derive(Clone, Copy, Debug)]
pub struct GlobalMotion {
    /// `[1, D]` global motion token.
    pub token: Var,
    /// `[C3, H/8, W/8]` lowest-resolution feature map.
    pub skip_state: Var,
}

/// Three strided convolutions, global average pooling and a projection.
#[derive(Clone, Debug)]
pub struct FlowEncoder {
    pub convs: Vec<Conv>,
    pub proj: Linear,
    pub height: usize,
    pub width: usize,
}

impl FlowEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut convs = Vec::with_capacity(3);
        let mut in_ch = 2;
        for (i, &c) in cfg.enc_channels.iter().enumerate() {
            convs.push(Conv::new(store, &format!("flow_enc.conv{i}"), in_ch, c, 3, 2, 1, false, rng));
            in_ch = c;
        }
        let proj = Linear::new(store, "flow_enc.proj", in_ch, cfg.d_model, true, rng);
        Self {
            convs,
            proj,
            height: cfg.height,
            width: cfg.width,
        }
    }

    pub fn forward(&self, p: &Bound, flow: &FlowFrame) -> Result<GlobalMotion> {
        check_flow_shape(flow, self.height, self.width)?;
        let g = p.graph;
        let x = g.leaf(Tensor::from_vec(&[2, flow.height, flow.width], flow.to_f64_planes())?);
        let mut h = x;
        for conv in &self.convs {
            h = g.relu(conv.forward(p, h));
        }
        let token = self.proj.forward(p, g.global_avg_pool(h));
        Ok(GlobalMotion {
            token,
            skip_state: h,
        })
    }
}

pub(crate) fn check_flow_shape(flow: &FlowFrame, height: usize, width: usize) -> Result<()> {
    if (flow.height, flow.width) != (height, width) {
        return Err(TadError::Shape(format!(
            "flow frame {} is {}x{}, model expects {height}x{width}",
            flow.t, flow.height, flow.width
        )));
    }
    flow.validate()
}

/// Encodes one flow frame into its global motion token.
pub fn encode_flow(p: &Bound, encoder: &FlowEncoder, flow: &FlowFrame) -> Result<GlobalMotion> {
    encoder.forward(p, flow)
}

/// Bilinearly samples a `k × k` grid spanning `b` (corners included) from
/// both flow channels. Returns `2·k²` values, u-grid then v-grid, row-major.
///
/// Normalized coordinate `c` maps to pixel `c · (W − 1)` horizontally and
/// `c · (H − 1)` vertically.
pub fn roi_pool(flow: &FlowFrame, b: &BBox, k: usize) -> Result<Vec<f64>> {
    if !b.has_area() || ![b.x_min, b.y_min, b.x_max, b.y_max].iter().all(|v| v.is_finite()) {
        return Err(TadError::validation("bbox", format!("degenerate box {:?}", b.to_array())));
    }
    if k < 2 {
        return Err(TadError::Config(format!("roi size must be at least 2, got {k}")));
    }
    let (w, h) = (flow.width, flow.height);
    let mut out = vec![0.0; 2 * k * k];
    let step = 1.0 / (k - 1) as f64;
    for i in 0..k {
        let ny = b.y_min + (b.y_max - b.y_min) * i as f64 * step;
        let py = (ny * (h - 1) as f64).clamp(0.0, (h - 1) as f64);
        for j in 0..k {
            let nx = b.x_min + (b.x_max - b.x_min) * j as f64 * step;
            let px = (nx * (w - 1) as f64).clamp(0.0, (w - 1) as f64);
            let (u, v) = bilinear(flow, px, py);
            out[i * k + j] = u;
            out[k * k + i * k + j] = v;
        }
    }
    Ok(out)
}

fn bilinear(flow: &FlowFrame, px: f64, py: f64) -> (f64, f64) {
    let x0 = px.floor() as usize;
    let y0 = py.floor() as usize;
    let x1 = (x0 + 1).min(flow.width - 1);
    let y1 = (y0 + 1).min(flow.height - 1);
    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
    let mut acc = (0.0, 0.0);
    for (x, y, wgt) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        let (u, v) = flow.at(x, y);
        acc.0 += wgt * u as f64;
        acc.1 += wgt * v as f64;
    }
    acc
}

/// Box-history recurrence plus an RoI flow-patch embedding.
#[derive(Clone, Debug)]
pub struct ObjectEncoder {
    pub embed: Linear,
    pub gru: GruCell,
    pub roi: Mlp2,
    pub roi_size: usize,
    pub d_model: usize,
}

impl ObjectEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let k = cfg.roi_size;
        Self {
            embed: Linear::new(store, "obj_enc.embed", 4, d, true, rng),
            gru: GruCell::new(store, "obj_enc.gru", d, d, rng),
            roi: Mlp2::new(store, "obj_enc.roi", (2 * k * k, d, d), rng),
            roi_size: k,
            d_model: d,
        }
    }

    /// RoI patches of every object's last observed box, `[N, 2k²]`.
    pub fn patches(&self, windows: &[ObjectWindow], flow: &FlowFrame) -> Result<Tensor> {
        let k = self.roi_size;
        let mut data = Vec::with_capacity(windows.len() * 2 * k * k);
        for w in windows {
            data.extend(roi_pool(flow, &w.last(), k)?);
        }
        Tensor::from_vec(&[windows.len(), 2 * k * k], data)
    }

    pub fn forward(&self, p: &Bound, windows: &[ObjectWindow], flow: &FlowFrame) -> Result<Var> {
        let patches = self.patches(windows, flow)?;
        self.forward_with_patches(p, windows, patches)
    }

    /// `[N, D]` object tokens from explicit RoI patches.
    pub fn forward_with_patches(&self, p: &Bound, windows: &[ObjectWindow], patches: Tensor) -> Result<Var> {
        let g = p.graph;
        let n = windows.len();
        let k = self.roi_size;
        if patches.shape() != [n, 2 * k * k] {
            return Err(TadError::Shape(format!(
                "patches {:?}, expected [{n}, {}]",
                patches.shape(),
                2 * k * k
            )));
        }
        let steps = windows.first().map_or(0, |w| w.history.len());
        if windows.iter().any(|w| w.history.len() != steps || steps == 0) {
            return Err(TadError::Shape("object histories differ in length or are empty".into()));
        }
        let mut h = g.leaf(Tensor::zeros(&[n, self.d_model]));
        for s in 0..steps {
            let boxes: Vec<f64> = windows.iter().flat_map(|w| w.history[s].to_array()).collect();
            let x = g.leaf(Tensor::from_vec(&[n, 4], boxes)?);
            h = self.gru.forward(p, self.embed.forward(p, x), h);
        }
        let roi = self.roi.forward(p, g.leaf(patches));
        Ok(g.add(h, roi))
    }
}

/// Encodes the observed windows of all objects into `[N, D]` tokens.
pub fn encode_objects(
    p: &Bound,
    encoder: &ObjectEncoder,
    windows: &[ObjectWindow],
    flow: &FlowFrame,
) -> Result<Var> {
    encoder.forward(p, windows, flow)
}
