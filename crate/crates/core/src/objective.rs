//! Training losses: flow reconstruction, future-box distance, and their
//! weighted composition with the addressing sparsity term.

use serde::{Deserialize, Serialize};

use crate::data::{BBox, FlowFrame};
use crate::decoders::ReconstructedFlow;
use crate::error::{Result, TadError};
use crate::graph::{Graph, Var};

/// Added under the square root of the graph form of `l_motion`.
pub const MOTION_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_motion: f64,
    pub l_recon: f64,
    pub l_f: f64,
    pub l_mse: f64,
    pub l_s: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.l_motion += o.l_motion;
        self.l_recon += o.l_recon;
        self.l_f += o.l_f;
        self.l_mse += o.l_mse;
        self.l_s += o.l_s;
        self.l_total += o.l_total;
    }

    pub fn scaled(mut self, s: f64) -> Self {
        for v in [
            &mut self.l_motion,
            &mut self.l_recon,
            &mut self.l_f,
            &mut self.l_mse,
            &mut self.l_s,
            &mut self.l_total,
        ] {
            *v *= s;
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.0002,
        }
    }
}

fn check_flow_pair(i: &FlowFrame, r: &ReconstructedFlow) -> Result<()> {
    if (i.height, i.width) != (r.height, r.width) || r.data.len() != 2 * r.height * r.width {
        return Err(TadError::Shape(format!(
            "flow {}x{} vs reconstruction {}x{}",
            i.height, i.width, r.height, r.width
        )));
    }
    Ok(())
}

/// Mean per-pixel endpoint error between two flows.
pub(crate) fn motion_error(i: &FlowFrame, r: &ReconstructedFlow) -> f64 {
    let n = i.height * i.width;
    let (ru, rv) = (r.u(), r.v());
    let sum: f64 = (0..n)
        .map(|k| {
            let dx = i.u[k] as f64 - ru[k];
            let dy = i.v[k] as f64 - rv[k];
            dx.hypot(dy)
        })
        .sum();
    sum / n as f64
}

/// `(l_motion, l_recon)`.
pub fn flow_loss(i: &FlowFrame, r: &ReconstructedFlow) -> Result<(f64, f64)> {
    check_flow_pair(i, r)?;
    let n = i.height * i.width;
    let recon = i
        .u
        .iter()
        .chain(&i.v)
        .zip(&r.data)
        .map(|(&a, &b)| (a as f64 - b).abs())
        .sum::<f64>()
        / (2 * n) as f64;
    Ok((motion_error(i, r), recon))
}

/// Sum over future steps of the mean over objects of the Euclidean box
/// distance. `y[n][k]` is object `n` at step `k`.
pub fn box_loss(y: &[Vec<BBox>], y_hat: &[Vec<BBox>]) -> Result<f64> {
    if y.len() != y_hat.len() || y.iter().zip(y_hat).any(|(a, b)| a.len() != b.len()) {
        return Err(TadError::Shape("box_loss arguments differ in shape".into()));
    }
    let n = y.len();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = y
        .iter()
        .zip(y_hat)
        .flat_map(|(a, b)| a.iter().zip(b))
        .map(|(a, b)| {
            a.to_array()
                .iter()
                .zip(b.to_array())
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Composes the parts into a full breakdown.
pub fn total_loss(
    l_motion: f64,
    l_recon: f64,
    l_mse: f64,
    l_s: f64,
    w: LossWeights,
) -> Result<LossBreakdown> {
    for (name, v) in [("l_motion", l_motion), ("l_recon", l_recon), ("l_mse", l_mse), ("l_s", l_s)] {
        if !v.is_finite() {
            return Err(TadError::NonFinite(format!("{name} = {v}")));
        }
    }
    let l_f = l_motion + l_recon;
    Ok(LossBreakdown {
        l_motion,
        l_recon,
        l_f,
        l_mse,
        l_s,
        l_total: w.lambda1 * l_f + w.lambda2 * l_mse + w.lambda3 * l_s,
    })
}

/// Graph forms of `(l_motion, l_recon)` for a `[2, H, W]` target and
/// reconstruction.
pub fn flow_loss_graph(g: &Graph, target: Var, recon: Var) -> (Var, Var) {
    let shape = g.shape(target);
    let (h, w) = (shape[1], shape[2]);
    let n = h * w;
    let diff = g.sub(target, recon);
    let l_recon = g.mean_all(g.abs(diff));
    // [2, H·W] → [H·W, 2] rows of (dx, dy)
    let per_pixel = g.transpose(g.reshape(diff, &[2, n]));
    let l_motion = g.mean_all(g.row_norm(per_pixel, MOTION_EPS));
    (l_motion, l_recon)
}

/// Graph form of [`box_loss`] for `[N, T·4]` targets and predictions.
pub fn box_loss_graph(g: &Graph, target: Var, pred: Var) -> Option<Var> {
    let shape = g.shape(target);
    let (n, cols) = (shape[0], shape[1]);
    if n == 0 {
        return None;
    }
    let diff = g.reshape(g.sub(target, pred), &[n * cols / 4, 4]);
    let dist = g.row_norm(diff, 0.0);
    Some(g.scale(g.sum_all(dist), 1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pixel(u: f32, v: f32) -> FlowFrame {
        FlowFrame::constant(0, 1, 1, u, v)
    }

    fn zero_recon(h: usize, w: usize) -> ReconstructedFlow {
        ReconstructedFlow {
            height: h,
            width: w,
            data: vec![0.0; 2 * h * w],
        }
    }

    #[test]
    fn single_pixel_hand_values() {
        let (m, r) = flow_loss(&pixel(3.0, 4.0), &zero_recon(1, 1)).unwrap();
        assert_eq!(m, 5.0);
        assert_eq!(r, 3.5);
    }

    #[test]
    fn identity_is_zero() {
        let f = FlowFrame::from_fn(0, 4, 4, |x, y| (x as f32, -(y as f32)));
        let r = ReconstructedFlow {
            height: 4,
            width: 4,
            data: f.to_f64_planes(),
        };
        assert_eq!(flow_loss(&f, &r).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(flow_loss(&pixel(0.0, 0.0), &zero_recon(2, 1)).is_err());
    }

    #[test]
    fn unit_box_distance_is_two() {
        let y = vec![vec![BBox::new(0.0, 0.0, 0.0, 0.0)]];
        let p = vec![vec![BBox::new(1.0, 1.0, 1.0, 1.0)]];
        assert_eq!(box_loss(&y, &p).unwrap(), 2.0);
        assert_eq!(box_loss(&[], &[]).unwrap(), 0.0);
    }

    #[test]
    fn total_composes_with_defaults() {
        let b = total_loss(0.25, 0.75, 2.0, 3.0, LossWeights::default()).unwrap();
        assert_eq!(b.l_f, 1.0);
        assert!((b.l_total - 3.0006).abs() < 1e-12);
        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.0, LossWeights::default()).is_err());
    }

    #[test]
    fn graph_forms_agree_with_pure() {
        let f = FlowFrame::from_fn(0, 3, 5, |x, y| (x as f32 * 0.5, y as f32 - 1.0));
        let data: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).cos()).collect();
        let r = ReconstructedFlow {
            height: 3,
            width: 5,
            data: data.clone(),
        };
        let (m, rc) = flow_loss(&f, &r).unwrap();
        let g = Graph::new();
        let t = g.leaf(Tensor::from_vec(&[2, 3, 5], f.to_f64_planes()).unwrap());
        let p = g.leaf(Tensor::from_vec(&[2, 3, 5], data).unwrap());
        let (gm, grc) = flow_loss_graph(&g, t, p);
        assert!((g.value(gm).item() - m).abs() < 1e-7);
        assert!((g.value(grc).item() - rc).abs() < 1e-12);

        let y = vec![
            vec![BBox::new(0.1, 0.2, 0.3, 0.4), BBox::new(0.2, 0.2, 0.3, 0.5)],
            vec![BBox::new(0.5, 0.5, 0.6, 0.6), BBox::new(0.4, 0.5, 0.6, 0.7)],
        ];
        let yh = vec![
            vec![BBox::new(0.0, 0.2, 0.3, 0.4), BBox::new(0.2, 0.1, 0.3, 0.5)],
            vec![BBox::new(0.5, 0.5, 0.9, 0.6), BBox::new(0.4, 0.5, 0.6, 0.2)],
        ];
        let flat = |b: &Vec<Vec<BBox>>| {
            Tensor::from_vec(&[2, 8], b.iter().flatten().flat_map(|b| b.to_array()).collect()).unwrap()
        };
        let gl = box_loss_graph(&g, g.leaf(flat(&y)), g.leaf(flat(&yh))).unwrap();
        assert!((g.value(gl).item() - box_loss(&y, &yh).unwrap()).abs() < 1e-12);
    }
}
