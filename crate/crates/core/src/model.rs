//! The assembled detector: encoders, token fusion, decoders and losses for
//! every variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Variant};
use crate::data::{BBox, FlowFrame, ObjectWindow, TrainingSample};
use crate::decoders::{split_tokens, BoxDecoder, FlowDecoder, ReconstructedFlow};
use crate::encoders::{FlowEncoder, ObjectEncoder};
use crate::error::{Result, TadError};
use crate::graph::{Graph, Var};
use crate::layers::Linear;
use crate::mamr::{
    positional_table, sparsity_loss_graph, token_positions, AttentionTrace, Mamr,
};
use crate::objective::{box_loss_graph, flow_loss_graph, total_loss, LossBreakdown, LossWeights};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// How the motion tokens are fused.
#[derive(Clone, Debug)]
pub enum Fusion {
    Attention(Mamr),
    /// Each token concatenated with the mean token, then linearly mixed.
    Concat(Linear),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub flow_encoder: Option<FlowEncoder>,
    pub object_encoder: Option<ObjectEncoder>,
    pub fusion: Fusion,
    pub flow_decoder: Option<FlowDecoder>,
    pub box_decoder: Option<BoxDecoder>,
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[2, H, W]` reconstruction.
    pub recon: Option<Var>,
    /// `[N, pred_len·4]` absolute boxes.
    pub boxes: Option<Var>,
    /// Fused tokens, global row first when present.
    pub tokens: Option<Var>,
    pub addressing: Vec<Var>,
    pub traces: Vec<AttentionTrace>,
}

/// Detached results of inference on one frame.
#[derive(Clone, Debug)]
pub struct Inference {
    pub recon: Option<ReconstructedFlow>,
    /// Per object: rollout boxes for frames `t + 1 ..= t + pred_len`.
    pub rollouts: Vec<(u64, Vec<BBox>)>,
    pub traces: Vec<AttentionTrace>,
}

/// Parameters plus the configuration needed to rebuild the layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let v = config.variant;
        let flow_encoder = v.uses_flow().then(|| FlowEncoder::new(&mut store, &config, &mut rng));
        let object_encoder = v.uses_boxes().then(|| ObjectEncoder::new(&mut store, &config, &mut rng));
        let fusion = match v {
            Variant::ConcatOnly => Fusion::Concat(Linear::new(
                &mut store,
                "concat.mix",
                2 * config.d_model,
                config.d_model,
                true,
                &mut rng,
            )),
            Variant::NoMemory => Fusion::Attention(Mamr::new(&mut store, &config, false, &mut rng)),
            _ => Fusion::Attention(Mamr::new(&mut store, &config, true, &mut rng)),
        };
        let flow_decoder = v.uses_flow().then(|| FlowDecoder::new(&mut store, &config, &mut rng));
        let box_decoder = v.uses_boxes().then(|| BoxDecoder::new(&mut store, &config, &mut rng));
        Ok(Self {
            config,
            store,
            flow_encoder,
            object_encoder,
            fusion,
            flow_decoder,
            box_decoder,
        })
    }

    /// Rebuilds the layout for `state.config` and installs its parameters.
    pub fn from_state(state: ModelState) -> Result<Self> {
        let mut model = Self::new(state.config, 0)?;
        let fresh = &model.store;
        if fresh.len() != state.store.len()
            || fresh.ids().any(|id| {
                fresh.name(id) != state.store.name(id)
                    || fresh.get(id).shape() != state.store.get(id).shape()
            })
        {
            return Err(TadError::Checkpoint(
                "parameter layout does not match the configuration".into(),
            ));
        }
        if !state.store.is_finite() {
            return Err(TadError::Checkpoint("non-finite parameter".into()));
        }
        model.store = state.store;
        Ok(model)
    }

    pub fn state(&self) -> ModelState {
        ModelState {
            config: self.config.clone(),
            store: self.store.clone(),
        }
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Runs encoders, fusion and decoders on one frame.
    pub fn forward(&self, p: &Bound, flow: &FlowFrame, objects: &[ObjectWindow]) -> Result<ForwardOutput> {
        let g = p.graph;
        let global = match &self.flow_encoder {
            Some(enc) => Some(enc.forward(p, flow)?),
            None => None,
        };
        let object_tokens = match &self.object_encoder {
            Some(enc) if !objects.is_empty() => Some(enc.forward(p, objects, flow)?),
            _ => None,
        };

        let (rows, positions): (Vec<Var>, Vec<usize>) = match (global, object_tokens) {
            (Some(gm), Some(x)) => {
                let n = g.shape(x)[0];
                (vec![gm.token, x], token_positions(1 + n, self.config.position_mode))
            }
            (Some(gm), None) => (vec![gm.token], vec![0]),
            (None, Some(x)) => {
                let n = g.shape(x)[0];
                // object tokens keep the positions they would have after a
                // global row
                let pos = token_positions(1 + n, self.config.position_mode);
                (vec![x], pos[1..].to_vec())
            }
            (None, None) => {
                return Ok(ForwardOutput {
                    recon: None,
                    boxes: None,
                    tokens: None,
                    addressing: Vec::new(),
                    traces: Vec::new(),
                })
            }
        };
        let stacked = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };

        let (fused, addressing, traces) = match &self.fusion {
            Fusion::Attention(stack) => {
                let d = self.config.d_model;
                let encoded = g.add(stacked, g.leaf(positional_table(&positions, d)));
                let out = stack.forward_encoded(p, encoded);
                (out.tokens, out.addressing, out.traces)
            }
            Fusion::Concat(mix) => (concat_mix(p, mix, stacked), Vec::new(), Vec::new()),
        };

        let (f_prime, x_prime) = match global {
            Some(_) => {
                let (f, x) = split_tokens(g, fused);
                (Some(f), Some(x))
            }
            None => (None, Some(fused)),
        };

        let recon = match (&self.flow_decoder, f_prime, global) {
            (Some(dec), Some(f), Some(gm)) => Some(dec.forward(p, f, Some(gm.skip_state))),
            _ => None,
        };
        let boxes = match (&self.box_decoder, x_prime) {
            (Some(dec), Some(x)) if !objects.is_empty() => {
                let last: Vec<f64> = objects.iter().flat_map(|o| o.last().to_array()).collect();
                let last = Tensor::from_vec(&[objects.len(), 4], last)?;
                Some(dec.forward(p, x, &last, self.config.pred_len)?)
            }
            _ => None,
        };
        Ok(ForwardOutput {
            recon,
            boxes,
            tokens: Some(fused),
            addressing,
            traces,
        })
    }

    /// Builds the training objective for one sample. Returns the `l_total`
    /// node and the detached breakdown.
    pub fn loss(
        &self,
        p: &Bound,
        sample: &TrainingSample<'_>,
        weights: LossWeights,
    ) -> Result<(Var, LossBreakdown)> {
        let g = p.graph;
        let out = self.forward(p, sample.flow, &sample.objects)?;
        let mut terms: Vec<Var> = Vec::new();
        let (mut l_motion, mut l_recon, mut l_mse, mut l_s) = (0.0, 0.0, 0.0, 0.0);
        if let Some(recon) = out.recon {
            let f = sample.flow;
            let target = g.leaf(Tensor::from_vec(&[2, f.height, f.width], f.to_f64_planes())?);
            let (m, r) = flow_loss_graph(g, target, recon);
            l_motion = g.value(m).item();
            l_recon = g.value(r).item();
            terms.push(g.scale(g.add(m, r), weights.lambda1));
        }
        if let Some(boxes) = out.boxes {
            let n = sample.objects.len();
            if sample.objects.iter().any(|o| o.future.len() != self.config.pred_len) {
                return Err(TadError::Shape(format!(
                    "sample at t={} lacks {} future boxes per object",
                    sample.t, self.config.pred_len
                )));
            }
            let y: Vec<f64> = sample
                .objects
                .iter()
                .flat_map(|o| o.future.iter().flat_map(|b| b.to_array()))
                .collect();
            let target = g.leaf(Tensor::from_vec(&[n, 4 * self.config.pred_len], y)?);
            if let Some(l) = box_loss_graph(g, target, boxes) {
                l_mse = g.value(l).item();
                terms.push(g.scale(l, weights.lambda2));
            }
        }
        if let Some(s) = sparsity_loss_graph(g, &out.addressing, self.config.heads) {
            l_s = g.value(s).item();
            terms.push(g.scale(s, weights.lambda3));
        }
        let total = match terms.len() {
            0 => g.leaf(Tensor::scalar(0.0)),
            1 => terms[0],
            _ => g.sum_all(g.concat_rows(
                &terms.iter().map(|&t| g.reshape(t, &[1, 1])).collect::<Vec<_>>(),
            )),
        };
        let breakdown = total_loss(l_motion, l_recon, l_mse, l_s, weights)?;
        if !g.value(total).is_finite() {
            return Err(TadError::NonFinite(format!("loss at {} t={}", sample.clip_id, sample.t)));
        }
        Ok((total, breakdown))
    }

    /// Forward pass without gradients, detached into plain values.
    pub fn infer(&self, flow: &FlowFrame, objects: &[ObjectWindow]) -> Result<Inference> {
        let g = Graph::new();
        let p = Bound::new(&g, &self.store);
        let out = self.forward(&p, flow, objects)?;
        let recon = match out.recon {
            Some(r) => Some(ReconstructedFlow::from_tensor(&g.value(r))?),
            None => None,
        };
        let rollouts = match out.boxes {
            Some(b) => {
                let t = g.value(b);
                objects
                    .iter()
                    .enumerate()
                    .map(|(i, o)| {
                        let boxes = t.row(i).chunks(4).map(|c| BBox::new(c[0], c[1], c[2], c[3])).collect();
                        (o.id, boxes)
                    })
                    .collect()
            }
            None => Vec::new(),
        };
        Ok(Inference {
            recon,
            rollouts,
            traces: out.traces,
        })
    }
}

/// `Linear([token_r, mean_r token_r])` for every row.
fn concat_mix(p: &Bound, mix: &Linear, tokens: Var) -> Var {
    let g = p.graph;
    let rows = g.shape(tokens)[0];
    let avg = g.leaf(Tensor::full(&[1, rows], 1.0 / rows as f64));
    let mean = g.matmul(avg, tokens);
    let spread = g.matmul(g.leaf(Tensor::full(&[rows, 1], 1.0)), mean);
    mix.forward(p, g.concat_cols(&[tokens, spread]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_samples, SceneSampler, AnomalyKind, generate_clip};

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            height: 16,
            width: 16,
            enc_channels: [4, 4, 4],
            memory_slots: 6,
            layers: 1,
            heads: 2,
            pred_len: 4,
            obs_len: 3,
            variant,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn every_variant_produces_a_finite_loss() {
        let s = SceneSampler {
            height: 16,
            width: 16,
            frames: 12,
            min_objects: 2,
            max_objects: 2,
            onset_range: [4, 5],
            duration_range: [2, 3],
            ..SceneSampler::default()
        };
        let clip = generate_clip(&s.sample(3, 0, AnomalyKind::None).unwrap()).unwrap();
        let samples = make_samples(&clip, 3, 4).unwrap();
        for v in Variant::ALL {
            let m = Model::new(tiny(v), 1).unwrap();
            let g = Graph::new();
            let p = Bound::new(&g, &m.store);
            let (l, b) = m.loss(&p, &samples[0], LossWeights::default()).unwrap();
            assert!((g.value(l).item() - b.l_total).abs() < 1e-9 * b.l_total.max(1.0), "{v}");
            assert_eq!(b.l_f > 0.0, v.uses_flow(), "{v}");
            assert_eq!(b.l_mse > 0.0, v.uses_boxes(), "{v}");
        }
    }

    #[test]
    fn state_round_trip() {
        let m = Model::new(tiny(Variant::Full), 5).unwrap();
        let r = Model::from_state(m.state()).unwrap();
        assert_eq!(r.store, m.store);
        let mut bad = m.state();
        bad.config.d_model = 16;
        bad.config.heads = 2;
        assert!(Model::from_state(bad).is_err());
    }
}
