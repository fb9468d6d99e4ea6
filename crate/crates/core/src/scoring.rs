//! Per-frame anomaly scores, their fusion, and frame-level AUC.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, Category, FlowFrame};
use crate::decoders::ReconstructedFlow;
use crate::error::{Result, TadError};
use crate::objective::motion_error;

/// Mean per-pixel endpoint error of the reconstruction.
pub fn score_flow(i: &FlowFrame, r: &ReconstructedFlow) -> Result<f64> {
    if (i.height, i.width) != (r.height, r.width) || r.data.len() != 2 * r.height * r.width {
        return Err(TadError::Shape(format!(
            "flow {}x{} vs reconstruction {}x{}",
            i.height, i.width, r.height, r.width
        )));
    }
    Ok(motion_error(i, r))
}

/// Recent box rollouts per object, indexed by the frame they were made at.
#[derive(Clone, Debug)]
pub struct PredictionBuffer {
    delta: usize,
    rollouts: BTreeMap<u64, VecDeque<(usize, Vec<BBox>)>>,
}

impl PredictionBuffer {
    pub fn new(delta: usize) -> Self {
        Self {
            delta: delta.max(1),
            rollouts: BTreeMap::new(),
        }
    }

    pub fn delta(&self) -> usize {
        self.delta
    }

    /// Stores the rollout made at frame `t`; `boxes[k]` predicts frame
    /// `t + 1 + k`.
    pub fn push(&mut self, id: u64, t: usize, boxes: Vec<BBox>) {
        let q = self.rollouts.entry(id).or_default();
        q.push_back((t, boxes));
        while q.len() > self.delta {
            q.pop_front();
        }
    }

    /// Drops rollouts too old to predict any frame after `t`.
    pub fn prune(&mut self, t: usize) {
        let delta = self.delta;
        self.rollouts.retain(|_, q| {
            while q.front().is_some_and(|(made, _)| made + delta < t) {
                q.pop_front();
            }
            !q.is_empty()
        });
    }

    /// Predictions of object `id` for frame `t`, as `(j, box)` with the box
    /// made at `t − j`, for `1 ≤ j ≤ δ`.
    pub fn predictions(&self, id: u64, t: usize) -> Vec<(usize, BBox)> {
        let Some(q) = self.rollouts.get(&id) else { return Vec::new() };
        let mut out: Vec<(usize, BBox)> = q
            .iter()
            .filter(|(made, _)| *made < t && t - made <= self.delta)
            .filter_map(|(made, boxes)| boxes.get(t - made - 1).map(|b| (t - made, *b)))
            .collect();
        out.sort_by_key(|(j, _)| *j);
        out
    }

    pub fn depth(&self, id: u64, t: usize) -> usize {
        self.predictions(id, t).len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxScore {
    pub value: f64,
    /// No object had at least two predictions for this frame.
    pub warmup: bool,
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Max over objects of the coordinate-averaged spread of prediction errors
/// for frame `t`.
pub fn score_boxes(buffer: &PredictionBuffer, observed: &[(u64, BBox)], t: usize) -> BoxScore {
    let mut best: Option<f64> = None;
    for (id, y) in observed {
        let preds = buffer.predictions(*id, t);
        if preds.len() < 2 {
            continue;
        }
        let y = y.to_array();
        let per_coord: f64 = (0..4)
            .map(|c| {
                let errs: Vec<f64> = preds.iter().map(|(_, b)| (y[c] - b.to_array()[c]).abs()).collect();
                population_std(&errs)
            })
            .sum::<f64>()
            / 4.0;
        best = Some(best.map_or(per_coord, |b: f64| b.max(per_coord)));
    }
    BoxScore {
        value: best.unwrap_or(0.0),
        warmup: best.is_none(),
    }
}

/// Min-max normalization; a constant series maps to zeros.
pub fn minmax_normalize(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| ((x - lo) / range).clamp(0.0, 1.0)).collect()
}

/// `Norm(α·Norm(s_e) + (1 − α)·Norm(s_l))`.
pub fn fuse_scores(s_e: &[f64], s_l: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if s_e.len() != s_l.len() {
        return Err(TadError::Shape(format!(
            "s_e has {} frames, s_l has {}",
            s_e.len(),
            s_l.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TadError::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (ne, nl) = (minmax_normalize(s_e), minmax_normalize(s_l));
    let mixed: Vec<f64> = ne
        .iter()
        .zip(&nl)
        .map(|(e, l)| alpha * e + (1.0 - alpha) * l)
        .collect();
    Ok(minmax_normalize(&mixed))
}

/// Exact Mann–Whitney AUC: `P(pos > neg) + ½ P(tie)`.
pub fn frame_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(TadError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(TadError::NonFinite("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TadError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // (2·wins + ties) accumulated as integers
    let (mut twice, mut neg_below) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] != 0 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice as f64 / (2 * n_pos * n_neg) as f64)
}

/// Per-frame scores of one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub clip_id: String,
    pub category: Category,
    pub s_e: Vec<f64>,
    pub s_l: Vec<f64>,
    pub s_f: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "frame,s_e,s_l,s_f,label")?;
        for t in 0..self.len() {
            writeln!(
                out,
                "{t},{},{},{},{}",
                self.s_e[t], self.s_l[t], self.s_f[t], self.labels[t]
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Pools every series' `s_f` and labels.
pub fn pooled_auc(series: &[ScoreSeries]) -> Result<f64> {
    let scores: Vec<f64> = series.iter().flat_map(|s| s.s_f.iter().copied()).collect();
    let labels: Vec<u8> = series.iter().flat_map(|s| s.labels.iter().copied()).collect();
    frame_auc(&scores, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAuc {
    /// Category tag, `*` marking non-ego accidents.
    pub tag: String,
    pub clips: usize,
    pub auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassAucTable {
    pub rows: Vec<ClassAuc>,
    /// Unweighted mean over rows.
    pub mean: Option<f64>,
}

/// AUC per accident category and ego flag, pooling the frames of each
/// bucket's clips. Buckets lacking either class are omitted with a warning.
pub fn per_class_auc(series: &[ScoreSeries]) -> ClassAucTable {
    let mut buckets: BTreeMap<String, Vec<&ScoreSeries>> = BTreeMap::new();
    for s in series {
        if !s.category.is_normal() {
            buckets.entry(s.category.to_string()).or_default().push(s);
        }
    }
    let mut rows = Vec::new();
    for (tag, clips) in buckets {
        let scores: Vec<f64> = clips.iter().flat_map(|s| s.s_f.iter().copied()).collect();
        let labels: Vec<u8> = clips.iter().flat_map(|s| s.labels.iter().copied()).collect();
        match frame_auc(&scores, &labels) {
            Ok(auc) => rows.push(ClassAuc {
                tag,
                clips: clips.len(),
                auc,
            }),
            Err(e) => log::warn!("skipping category {tag}: {e}"),
        }
    }
    let mean = (!rows.is_empty()).then(|| rows.iter().map(|r| r.auc).sum::<f64>() / rows.len() as f64);
    ClassAucTable { rows, mean }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64) -> BBox {
        BBox::new(x, 0.1, x + 0.2, 0.3)
    }

    #[test]
    fn minmax_cases() {
        assert_eq!(minmax_normalize(&[1.0, 2.0, 3.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[5.0, 5.0, 5.0]), vec![0.0; 3]);
    }

    #[test]
    fn fusion_hand_value() {
        assert_eq!(fuse_scores(&[0.0, 1.0], &[1.0, 0.0], 0.4).unwrap(), vec![1.0, 0.0]);
        assert!(fuse_scores(&[0.0], &[1.0, 0.0], 0.4).is_err());
        assert!(fuse_scores(&[0.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(frame_auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(frame_auc(&[0.9, 0.8, 0.1, 0.2], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(frame_auc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(frame_auc(&[0.1, 0.2], &[1, 1]), Err(TadError::SingleClass)));
    }

    #[test]
    fn one_deviating_coordinate() {
        let mut buf = PredictionBuffer::new(5);
        let y = BBox::new(0.1, 0.1, 0.3, 0.3);
        let mut off = y;
        off.x_min += 0.2;
        buf.push(1, 8, vec![off, off]); // j = 2 for frame 10
        buf.push(1, 9, vec![y]); // j = 1
        let s = score_boxes(&buf, &[(1, y)], 10);
        assert!(!s.warmup);
        assert!((s.value - 0.025).abs() < 1e-12);
    }

    #[test]
    fn warmup_and_identical_predictions() {
        let mut buf = PredictionBuffer::new(5);
        assert_eq!(score_boxes(&buf, &[(1, b(0.1))], 3), BoxScore { value: 0.0, warmup: true });
        for t in 0..4 {
            buf.push(1, t, vec![b(0.3); 10]);
        }
        let s = score_boxes(&buf, &[(1, b(0.1))], 4);
        assert_eq!(s.value, 0.0);
        assert!(!s.warmup);
        assert_eq!(buf.depth(1, 4), 4);
    }

    #[test]
    fn buffer_respects_delta() {
        let mut buf = PredictionBuffer::new(3);
        for t in 0..10 {
            buf.push(7, t, vec![b(0.0); 10]);
        }
        let p = buf.predictions(7, 10);
        assert_eq!(p.iter().map(|(j, _)| *j).collect::<Vec<_>>(), vec![1, 2, 3]);
        buf.prune(20);
        assert_eq!(buf.depth(7, 20), 0);
    }

    #[test]
    fn max_over_objects() {
        let mut buf = PredictionBuffer::new(5);
        let y = b(0.1);
        buf.push(1, 0, vec![b(0.1), b(0.1)]);
        buf.push(1, 1, vec![b(0.14)]);
        buf.push(2, 0, vec![b(0.1), b(0.1)]);
        buf.push(2, 1, vec![b(0.5)]);
        let both = score_boxes(&buf, &[(1, y), (2, y)], 2).value;
        let only2 = score_boxes(&buf, &[(2, y)], 2).value;
        assert_eq!(both, only2);
        assert_eq!(score_boxes(&buf, &[(2, y), (1, y)], 2).value, both);
    }

    fn oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut twice, mut np, mut nn) = (0u64, 0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            if li == 0 {
                nn += 1;
                continue;
            }
            np += 1;
            for (j, &lj) in labels.iter().enumerate() {
                if lj == 0 {
                    twice += if scores[i] > scores[j] {
                        2
                    } else if scores[i] == scores[j] {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        twice as f64 / (2 * np * nn) as f64
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(
            pairs in prop::collection::vec((0u8..20, 0u8..2), 2..100)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 7.0).collect();
            let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            prop_assert_eq!(frame_auc(&scores, &labels).unwrap(), oracle(&scores, &labels));
        }

        #[test]
        fn fusion_is_affine_invariant(
            e in prop::collection::vec(-5.0f64..5.0, 2..30),
            a in 0.1f64..10.0,
            c in -3.0f64..3.0,
        ) {
            let l: Vec<f64> = e.iter().map(|x| (x * 1.3).sin()).collect();
            let scaled: Vec<f64> = e.iter().map(|x| a * x + c).collect();
            let f0 = fuse_scores(&e, &l, 0.4).unwrap();
            let f1 = fuse_scores(&scaled, &l, 0.4).unwrap();
            for (x, y) in f0.iter().zip(&f1) {
                prop_assert!((x - y).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(x));
            }
        }
    }
}
