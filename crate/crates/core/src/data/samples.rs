use super::{BBox, Clip, FlowFrame};
use crate::error::{Result, TadError};

/// One object's observed box history and, for training, its future boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectWindow {
    pub id: u64,
    /// Boxes at `t - obs_len + 1 ..= t`.
    pub history: Vec<BBox>,
    /// Boxes at `t + 1 ..= t + pred_len`; empty at inference time.
    pub future: Vec<BBox>,
}

impl ObjectWindow {
    pub fn last(&self) -> BBox {
        *self.history.last().expect("non-empty history")
    }
}

/// Model input at frame `t` of a clip.
#[derive(Clone, Debug)]
pub struct TrainingSample<'a> {
    pub clip_id: &'a str,
    pub t: usize,
    pub flow: &'a FlowFrame,
    pub objects: Vec<ObjectWindow>,
}

fn check_lengths(obs_len: usize, pred_len: usize) -> Result<()> {
    if obs_len == 0 || pred_len == 0 {
        return Err(TadError::Config(format!(
            "obs_len ({obs_len}) and pred_len ({pred_len}) must be at least 1"
        )));
    }
    Ok(())
}

/// One sample per frame `t` with `t ≥ obs_len − 1` and `t + pred_len < len`.
/// Objects not visible over the whole `[t − obs_len + 1, t + pred_len]`
/// window are dropped from that sample.
pub fn make_samples(clip: &Clip, obs_len: usize, pred_len: usize) -> Result<Vec<TrainingSample<'_>>> {
    check_lengths(obs_len, pred_len)?;
    let len = clip.len();
    if len < obs_len + pred_len {
        return Ok(Vec::new());
    }
    let samples = (obs_len - 1..len - pred_len)
        .map(|t| {
            let first = t + 1 - obs_len;
            let objects = clip
                .tracks
                .tracks
                .iter()
                .filter(|tr| tr.covers(first, t + pred_len))
                .map(|tr| ObjectWindow {
                    id: tr.id,
                    history: (first..=t).map(|f| tr.at(f).expect("covered")).collect(),
                    future: (t + 1..=t + pred_len).map(|f| tr.at(f).expect("covered")).collect(),
                })
                .collect();
            TrainingSample {
                clip_id: &clip.id,
                t,
                flow: &clip.flows[t],
                objects,
            }
        })
        .collect();
    Ok(samples)
}

/// Inference-time input at frame `t`: objects visible over the full
/// observation window ending at `t`. Before `obs_len − 1` no object
/// qualifies and the sample is ego-only.
pub fn observe(clip: &Clip, t: usize, obs_len: usize) -> Result<TrainingSample<'_>> {
    check_lengths(obs_len, 1)?;
    let objects = match (t + 1).checked_sub(obs_len) {
        Some(first) => clip
            .tracks
            .tracks
            .iter()
            .filter(|tr| tr.covers(first, t))
            .map(|tr| ObjectWindow {
                id: tr.id,
                history: (first..=t).map(|f| tr.at(f).expect("covered")).collect(),
                future: Vec::new(),
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(TrainingSample {
        clip_id: &clip.id,
        t,
        flow: &clip.flows[t],
        objects,
    })
}
