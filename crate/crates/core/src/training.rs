//! Deterministic training, checkpointing, evaluation and ablation sweeps.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{NormScope, ScoringConfig, TrainConfig, Variant};
use crate::data::{make_samples, observe, Clip, TrainingSample};
use crate::error::{Result, TadError};
use crate::graph::Graph;
use crate::model::{Model, ModelState};
use crate::objective::{LossBreakdown, LossWeights};
use crate::params::{clip_global_norm, Adam, AdamConfig, Bound};
use crate::scoring::{
    fuse_scores, per_class_auc, pooled_auc, score_boxes, score_flow, ClassAucTable,
    PredictionBuffer, ScoreSeries,
};
use crate::tensor::Tensor;

/// Shuffling stream position, enough to resume the exact sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// 128-bit word position, as decimal text.
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng, seed: u64) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| TadError::Checkpoint(format!("bad rng position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    pub model: ModelState,
    pub optimizer: Adam,
    pub rng: RngState,
    /// Mean loss breakdown per completed epoch.
    pub history: Vec<LossBreakdown>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(TadError::MissingFile(path.to_path_buf()));
        }
        let ckpt: Self = serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| TadError::format(path, e.to_string()))?;
        if ckpt.config.hash_hex() != ckpt.config_hash {
            return Err(TadError::Checkpoint("config hash does not match the stored config".into()));
        }
        if ckpt.model.config != ckpt.config.model {
            return Err(TadError::Checkpoint("model config differs from training config".into()));
        }
        Ok(ckpt)
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_state(self.model.clone())
    }
}

/// Owns the model, optimizer and shuffling stream between epochs.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    rng: ChaCha8Rng,
    pub epoch: usize,
    pub history: Vec<LossBreakdown>,
}

const SHUFFLE_STREAM: u64 = 1;

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let optimizer = Adam::new(adam_config(&config), &model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            config,
            model,
            optimizer,
            rng,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        Ok(Self {
            rng: ckpt.rng.restore()?,
            config: ckpt.config,
            model,
            optimizer: ckpt.optimizer,
            epoch: ckpt.epoch,
            history: ckpt.history,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config.hash_hex(),
            config: self.config.clone(),
            epoch: self.epoch,
            model: self.model.state(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng, self.config.seed),
            history: self.history.clone(),
        }
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.config.lambda1,
            lambda2: self.config.lambda2,
            lambda3: self.config.lambda3,
        }
    }

    /// Loss and parameter gradients of one sample.
    pub fn sample_gradients(&self, sample: &TrainingSample<'_>) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let g = Graph::new();
        let p = Bound::new(&g, &self.model.store);
        let (loss, breakdown) = self.model.loss(&p, sample, self.weights())?;
        let mut grads = g.backward(loss);
        Ok((breakdown, p.gradients(&mut grads)))
    }

    /// One optimizer step on the mean gradient of `batch`, reduced in order.
    pub fn step(&mut self, batch: &[&TrainingSample<'_>]) -> Result<LossBreakdown> {
        let mut total = LossBreakdown::default();
        let mut acc: Option<Vec<Tensor>> = None;
        for s in batch {
            let (b, grads) = self.sample_gradients(s)?;
            total.add(&b);
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let Some(mut grads) = acc else { return Ok(total) };
        let inv = 1.0 / batch.len() as f64;
        grads.iter_mut().for_each(|g| g.scale_assign(inv));
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TadError::NonFinite("gradient".into()));
        }
        clip_global_norm(&mut grads, self.config.grad_clip);
        self.optimizer.update(&mut self.model.store, &grads)?;
        Ok(total)
    }

    /// One pass over `samples` in a freshly shuffled order.
    pub fn run_epoch(&mut self, samples: &[TrainingSample<'_>]) -> Result<LossBreakdown> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = LossBreakdown::default();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &samples[i]).collect();
            total.add(&self.step(&batch)?);
        }
        let mean = total.scaled(1.0 / samples.len().max(1) as f64);
        self.epoch += 1;
        self.history.push(mean);
        log::info!(
            "epoch {} l_total {:.6} (l_f {:.6} l_mse {:.6} l_s {:.6})",
            self.epoch,
            mean.l_total,
            mean.l_f,
            mean.l_mse,
            mean.l_s
        );
        Ok(mean)
    }

    /// Trains until `config.epochs` epochs have completed.
    pub fn fit(&mut self, clips: &[Clip]) -> Result<()> {
        let samples = training_samples(&self.config, clips)?;
        while self.epoch < self.config.epochs {
            self.run_epoch(&samples)?;
        }
        Ok(())
    }
}

fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        beta1: cfg.betas[0],
        beta2: cfg.betas[1],
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    }
}

/// Windows from clips that must be entirely normal.
pub fn training_samples<'a>(cfg: &TrainConfig, clips: &'a [Clip]) -> Result<Vec<TrainingSample<'a>>> {
    let mut samples = Vec::new();
    for clip in clips {
        if !clip.is_all_normal() {
            return Err(TadError::AnomalousTrainingClip {
                clip_id: clip.id.clone(),
            });
        }
        samples.extend(make_samples(clip, cfg.model.obs_len, cfg.model.pred_len)?);
    }
    Ok(samples)
}

/// Trains from scratch on normal clips.
pub fn train(cfg: &TrainConfig, clips: &[Clip]) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.fit(clips)?;
    Ok(trainer.checkpoint())
}

/// Continues a checkpointed run up to `epochs` total epochs.
pub fn resume(ckpt: Checkpoint, clips: &[Clip], epochs: usize) -> Result<Checkpoint> {
    let mut trainer = Trainer::from_checkpoint(ckpt)?;
    trainer.config.epochs = epochs;
    trainer.fit(clips)?;
    Ok(trainer.checkpoint())
}

/// Unnormalized per-frame scores of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct RawScores {
    pub s_e: Vec<f64>,
    pub s_l: Vec<f64>,
    /// Frames where no object had two predictions yet.
    pub warmup: Vec<bool>,
}

/// Runs the model over every frame of a clip, scoring each frame before
/// the rollout made at that frame is buffered.
pub fn score_clip(model: &Model, scoring: &ScoringConfig, clip: &Clip) -> Result<RawScores> {
    let mut buffer = PredictionBuffer::new(scoring.delta);
    let mut out = RawScores {
        s_e: Vec::with_capacity(clip.len()),
        s_l: Vec::with_capacity(clip.len()),
        warmup: Vec::with_capacity(clip.len()),
    };
    for t in 0..clip.len() {
        let sample = observe(clip, t, model.config.obs_len)?;
        let inf = model.infer(sample.flow, &sample.objects)?;
        let s_e = match &inf.recon {
            Some(r) => score_flow(sample.flow, r)?,
            None => 0.0,
        };
        let observed: Vec<_> = clip.tracks.visible_at(t).collect();
        let sl = score_boxes(&buffer, &observed, t);
        for (id, boxes) in inf.rollouts {
            buffer.push(id, t, boxes);
        }
        buffer.prune(t);
        out.s_e.push(s_e);
        out.s_l.push(sl.value);
        out.warmup.push(sl.warmup);
    }
    Ok(out)
}

/// Fusion weight actually used: single-task variants score with their own
/// branch only.
pub fn effective_alpha(variant: Variant, alpha: f64) -> f64 {
    match variant {
        Variant::FolOnly => 0.0,
        Variant::FlowOnly => 1.0,
        _ => alpha,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub series: Vec<ScoreSeries>,
    /// Pooled frame-level AUC of `s_f`; absent when labels are single-class.
    pub auc: Option<f64>,
    pub per_class: ClassAucTable,
}

pub fn evaluate(model: &Model, scoring: &ScoringConfig, clips: &[Clip]) -> Result<Evaluation> {
    scoring.validate(model.config.pred_len)?;
    let alpha = effective_alpha(model.variant(), scoring.alpha);
    let raw = clips
        .iter()
        .map(|c| score_clip(model, scoring, c))
        .collect::<Result<Vec<_>>>()?;
    let fused: Vec<Vec<f64>> = match scoring.norm_scope {
        NormScope::PerClip => raw
            .iter()
            .map(|r| fuse_scores(&r.s_e, &r.s_l, alpha))
            .collect::<Result<_>>()?,
        NormScope::Global => {
            let e: Vec<f64> = raw.iter().flat_map(|r| r.s_e.iter().copied()).collect();
            let l: Vec<f64> = raw.iter().flat_map(|r| r.s_l.iter().copied()).collect();
            let all = fuse_scores(&e, &l, alpha)?;
            let mut offset = 0;
            raw.iter()
                .map(|r| {
                    let part = all[offset..offset + r.s_e.len()].to_vec();
                    offset += r.s_e.len();
                    part
                })
                .collect()
        }
    };
    let series: Vec<ScoreSeries> = clips
        .iter()
        .zip(raw)
        .zip(fused)
        .map(|((c, r), s_f)| ScoreSeries {
            clip_id: c.id.clone(),
            category: c.category,
            s_e: r.s_e,
            s_l: r.s_l,
            s_f,
            labels: c.labels.clone(),
        })
        .collect();
    let auc = match pooled_auc(&series) {
        Ok(a) => Some(a),
        Err(TadError::SingleClass) => {
            log::warn!("evaluation labels are single-class; AUC undefined");
            None
        }
        Err(e) => return Err(e),
    };
    let per_class = per_class_auc(&series);
    Ok(Evaluation {
        series,
        auc,
        per_class,
    })
}

/// Seeded shuffle of clip indices into `(train, test)` index sets.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
    let test = idx.split_off(n - n_test);
    (idx, test)
}

/// Axes of an ablation grid. An absent axis keeps the base value; an empty
/// axis makes the grid empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationGrid {
    pub variant: Option<Vec<Variant>>,
    pub memory_slots: Option<Vec<usize>>,
    pub shrink_threshold: Option<Vec<f64>>,
    pub layers: Option<Vec<usize>>,
    pub alpha: Option<Vec<f64>>,
    pub delta: Option<Vec<usize>>,
    pub seed: Option<Vec<u64>>,
}

/// Overrides applied in one cell.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Option<Variant>,
    pub memory_slots: Option<usize>,
    pub shrink_threshold: Option<f64>,
    pub layers: Option<usize>,
    pub alpha: Option<f64>,
    pub delta: Option<usize>,
    pub seed: Option<u64>,
}

impl AblationCell {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        if let Some(v) = self.variant {
            c.model.variant = v;
        }
        if let Some(m) = self.memory_slots {
            c.model.memory_slots = m;
        }
        if let Some(l) = self.shrink_threshold {
            c.model.shrink_threshold = Some(l);
        }
        if let Some(l) = self.layers {
            c.model.layers = l;
        }
        if let Some(a) = self.alpha {
            c.scoring.alpha = a;
        }
        if let Some(d) = self.delta {
            c.scoring.delta = d;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.variant {
            parts.push(format!("variant={v}"));
        }
        if let Some(m) = self.memory_slots {
            parts.push(format!("M={m}"));
        }
        if let Some(l) = self.shrink_threshold {
            parts.push(format!("lambda={l}"));
        }
        if let Some(l) = self.layers {
            parts.push(format!("L={l}"));
        }
        if let Some(a) = self.alpha {
            parts.push(format!("alpha={a}"));
        }
        if let Some(d) = self.delta {
            parts.push(format!("delta={d}"));
        }
        if let Some(s) = self.seed {
            parts.push(format!("seed={s}"));
        }
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join(" ")
        }
    }
}

fn axis<T: Clone>(a: &Option<Vec<T>>) -> Vec<Option<T>> {
    match a {
        None => vec![None],
        Some(v) => v.iter().cloned().map(Some).collect(),
    }
}

impl AblationGrid {
    /// Cartesian product of the axes, in declaration order.
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut out = Vec::new();
        for variant in axis(&self.variant) {
            for memory_slots in axis(&self.memory_slots) {
                for shrink_threshold in axis(&self.shrink_threshold) {
                    for layers in axis(&self.layers) {
                        for alpha in axis(&self.alpha) {
                            for delta in axis(&self.delta) {
                                for seed in axis(&self.seed) {
                                    out.push(AblationCell {
                                        variant,
                                        memory_slots,
                                        shrink_threshold,
                                        layers,
                                        alpha,
                                        delta,
                                        seed,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub label: String,
    pub auc: Option<f64>,
    pub final_loss: Option<f64>,
    /// Fraction of memory reads that fell back to unshrunk weights on the
    /// first evaluation clip.
    pub fallback_rate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| cell | AUC | final l_total |\n|---|---|---|\n");
        for r in &self.rows {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            s.push_str(&format!("| {} | {} | {} |\n", r.label, f(r.auc), f(r.final_loss)));
        }
        s
    }
}

/// One train + evaluate run per grid cell on a shared split.
pub fn run_ablation(
    base: &TrainConfig,
    grid: &AblationGrid,
    train_clips: &[Clip],
    test_clips: &[Clip],
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for cell in grid.cells() {
        let cfg = cell.apply(base);
        let label = cell.label();
        log::info!("ablation cell {label}");
        let ckpt = train(&cfg, train_clips)?;
        let model = ckpt.model()?;
        let eval = evaluate(&model, &cfg.scoring, test_clips)?;
        let fallback_rate = test_clips.first().map(|c| fallback_rate(&model, c)).transpose()?.flatten();
        rows.push(AblationRow {
            cell,
            label,
            auc: eval.auc,
            final_loss: ckpt.history.last().map(|b| b.l_total),
            fallback_rate,
        });
    }
    Ok(AblationReport { rows })
}

/// Share of (layer, head, query) memory reads whose shrunk row was empty.
pub fn fallback_rate(model: &Model, clip: &Clip) -> Result<Option<f64>> {
    let (mut hit, mut total) = (0usize, 0usize);
    for t in 0..clip.len() {
        let s = observe(clip, t, model.config.obs_len)?;
        for tr in model.infer(s.flow, &s.objects)?.traces {
            for rows in &tr.fallback {
                hit += rows.iter().filter(|&&f| f).count();
                total += rows.len();
            }
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_product_and_empty_axis() {
        let g = AblationGrid {
            variant: Some(vec![Variant::FolOnly, Variant::FlowOnly, Variant::Full]),
            seed: Some(vec![1, 2]),
            ..AblationGrid::default()
        };
        assert_eq!(g.cells().len(), 6);
        assert_eq!(AblationGrid::default().cells().len(), 1);
        let empty = AblationGrid {
            layers: Some(vec![]),
            ..AblationGrid::default()
        };
        assert!(empty.cells().is_empty());
    }

    #[test]
    fn split_is_a_partition() {
        let (a, b) = split_indices(10, 0.3, 4);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(10, 0.3, 4), (a, b));
    }

    #[test]
    fn single_task_variants_pin_alpha() {
        assert_eq!(effective_alpha(Variant::FolOnly, 0.4), 0.0);
        assert_eq!(effective_alpha(Variant::FlowOnly, 0.4), 1.0);
        assert_eq!(effective_alpha(Variant::Full, 0.4), 0.4);
    }
}
