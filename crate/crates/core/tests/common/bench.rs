//! The synthetic benchmark used for the end-to-end checks: 200 normal
//! training clips, and a test split of 50 normal, 25 ego-jolt and 25
//! object-deviation clips.

use std::time::Instant;

use tad_core::data::{Clip, DatasetSpec, SceneSampler};
use tad_core::training::{evaluate, train, Checkpoint, Evaluation};
use tad_core::{TrainConfig, Variant};

pub fn benchmark_scene(cfg: &TrainConfig) -> SceneSampler {
    SceneSampler {
        height: cfg.model.height,
        width: cfg.model.width,
        ..SceneSampler::default()
    }
}

pub fn benchmark(cfg: &TrainConfig) -> (Vec<Clip>, Vec<Clip>) {
    let scene = benchmark_scene(cfg);
    let train = DatasetSpec {
        scene: scene.clone(),
        normal: 200,
        seed: 1,
        ..DatasetSpec::default()
    };
    let test = DatasetSpec {
        scene,
        normal: 50,
        ego_jolt: 25,
        object_swerve: 13,
        object_stop: 12,
        seed: 2,
    };
    (train.generate().unwrap(), test.generate().unwrap())
}

pub struct Run {
    pub variant: Variant,
    pub seed: u64,
    pub checkpoint: Checkpoint,
    pub evaluation: Evaluation,
    pub seconds: f64,
}

impl Run {
    pub fn auc(&self) -> f64 {
        self.evaluation.auc.expect("benchmark test split has both classes")
    }
}

pub fn run(base: &TrainConfig, variant: Variant, seed: u64, train_clips: &[Clip], test_clips: &[Clip]) -> Run {
    let mut cfg = base.clone();
    cfg.model.variant = variant;
    cfg.seed = seed;
    let start = Instant::now();
    let checkpoint = train(&cfg, train_clips).unwrap();
    let model = checkpoint.model().unwrap();
    let evaluation = evaluate(&model, &cfg.scoring, test_clips).unwrap();
    Run {
        variant,
        seed,
        checkpoint,
        evaluation,
        seconds: start.elapsed().as_secs_f64(),
    }
}
