//! Trains each requested variant on the synthetic benchmark and prints the
//! overall and per-stream frame AUCs.
//!
//! ```sh
//! VARIANTS=full,concat_only NTRAIN=200 cargo run --release -p tad-core --example experiment
//! ```
//!
//! The toy profile is the base; `TAD_<FIELD>` variables override it.

use std::time::Instant;

use tad_core::data::{DatasetSpec, SceneSampler};
use tad_core::scoring::frame_auc;
use tad_core::training::{evaluate, train};
use tad_core::{TrainConfig, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = TrainConfig::toy().apply_env_overrides(std::env::vars())?;
    let n_train: usize = std::env::var("NTRAIN").map_or(Ok(200), |v| v.parse())?;
    let variants = std::env::var("VARIANTS").unwrap_or_else(|_| "full".into());

    let scene = SceneSampler {
        height: cfg.model.height,
        width: cfg.model.width,
        ..Default::default()
    };
    let train_clips = DatasetSpec {
        scene: scene.clone(),
        normal: n_train,
        seed: 1,
        ..Default::default()
    }
    .generate()?;
    let test = DatasetSpec {
        scene,
        normal: 50,
        ego_jolt: 25,
        object_swerve: 13,
        object_stop: 12,
        seed: 2,
    }
    .generate()?;

    for name in variants.split(',') {
        let variant: Variant = name.trim().parse()?;
        let mut c = cfg.clone();
        c.model.variant = variant;
        let start = Instant::now();
        let ckpt = train(&c, &train_clips)?;
        let secs = start.elapsed().as_secs_f64();
        let eval = evaluate(&ckpt.model()?, &c.scoring, &test)?;

        let labels: Vec<u8> = eval.series.iter().flat_map(|s| s.labels.clone()).collect();
        let s_e: Vec<f64> = eval.series.iter().flat_map(|s| s.s_e.clone()).collect();
        let s_l: Vec<f64> = eval.series.iter().flat_map(|s| s.s_l.clone()).collect();
        println!(
            "{name}: auc {:.4} flow {:.4} boxes {:.4} ({secs:.1}s)",
            eval.auc.unwrap_or(f64::NAN),
            frame_auc(&s_e, &labels).unwrap_or(f64::NAN),
            frame_auc(&s_l, &labels).unwrap_or(f64::NAN),
        );
    }
    Ok(())
}
