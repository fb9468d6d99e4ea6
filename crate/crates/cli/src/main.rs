use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use tad_core::data::{load_clip, load_clips, save_clip, Clip, DatasetSpec};
use tad_core::plot::save_score_curve;
use tad_core::training::{
    evaluate, resume, run_ablation, split_indices, train, AblationGrid, Checkpoint, Evaluation,
};
use tad_core::{TadError, TrainConfig};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] TadError),
    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, CliError>;

/// Memory-augmented multi-task traffic accident detection.
///
/// Every flag can also be set through an environment variable named
/// `TAD_<FLAG>` (upper case, dashes as underscores). Training configuration
/// fields are overridden the same way, e.g. `TAD_LR=0.001`.
#[derive(Parser, Debug)]
#[command(name = "tad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on normal clips and write a checkpoint.
    Train {
        /// TOML file of training configuration fields; missing fields take
        /// desk-profile defaults.
        #[arg(long, env = "TAD_CONFIG")]
        config: Option<PathBuf>,
        /// Start from the full-scale profile instead of the desk profile.
        #[arg(long, env = "TAD_FULL_SCALE")]
        full_scale: bool,
        /// Directory of clip directories.
        #[arg(long, env = "TAD_DATA")]
        data: PathBuf,
        #[arg(long, env = "TAD_OUT")]
        out: PathBuf,
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long, env = "TAD_RESUME")]
        resume: Option<PathBuf>,
        /// Train on the normal prefix of anomalous clips instead of refusing
        /// them.
        #[arg(long, env = "TAD_USE_PRECURSORS")]
        use_precursors: bool,
    },
    /// Score every clip and report frame-level AUC.
    Eval {
        #[arg(long, env = "TAD_CKPT")]
        ckpt: PathBuf,
        #[arg(long, env = "TAD_DATA")]
        data: PathBuf,
        /// Output directory for report.json, auc.md and per-clip CSVs.
        #[arg(long, env = "TAD_REPORT")]
        report: PathBuf,
    },
    /// Score a single clip.
    Score {
        #[arg(long, env = "TAD_CKPT")]
        ckpt: PathBuf,
        #[arg(long, env = "TAD_CLIP")]
        clip: PathBuf,
        #[arg(long, env = "TAD_CSV")]
        csv: PathBuf,
        /// Directory for a score-curve PNG.
        #[arg(long, env = "TAD_PLOT")]
        plot: Option<PathBuf>,
    },
    /// Generate synthetic clips.
    Synth {
        /// TOML dataset description (scene sampler and per-kind counts).
        #[arg(long, env = "TAD_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, env = "TAD_OUT")]
        out: PathBuf,
        /// Number of normal clips.
        #[arg(long, env = "TAD_CLIPS")]
        clips: Option<usize>,
        #[arg(long, env = "TAD_EGO_JOLT")]
        ego_jolt: Option<usize>,
        #[arg(long, env = "TAD_OBJECT_SWERVE")]
        object_swerve: Option<usize>,
        #[arg(long, env = "TAD_OBJECT_STOP")]
        object_stop: Option<usize>,
        #[arg(long, env = "TAD_SEED")]
        seed: Option<u64>,
    },
    /// Train and evaluate every cell of a parameter grid.
    Ablate {
        /// TOML plan with `[base]`, `[grid]` and optional synthetic
        /// `[train]` / `[test]` dataset tables.
        #[arg(long, env = "TAD_GRID")]
        grid: PathBuf,
        #[arg(long, env = "TAD_OUT")]
        out: PathBuf,
        /// Use these clips, split by seeded shuffle, instead of synthetic
        /// data.
        #[arg(long, env = "TAD_DATA")]
        data: Option<PathBuf>,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct AblationPlan {
    base: Option<toml::Table>,
    grid: AblationGrid,
    train: Option<DatasetSpec>,
    test: Option<DatasetSpec>,
    test_fraction: Option<f64>,
    split_seed: u64,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(TadError::MissingFile(path.to_path_buf()).into());
    }
    toml::from_str(&fs::read_to_string(path)?).map_err(|source| CliError::Toml {
        path: path.to_path_buf(),
        source,
    })
}

fn env_vars() -> Vec<(String, String)> {
    std::env::vars().collect()
}

fn load_config(path: Option<&Path>, full_scale: bool) -> Result<TrainConfig> {
    let base = if full_scale { TrainConfig::full_scale() } else { TrainConfig::desk() };
    let cfg = match path {
        Some(p) => {
            let table: toml::Table = read_toml(p)?;
            merge(&base, table)?
        }
        None => base,
    };
    let cfg = cfg.apply_env_overrides(env_vars())?;
    cfg.validate()?;
    Ok(cfg)
}

/// Fields present in `table` replace those of `base`.
fn merge(base: &TrainConfig, table: toml::Table) -> Result<TrainConfig> {
    let mut full = toml::Table::try_from(base).map_err(|e| TadError::Config(e.to_string()))?;
    full.extend(table);
    toml::Value::Table(full)
        .try_into()
        .map_err(|e: toml::de::Error| TadError::Config(e.to_string()).into())
}

fn write_evaluation(eval: &Evaluation, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("scores"))?;
    for s in &eval.series {
        s.save_csv(dir.join("scores").join(format!("{}.csv", s.clip_id)))?;
    }
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(eval)?)?;
    let mut md = String::new();
    match eval.auc {
        Some(a) => md.push_str(&format!("overall AUC: {a:.4}\n\n")),
        None => md.push_str("overall AUC: undefined (single-class labels)\n\n"),
    }
    md.push_str("| category | clips | AUC |\n|---|---|---|\n");
    for r in &eval.per_class.rows {
        md.push_str(&format!("| {} | {} | {:.4} |\n", r.tag, r.clips, r.auc));
    }
    if let Some(m) = eval.per_class.mean {
        md.push_str(&format!("| mean | | {m:.4} |\n"));
    }
    fs::write(dir.join("auc.md"), md)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            full_scale,
            data,
            out,
            resume: from,
            use_precursors,
        } => {
            let cfg = load_config(config.as_deref(), full_scale)?;
            let mut clips = load_clips(&data)?;
            if use_precursors {
                clips = clips.iter().map(Clip::precursor).collect();
            }
            let ckpt = match from {
                Some(path) => resume(Checkpoint::load(path)?, &clips, cfg.epochs)?,
                None => train(&cfg, &clips)?,
            };
            ckpt.save(&out)?;
            if let Some(last) = ckpt.history.last() {
                println!("epoch {} l_total {:.6}", ckpt.epoch, last.l_total);
            }
        }
        Command::Eval { ckpt, data, report } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let model = ckpt.model()?;
            let clips = load_clips(&data)?;
            let eval = evaluate(&model, &ckpt.config.scoring, &clips)?;
            write_evaluation(&eval, &report)?;
            match eval.auc {
                Some(a) => println!("AUC {a:.4} over {} clips", clips.len()),
                None => println!("AUC undefined over {} clips", clips.len()),
            }
        }
        Command::Score {
            ckpt,
            clip,
            csv,
            plot,
        } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let model = ckpt.model()?;
            let clip = load_clip(&clip)?;
            let eval = evaluate(&model, &ckpt.config.scoring, std::slice::from_ref(&clip))?;
            let series = &eval.series[0];
            if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            series.save_csv(&csv)?;
            if let Some(dir) = plot {
                fs::create_dir_all(&dir)?;
                save_score_curve(series, dir.join(format!("{}.png", series.clip_id)))?;
            }
        }
        Command::Synth {
            config,
            out,
            clips,
            ego_jolt,
            object_swerve,
            object_stop,
            seed,
        } => {
            let mut spec: DatasetSpec = match config {
                Some(p) => read_toml(&p)?,
                None => DatasetSpec::default(),
            };
            spec.normal = clips.unwrap_or(spec.normal);
            spec.ego_jolt = ego_jolt.unwrap_or(spec.ego_jolt);
            spec.object_swerve = object_swerve.unwrap_or(spec.object_swerve);
            spec.object_stop = object_stop.unwrap_or(spec.object_stop);
            spec.seed = seed.unwrap_or(spec.seed);
            let generated = spec.generate()?;
            for c in &generated {
                save_clip(c, out.join(&c.id))?;
            }
            println!("wrote {} clips to {}", generated.len(), out.display());
        }
        Command::Ablate { grid, out, data } => {
            let plan: AblationPlan = read_toml(&grid)?;
            let base = merge(&TrainConfig::desk(), plan.base.clone().unwrap_or_default())?
                .apply_env_overrides(env_vars())?;
            let (train_clips, test_clips) = match (data, &plan.train, &plan.test) {
                (Some(dir), _, _) => {
                    let all = load_clips(dir)?;
                    let (tr, te) = split_indices(all.len(), plan.test_fraction.unwrap_or(0.3), plan.split_seed);
                    let train_clips: Vec<Clip> = tr.iter().map(|&i| &all[i]).filter(|c| c.is_all_normal()).cloned().collect();
                    let test_clips: Vec<Clip> = te.iter().map(|&i| all[i].clone()).collect();
                    (train_clips, test_clips)
                }
                (None, Some(tr), Some(te)) => (tr.generate()?, te.generate()?),
                _ => {
                    return Err(CliError::Usage(
                        "ablate needs --data or both [train] and [test] tables in the grid file".into(),
                    ))
                }
            };
            let report = run_ablation(&base, &plan.grid, &train_clips, &test_clips)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
            let md = report.to_markdown();
            fs::write(out.join("report.md"), &md)?;
            print!("{md}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
