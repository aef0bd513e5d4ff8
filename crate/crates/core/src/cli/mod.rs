//! Commands behind the `gp2e` binary. Each returns the lines it would print
//! on success; the binary maps errors to a nonzero exit.

mod config;
pub mod plot;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{parse_config, parse_config_str, ConfigError, Paths, RunConfig};

use crate::env::{generate_demos, read_demos, write_demos, EnvError, ScriptedExpert, TaskSpec};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::policy::{load_checkpoint, save_checkpoint, CheckpointError, Dtype, PolicyError};
use crate::train::{
    evaluate, evaluate_with, read_metrics, run_two_stage, train_stage, DemoDataset, MetricsLog,
    MetricsRow, StageSchedule, TrainError,
};
use crate::{Checkpoint, Policy};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("env: {0}")]
    Env(#[from] EnvError),
    #[error("train: {0}")]
    Train(#[from] TrainError),
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error("path: {0}")]
    Path(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("gradcheck failed: {0}")]
    Gradcheck(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Overrides from command-line flags, applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub single_stage: bool,
    pub no_attention: bool,
    pub no_finetune: bool,
}

/// Reads the config (defaults when `path` is `None`), resolves relative
/// paths against the config file's directory and applies `ov`.
pub fn load_run_config(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let mut cfg = parse_config(p)?;
            let base = p.parent().unwrap_or(Path::new(""));
            for slot in [
                &mut cfg.paths.demos,
                &mut cfg.paths.checkpoint,
                &mut cfg.paths.metrics,
                &mut cfg.paths.plot,
            ] {
                if slot.is_relative() {
                    *slot = base.join(&*slot);
                }
            }
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = ov.seed {
        cfg.train.seed = seed;
        cfg.demo_seed_base = seed;
    }
    if let Some(c) = &ov.checkpoint {
        cfg.paths.checkpoint = c.clone();
    }
    cfg.single_stage |= ov.single_stage;
    cfg.finetune &= !ov.no_finetune;
    cfg.policy.attention &= !ov.no_attention;
    Ok(cfg)
}

fn need_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Path(format!("{} does not exist", path.display())))
    }
}

fn need_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() && !d.is_dir() => Err(CliError::Path(format!(
            "directory {} does not exist",
            d.display()
        ))),
        _ => Ok(()),
    }
}

pub fn cmd_gen_demos(cfg: &RunConfig) -> Result<Vec<String>> {
    need_parent(&cfg.paths.demos)?;
    let spec = TaskSpec::new(cfg.task);
    let file = generate_demos(
        &spec,
        cfg.demo_count,
        cfg.demo_seed_base,
        cfg.policy.n_points,
        cfg.train.sim_steps,
    )?;
    write_demos(&cfg.paths.demos, &file)?;
    Ok(vec![format!(
        "wrote {} episodes to {}",
        file.episodes.len(),
        cfg.paths.demos.display()
    )])
}

fn load_dataset(cfg: &RunConfig) -> Result<DemoDataset> {
    need_file(&cfg.paths.demos)?;
    let file = read_demos(&cfg.paths.demos)?;
    if file.task != cfg.task {
        return Err(CliError::Path(format!(
            "{} holds {} demos, config asks for {}",
            cfg.paths.demos.display(),
            file.task,
            cfg.task
        )));
    }
    if file.n_points != cfg.policy.n_points {
        return Err(CliError::Path(format!(
            "{} was recorded with n_points {}, policy uses {}",
            cfg.paths.demos.display(),
            file.n_points,
            cfg.policy.n_points
        )));
    }
    Ok(DemoDataset::from_file(file))
}

/// Trains per `cfg`, returning every metrics row alongside the printed
/// lines. The best checkpoint is rewritten whenever it improves.
pub fn train_run(cfg: &RunConfig) -> Result<(Vec<MetricsRow>, Checkpoint)> {
    need_parent(&cfg.paths.checkpoint)?;
    need_parent(&cfg.paths.metrics)?;
    let dataset = load_dataset(cfg)?;
    let spec = TaskSpec::new(cfg.task);
    let init = Policy::new(cfg.policy.clone(), cfg.train.seed)?;
    let mut log = MetricsLog::create(&cfg.paths.metrics)?;
    let ckpt_path = cfg.paths.checkpoint.clone();
    let mut hook = |row: &MetricsRow, ckpt: Option<&Checkpoint>| -> std::result::Result<(), TrainError> {
        log.append(row.clone())?;
        if let Some(c) = ckpt {
            save_checkpoint(&ckpt_path, c, Dtype::F64)
                .map_err(|e| TrainError::Config(format!("{}: {e}", ckpt_path.display())))?;
        }
        Ok(())
    };
    let (rows, best) = if cfg.single_stage {
        let out = train_stage(&cfg.train, 1, 0, &dataset, &spec, init, &mut hook)?;
        (out.rows, out.best)
    } else {
        let sched = if cfg.finetune {
            cfg.schedule
        } else {
            StageSchedule {
                batch_scale: 1.0,
                sim_scale: 1.0,
            }
        };
        let out = run_two_stage(&cfg.train, &sched, &dataset, &spec, init, &mut hook)?;
        (out.rows(), out.best)
    };
    Ok((rows, best))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<String>> {
    let (rows, best) = train_run(cfg)?;
    Ok(vec![
        plot::summary_line(&rows),
        format!(
            "best success rate {:.3}; checkpoint {}; metrics {}",
            best.best_success,
            cfg.paths.checkpoint.display(),
            cfg.paths.metrics.display()
        ),
    ])
}

/// Success rate of the checkpoint at `cfg.paths.checkpoint`, or of the
/// scripted expert when `expert` is set.
pub fn eval_rate(cfg: &RunConfig, expert: bool) -> Result<f64> {
    let spec = TaskSpec::new(cfg.task);
    let t = &cfg.train;
    if expert {
        let rate = evaluate_with(
            || ScriptedExpert { spec: spec.clone() },
            &spec,
            t.eval_episodes,
            t.eval_seed_base,
            t.sim_steps,
            cfg.policy.n_points,
        )?;
        return Ok(rate);
    }
    let path = &cfg.paths.checkpoint;
    let ckpt = load_checkpoint(path).map_err(|source| CliError::Checkpoint {
        path: path.clone(),
        source,
    })?;
    let policy = Policy::from_parts(ckpt.config, ckpt.params)?;
    Ok(evaluate(&policy, &spec, t.eval_episodes, t.eval_seed_base, t.sim_steps)?)
}

pub fn cmd_eval(cfg: &RunConfig, expert: bool) -> Result<Vec<String>> {
    let rate = eval_rate(cfg, expert)?;
    Ok(vec![format!("{rate:.3}")])
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Vec<String>> {
    let opts = GradcheckOptions {
        seed: cfg.train.seed,
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&cfg.policy, &opts)?;
    if !report.passed() {
        let names: Vec<String> = report
            .offenders()
            .iter()
            .map(|l| format!("{} ({:.3e})", l.name, l.max_rel_error))
            .collect();
        return Err(CliError::Gradcheck(names.join(", ")));
    }
    Ok(report.to_string().lines().map(str::to_string).collect())
}

pub fn cmd_plot(metrics_path: &Path, out_path: &Path) -> Result<Vec<String>> {
    need_file(metrics_path)?;
    need_parent(out_path)?;
    let rows = read_metrics(metrics_path)?;
    crate::fsio::write_atomic(out_path, plot::render_svg(&rows).as_bytes())?;
    Ok(vec![plot::summary_line(&rows)])
}
