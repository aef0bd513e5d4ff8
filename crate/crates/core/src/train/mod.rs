//! Behaviour cloning: MSE regression of policy actions onto expert actions,
//! optimised with Adam, with periodic closed-loop evaluation and the
//! two-stage fine-tuning schedule.

mod adam;
mod dataset;
mod metrics;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use dataset::{Batch, DemoDataset};
pub use metrics::{
    metrics_to_csv, parse_metrics, read_metrics, timing_path, MetricsLog, MetricsRow,
    METRICS_HEADER,
};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{GradMap, Tape};
use crate::env::{derive_seed, rollout, ControlError, Controller, EnvError, EnvState, TaskSpec};
use crate::observation::PointCloudObservation;
use crate::policy::{forward_on_tape, Checkpoint, Policy, PolicyError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error("the demonstration dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step} (batch indices {indices:?}): {detail}")]
    NonFiniteLoss {
        step: u64,
        indices: Vec<usize>,
        detail: String,
    },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Physics substeps per policy action during evaluation.
    pub sim_steps: usize,
    pub max_train_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// First evaluation seed; demonstrations use seeds below it.
    pub eval_seed_base: u64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 256,
            sim_steps: 500,
            max_train_steps: 2000,
            eval_interval: 500,
            eval_episodes: 100,
            eval_seed_base: 1_000_000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::Config(format!("{what} must be positive")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if self.sim_steps == 0 {
            return bad("sim_steps");
        }
        if self.max_train_steps == 0 {
            return bad("max_train_steps");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSchedule {
    pub batch_scale: f64,
    pub sim_scale: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            batch_scale: 0.8,
            sim_scale: 0.9,
        }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, s) in [("batch_scale", self.batch_scale), ("sim_scale", self.sim_scale)] {
            if !(s > 0.0 && s <= 1.0) {
                return Err(TrainError::Config(format!("{name} must lie in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Nearest integer, halves away from zero, at least 1.
fn scaled(value: usize, scale: f64, what: &str) -> usize {
    let r = (value as f64 * scale).round();
    if r < 1.0 {
        log::warn!("{what} {value} x {scale} rounds to {r}; clamped to 1");
        1
    } else {
        r as usize
    }
}

/// Stage-2 config: batch size and substeps scaled, everything else kept.
pub fn finetune_schedule(stage1: &TrainConfig, sched: &StageSchedule) -> TrainConfig {
    TrainConfig {
        batch_size: scaled(stage1.batch_size, sched.batch_scale, "batch_size"),
        sim_steps: scaled(stage1.sim_steps, sched.sim_scale, "sim_steps"),
        ..stage1.clone()
    }
}

/// Mean over batch and action dimensions of the squared error.
pub fn bc_loss(predicted: &Tensor, target: &Tensor) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let p = tape.constant(predicted.clone());
    let t = tape.constant(target.clone());
    let loss = tape.mse(p, t)?;
    Ok(tape.value(loss).item())
}

/// Samples per tape during a training step. Chunk gradients are summed in
/// chunk order, so the result does not depend on thread scheduling.
const CHUNK: usize = 8;

/// Loss and gradient of the mean-squared BC loss over one batch.
pub fn batch_gradient(policy: &Policy, batch: &Batch<'_>) -> Result<(f64, GradMap), TrainError> {
    let b = batch.observations.len();
    let a = policy.config.action_dim;
    let parts: Vec<(f64, GradMap)> = batch
        .observations
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, obs)| {
            let mut tape = Tape::new();
            let bp = policy.params.bind(&mut tape);
            let mut actions = Vec::with_capacity(obs.len());
            for o in obs {
                actions.push(forward_on_tape(&mut tape, o, &bp, &policy.config)?.action);
            }
            let pred = tape.concat_rows(&actions)?;
            let start = c * CHUNK;
            let rows = obs.len();
            let target = Tensor::new(
                vec![rows, a],
                batch.actions.data()[start * a..(start + rows) * a].to_vec(),
            )?;
            let target = tape.constant(target);
            let loss = tape.mse(pred, target)?;
            let loss = tape.scale(loss, rows as f64 / b as f64)?;
            let value = tape.value(loss).item();
            Ok((value, tape.backward(loss)?))
        })
        .collect::<Result<_, TrainError>>()?;
    let mut total = 0.0;
    let mut grads = GradMap::default();
    for (l, g) in &parts {
        total += l;
        grads.accumulate(g);
    }
    Ok((total, grads))
}

/// Drives a [`Policy`] from observations.
pub struct PolicyController<'a> {
    pub policy: &'a Policy,
}

impl Controller for PolicyController<'_> {
    fn act(
        &mut self,
        _state: &EnvState,
        obs: Option<&PointCloudObservation>,
    ) -> Result<Vec<f64>, ControlError> {
        let obs = obs.ok_or("policy controller needs an observation")?;
        Ok(self.policy.forward(obs)?.into_data())
    }
}

/// Success rate of controllers built by `make` over seeds
/// `seed_base..seed_base + episodes`. Episodes run in parallel; the count
/// does not depend on completion order.
pub fn evaluate_with<C, F>(
    make: F,
    task: &TaskSpec,
    episodes: usize,
    seed_base: u64,
    sim_steps: usize,
    n_points: usize,
) -> Result<f64, TrainError>
where
    C: Controller,
    F: Fn() -> C + Sync,
{
    if episodes == 0 {
        return Err(TrainError::Config("evaluation needs at least one episode".into()));
    }
    let wins = (0..episodes as u64)
        .into_par_iter()
        .map(|k| {
            let mut c = make();
            rollout(task, seed_base + k, &mut c, sim_steps, n_points, false)
                .map(|ep| ep.result.success as usize)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum::<usize>();
    Ok(wins as f64 / episodes as f64)
}

pub fn evaluate(
    policy: &Policy,
    task: &TaskSpec,
    episodes: usize,
    seed_base: u64,
    sim_steps: usize,
) -> Result<f64, TrainError> {
    evaluate_with(
        || PolicyController { policy },
        task,
        episodes,
        seed_base,
        sim_steps,
        policy.config.n_points,
    )
}

/// Called after every evaluation with the new row and, when the evaluated
/// parameters became the stage's best, the checkpoint.
pub type EvalHook<'a> = dyn FnMut(&MetricsRow, Option<&Checkpoint>) -> Result<(), TrainError> + 'a;

#[derive(Debug, Clone)]
pub struct StageOutcome {
    /// Parameters the stage started from.
    pub start: crate::nn::Params,
    pub best: Checkpoint,
    pub rows: Vec<MetricsRow>,
    pub last: Policy,
}

/// One training stage. Steps are numbered globally from `step_offset + 1`.
/// Evaluates every `eval_interval` steps and after the final step.
pub fn train_stage(
    cfg: &TrainConfig,
    stage: u32,
    step_offset: u64,
    dataset: &DemoDataset,
    task: &TaskSpec,
    init: Policy,
    hook: &mut EvalHook<'_>,
) -> Result<StageOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, stage as u64]));
    let start = init.params.clone();
    let mut policy = init;
    let mut adam = AdamState::new(&policy.params);
    let adam_cfg = cfg.adam();
    let mut rows = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let (mut loss_acc, mut norm_acc, mut since) = (0.0, 0.0, 0u64);

    for k in 1..=cfg.max_train_steps {
        let step = step_offset + k;
        let batch = dataset.sample_batch(cfg.batch_size, &mut rng)?;
        let diag = |detail: String| TrainError::NonFiniteLoss {
            step,
            indices: batch.indices.clone(),
            detail,
        };
        let (loss, grads) = match batch_gradient(&policy, &batch) {
            Ok(r) => r,
            Err(TrainError::Tensor(e @ TensorError::NonFinite { .. })) => {
                return Err(diag(e.to_string()))
            }
            Err(e) => return Err(e),
        };
        let norm = grads.global_norm();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(diag(format!("loss {loss}, gradient norm {norm}")));
        }
        adam_step(&mut policy.params, &grads, &mut adam, &adam_cfg)?;
        loss_acc += loss;
        norm_acc += norm;
        since += 1;

        if k % cfg.eval_interval == 0 || k == cfg.max_train_steps {
            let success =
                evaluate(&policy, task, cfg.eval_episodes, cfg.eval_seed_base, cfg.sim_steps)?;
            let row = MetricsRow {
                stage,
                step,
                loss: loss_acc / since as f64,
                success,
                wall_clock: started.elapsed().as_secs_f64(),
                batch_size: cfg.batch_size,
                sim_steps: cfg.sim_steps,
                grad_norm: norm_acc / since as f64,
            };
            log::info!(
                "stage {stage} step {step}: loss {:.3e} success {success:.3}",
                row.loss
            );
            (loss_acc, norm_acc, since) = (0.0, 0.0, 0);
            let improved = best.as_ref().is_none_or(|b| success > b.best_success);
            if improved {
                best = Some(Checkpoint {
                    config: policy.config.clone(),
                    params: policy.params.clone(),
                    optimizer: Some(adam.snapshot()),
                    train_step: step,
                    best_success: success,
                });
            }
            hook(&row, if improved { best.as_ref() } else { None })?;
            rows.push(row);
        }
    }
    Ok(StageOutcome {
        start,
        best: best.expect("the final step always evaluates"),
        rows,
        last: policy,
    })
}

#[derive(Debug, Clone)]
pub struct TwoStageOutcome {
    /// Highest-success checkpoint over both stages, earlier on ties.
    pub best: Checkpoint,
    pub stage1: StageOutcome,
    pub stage2: StageOutcome,
}

impl TwoStageOutcome {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.stage1.rows.iter().chain(&self.stage2.rows).cloned().collect()
    }
}

/// Stage 1 with `cfg`; stage 2 restarts from the stage-1 best parameters
/// with [`finetune_schedule`] applied and a fresh optimizer.
pub fn run_two_stage(
    cfg: &TrainConfig,
    sched: &StageSchedule,
    dataset: &DemoDataset,
    task: &TaskSpec,
    init: Policy,
    hook: &mut EvalHook<'_>,
) -> Result<TwoStageOutcome, TrainError> {
    sched.validate()?;
    let stage1 = train_stage(cfg, 1, 0, dataset, task, init, hook)?;
    let cfg2 = finetune_schedule(cfg, sched);
    let reloaded = Policy::from_parts(stage1.best.config.clone(), stage1.best.params.clone())?;
    let mut best_so_far = stage1.best.best_success;
    let mut gated = |row: &MetricsRow, ckpt: Option<&Checkpoint>| {
        // Only checkpoints that beat stage 1 are new overall bests.
        let ckpt = ckpt.filter(|c| c.best_success > best_so_far);
        if let Some(c) = ckpt {
            best_so_far = c.best_success;
        }
        hook(row, ckpt)
    };
    let stage2 = train_stage(&cfg2, 2, cfg.max_train_steps, dataset, task, reloaded, &mut gated)?;
    let best = if stage2.best.best_success > stage1.best.best_success {
        stage2.best.clone()
    } else {
        stage1.best.clone()
    };
    Ok(TwoStageOutcome {
        best,
        stage1,
        stage2,
    })
}

#[cfg(test)]
mod tests;
