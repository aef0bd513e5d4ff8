//! Run configuration: a line-oriented `key = value` file with `[section]`
//! headers and `#` comments.
//!
//! ```text
//! [run]       task, demo_count, demo_seed_base, single_stage, finetune
//! [paths]     demos, checkpoint, metrics, plot
//! [policy]    n_points, channel_plan, condensed_mode, d_k, bias_buckets,
//!             bias_max_dist, head_hidden, attention
//! [train]     learning_rate, batch_size, sim_steps, max_train_steps,
//!             eval_interval, eval_episodes, eval_seed_base, seed,
//!             beta1, beta2, epsilon
//! [schedule]  batch_scale, sim_scale
//! ```
//!
//! Omitted keys keep their defaults. Unknown sections or keys, duplicates,
//! unparsable values and out-of-range values are errors naming the line.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::env::TaskKind;
use crate::policy::PolicyConfig;
use crate::train::{StageSchedule, TrainConfig};

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub demos: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub plot: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            demos: "demos.gp2d".into(),
            checkpoint: "best.ckpt".into(),
            metrics: "metrics.csv".into(),
            plot: "curve.svg".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskKind,
    pub demo_count: usize,
    pub demo_seed_base: u64,
    pub single_stage: bool,
    pub finetune: bool,
    pub paths: Paths,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub schedule: StageSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::ToyFill,
            demo_count: 200,
            demo_seed_base: 0,
            single_stage: false,
            finetune: true,
            paths: Paths::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            schedule: StageSchedule::default(),
        }
    }
}

const SECTIONS: [&str; 5] = ["run", "paths", "policy", "train", "schedule"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}

/// Integer that must be at least `min`; parsed signed so `-1` reports a
/// range error rather than a type error.
fn at_least(key: &str, value: &str, min: i128) -> Result<i128, String> {
    let v: i128 = parse(key, value)?;
    if v < min {
        return Err(format!("{key} must be >= {min}, got {v}"));
    }
    Ok(v)
}

fn positive_f64(key: &str, value: &str) -> Result<f64, String> {
    let v: f64 = parse(key, value)?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(format!("{key} must be a positive number, got {value}"));
    }
    Ok(v)
}

fn unit_open(key: &str, value: &str) -> Result<f64, String> {
    let v: f64 = parse(key, value)?;
    if !(0.0..1.0).contains(&v) {
        return Err(format!("{key} must lie in [0, 1), got {value}"));
    }
    Ok(v)
}

fn scale(key: &str, value: &str) -> Result<f64, String> {
    let v: f64 = parse(key, value)?;
    if !(v > 0.0 && v <= 1.0) {
        return Err(format!("{key} must lie in (0, 1], got {value}"));
    }
    Ok(v)
}

fn bool_value(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

impl RunConfig {
    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        let unknown = || Err(format!("unknown key {key:?} in [{section}]"));
        match section {
            "run" => match key {
                "task" => self.task = value.parse()?,
                "demo_count" => self.demo_count = at_least(key, value, 0)? as usize,
                "demo_seed_base" => self.demo_seed_base = at_least(key, value, 0)? as u64,
                "single_stage" => self.single_stage = bool_value(key, value)?,
                "finetune" => self.finetune = bool_value(key, value)?,
                _ => return unknown(),
            },
            "paths" => {
                let p = PathBuf::from(value);
                match key {
                    "demos" => self.paths.demos = p,
                    "checkpoint" => self.paths.checkpoint = p,
                    "metrics" => self.paths.metrics = p,
                    "plot" => self.paths.plot = p,
                    _ => return unknown(),
                }
            }
            "policy" => match key {
                "robot_state_dim" | "action_dim" => {
                    return Err(format!("{key} is fixed by the environment"))
                }
                "attention" => self.policy.attention = bool_value(key, value)?,
                "n_points" | "d_k" | "bias_buckets" | "head_hidden" => {
                    at_least(key, value, 1)?;
                    self.policy.set(key, value)?;
                }
                "bias_max_dist" => {
                    positive_f64(key, value)?;
                    self.policy.set(key, value)?;
                }
                _ => {
                    if !self.policy.set(key, value)? {
                        return unknown();
                    }
                }
            },
            "train" => {
                let t = &mut self.train;
                match key {
                    "learning_rate" => t.learning_rate = positive_f64(key, value)?,
                    "batch_size" => t.batch_size = at_least(key, value, 1)? as usize,
                    "sim_steps" => t.sim_steps = at_least(key, value, 1)? as usize,
                    "max_train_steps" => t.max_train_steps = at_least(key, value, 1)? as u64,
                    "eval_interval" => t.eval_interval = at_least(key, value, 1)? as u64,
                    "eval_episodes" => t.eval_episodes = at_least(key, value, 1)? as usize,
                    "eval_seed_base" => t.eval_seed_base = at_least(key, value, 0)? as u64,
                    "seed" => t.seed = at_least(key, value, 0)? as u64,
                    "beta1" => t.beta1 = unit_open(key, value)?,
                    "beta2" => t.beta2 = unit_open(key, value)?,
                    "epsilon" => t.epsilon = positive_f64(key, value)?,
                    _ => return unknown(),
                }
            }
            "schedule" => match key {
                "batch_scale" => self.schedule.batch_scale = scale(key, value)?,
                "sim_scale" => self.schedule.sim_scale = scale(key, value)?,
                _ => return unknown(),
            },
            _ => unreachable!("sections are checked on their header line"),
        }
        Ok(())
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut section: Option<String> = None;
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut last_policy_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| ConfigError { line, message };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(format!("malformed section header {content:?}")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(err(format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got {content:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let sec = section
            .clone()
            .ok_or_else(|| err(format!("{key} appears before any [section] header")))?;
        if !seen.insert((sec.clone(), key.to_string())) {
            return Err(err(format!("duplicate key {key:?} in [{sec}]")));
        }
        cfg.set(&sec, key, value).map_err(err)?;
        if sec == "policy" {
            last_policy_line = line;
        }
    }
    cfg.policy.validate().map_err(|e| ConfigError {
        line: last_policy_line,
        message: e.to_string(),
    })?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        line: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.learning_rate, 3e-4);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.train.sim_steps, 500);
        assert_eq!(cfg.policy.n_points, 1200);
        assert_eq!((cfg.schedule.batch_scale, cfg.schedule.sim_scale), (0.8, 0.9));
        assert_eq!(cfg.train.eval_episodes, 100);
    }

    #[test]
    fn values_are_applied() {
        let text = "# desk run\n[run]\ntask = ToyPour\n\n[policy]\nn_points = 64\nchannel_plan = 6,8,16,32\nattention = false\n[train]\nbatch_size = 32 # small\n";
        let cfg = parse_config_str(text).unwrap();
        assert_eq!(cfg.task, TaskKind::ToyPour);
        assert_eq!(cfg.policy.n_points, 64);
        assert_eq!(cfg.policy.channel_plan, [6, 8, 16, 32]);
        assert!(!cfg.policy.attention);
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn negative_batch_is_a_range_error_at_its_line() {
        let err = parse_config_str("[train]\n\nbatch_size = -1\n").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(err.message.contains("batch_size"), "{err}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = parse_config_str("[train]\nseed = 1\nseed = 2\n").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(err.message.contains("duplicate"));
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert_eq!(parse_config_str("[train]\nbogus = 1\n").unwrap_err().line, 2);
        assert_eq!(parse_config_str("[nope]\n").unwrap_err().line, 1);
        assert_eq!(parse_config_str("seed = 1\n").unwrap_err().line, 1);
        assert_eq!(parse_config_str("[run]\ntask = Hang\n").unwrap_err().line, 2);
        assert_eq!(
            parse_config_str("[train]\nlearning_rate = fast\n").unwrap_err().line,
            2
        );
    }

    #[test]
    fn invalid_policy_is_reported() {
        let err = parse_config_str("[policy]\nchannel_plan = 5,8,8,8\n").unwrap_err();
        assert_eq!(err.line, 2);
    }
}
