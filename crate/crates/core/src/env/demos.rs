//! Demonstration generation and the `GP2D` file format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "GP2D" | version u32 | task u32 | episodes u32
//! n_points u32 | robot_state_dim u32 | action_dim u32
//! per episode: seed u64 | steps u32 | success u8
//! per episode, per step: points f32[n_points*6] | robot_state f32[rsd] | action f32[ad]
//! ```
//!
//! The header and manifest fix every extent, so the reader checks the file
//! length before touching payloads.

use std::path::Path;

use rayon::prelude::*;

use crate::fsio::write_atomic;
use crate::observation::PointCloudObservation;
use crate::tensor::Tensor;

use super::expert::ScriptedExpert;
use super::rollout::rollout;
use super::{EnvError, TaskKind, TaskSpec};

pub const DEMO_MAGIC: &[u8; 4] = b"GP2D";
pub const DEMO_VERSION: u32 = 1;
const ROBOT_STATE_DIM: usize = 7;
const ACTION_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DemoStep {
    pub observation: PointCloudObservation,
    pub action: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub task: TaskKind,
    pub seed: u64,
    pub success: bool,
    pub steps: Vec<DemoStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoFile {
    pub task: TaskKind,
    pub n_points: usize,
    pub episodes: Vec<Demonstration>,
}

/// Rolls the scripted expert out on `seed_base, seed_base + 1, …` and keeps
/// successful episodes until `count` are collected. Gives up after
/// `5 * count` seeds.
pub fn generate_demos(
    spec: &TaskSpec,
    count: usize,
    seed_base: u64,
    n_points: usize,
    substeps: usize,
) -> Result<DemoFile, EnvError> {
    let budget = 5 * count;
    let mut episodes = Vec::with_capacity(count);
    let mut tried = 0;
    while episodes.len() < count && tried < budget {
        let batch = (count - episodes.len()).min(budget - tried);
        let seeds: Vec<u64> = (tried..tried + batch).map(|k| seed_base + k as u64).collect();
        let rolled: Vec<_> = seeds
            .par_iter()
            .map(|&seed| {
                let mut expert = ScriptedExpert { spec: spec.clone() };
                rollout(spec, seed, &mut expert, substeps, n_points, true)
            })
            .collect::<Result<_, _>>()?;
        tried += batch;
        for ep in rolled {
            if ep.result.success && episodes.len() < count {
                episodes.push(Demonstration {
                    task: spec.task,
                    seed: ep.seed,
                    success: true,
                    steps: ep.steps,
                });
            }
        }
    }
    if episodes.len() < count {
        return Err(EnvError::NotEnoughDemos {
            wanted: count,
            found: episodes.len(),
            tried,
        });
    }
    Ok(DemoFile {
        task: spec.task,
        n_points,
        episodes,
    })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_demos(file: &DemoFile) -> Result<Vec<u8>, EnvError> {
    let mut out = Vec::new();
    out.extend_from_slice(DEMO_MAGIC);
    put_u32(&mut out, DEMO_VERSION);
    put_u32(&mut out, file.task.id());
    put_u32(&mut out, file.episodes.len() as u32);
    put_u32(&mut out, file.n_points as u32);
    put_u32(&mut out, ROBOT_STATE_DIM as u32);
    put_u32(&mut out, ACTION_DIM as u32);
    for ep in &file.episodes {
        out.extend_from_slice(&ep.seed.to_le_bytes());
        put_u32(&mut out, ep.steps.len() as u32);
        out.push(ep.success as u8);
    }
    for ep in &file.episodes {
        for (k, step) in ep.steps.iter().enumerate() {
            let obs = &step.observation;
            if obs.points.shape() != [file.n_points, 6]
                || obs.robot_state.len() != ROBOT_STATE_DIM
                || step.action.len() != ACTION_DIM
            {
                return Err(EnvError::Format(format!(
                    "episode seed {} step {k} does not match the header extents",
                    ep.seed
                )));
            }
            put_f32s(&mut out, obs.points.data());
            put_f32s(&mut out, obs.robot_state.data());
            put_f32s(&mut out, &step.action);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], EnvError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| EnvError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EnvError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, EnvError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, EnvError> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

pub fn decode_demos(bytes: &[u8]) -> Result<DemoFile, EnvError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != DEMO_MAGIC {
        return Err(EnvError::Format("bad magic, not a GP2D file".into()));
    }
    let version = r.u32()?;
    if version != DEMO_VERSION {
        return Err(EnvError::Format(format!(
            "unsupported version {version}, expected {DEMO_VERSION}"
        )));
    }
    let task_id = r.u32()?;
    let task = TaskKind::from_id(task_id)
        .ok_or_else(|| EnvError::Format(format!("unknown task id {task_id}")))?;
    let count = r.u32()? as usize;
    let n_points = r.u32()? as usize;
    let rsd = r.u32()? as usize;
    let ad = r.u32()? as usize;
    if rsd != ROBOT_STATE_DIM || ad != ACTION_DIM {
        return Err(EnvError::Format(format!(
            "extents robot_state={rsd} action={ad}, expected {ROBOT_STATE_DIM} and {ACTION_DIM}"
        )));
    }
    let mut manifest = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let seed = r.u64()?;
        let steps = r.u32()? as usize;
        let success = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(EnvError::Format(format!("bad success flag {b}"))),
        };
        manifest.push((seed, steps, success));
    }
    let per_step = 4 * (n_points * 6 + rsd + ad);
    let payload: usize = manifest.iter().map(|m| m.1 * per_step).sum();
    if bytes.len() - r.pos != payload {
        return Err(EnvError::Format(format!(
            "payload is {} bytes, manifest describes {payload}",
            bytes.len() - r.pos
        )));
    }
    let mut episodes = Vec::with_capacity(count);
    for (seed, steps, success) in manifest {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let points = Tensor::new(vec![n_points, 6], r.f32s(n_points * 6)?)
                .map_err(|e| EnvError::Format(e.to_string()))?;
            let robot_state =
                Tensor::vector(r.f32s(rsd)?).map_err(|e| EnvError::Format(e.to_string()))?;
            let action = r.f32s(ad)?;
            out.push(DemoStep {
                observation: PointCloudObservation {
                    points,
                    robot_state,
                },
                action,
            });
        }
        episodes.push(Demonstration {
            task,
            seed,
            success,
            steps: out,
        });
    }
    Ok(DemoFile {
        task,
        n_points,
        episodes,
    })
}

pub fn write_demos(path: &Path, file: &DemoFile) -> Result<(), EnvError> {
    Ok(write_atomic(path, &encode_demos(file)?)?)
}

pub fn read_demos(path: &Path) -> Result<DemoFile, EnvError> {
    decode_demos(&std::fs::read(path)?)
}
