//! Binary checkpoint format.
//!
//! ```text
//! "GP2E" | version u32 | config_len u32 | config text (key = value lines)
//! entry_count u32 | entries: name_len u32, name, ndim u32, dims u64.., dtype u8
//! payloads, little-endian, in entry order
//! ```
//!
//! All integers are little-endian. Optimizer moments are stored as extra
//! entries named `adam.m/<param>` and `adam.v/<param>`.

use std::path::Path;

use thiserror::Error;

use crate::fsio;
use crate::nn::Params;
use crate::tensor::Tensor;

use super::PolicyConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GP2E";
pub const CHECKPOINT_VERSION: u32 = 1;

const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint manifest does not match its config: {0}")]
    Manifest(String),
    #[error("checkpoint config block: {0}")]
    Config(String),
    #[error("unknown tensor dtype tag {0}")]
    UnknownDtype(u8),
}

/// On-disk element type. `F32` only shrinks files; it is not bit-exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, CheckpointError> {
        match tag {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            t => Err(CheckpointError::UnknownDtype(t)),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub first_moment: Params,
    pub second_moment: Params,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: PolicyConfig,
    pub params: Params,
    pub optimizer: Option<OptimizerSnapshot>,
    pub train_step: u64,
    pub best_success: f64,
}

pub fn encode_checkpoint(ckpt: &Checkpoint, dtype: Dtype) -> Vec<u8> {
    let mut text = ckpt.config.to_text();
    text.push_str(&format!("train_step = {}\n", ckpt.train_step));
    text.push_str(&format!("best_success = {:?}\n", ckpt.best_success));
    if let Some(opt) = &ckpt.optimizer {
        text.push_str(&format!("optimizer_step = {}\n", opt.step));
    }

    let mut entries: Vec<(String, &Tensor)> =
        ckpt.params.iter().map(|(k, v)| (k.clone(), v)).collect();
    if let Some(opt) = &ckpt.optimizer {
        entries.extend(opt.first_moment.iter().map(|(k, v)| (format!("{FIRST_MOMENT}{k}"), v)));
        entries.extend(opt.second_moment.iter().map(|(k, v)| (format!("{SECOND_MOMENT}{k}"), v)));
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(dtype.tag());
    }
    for (_, t) in &entries {
        for &v in t.data() {
            match dtype {
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let text_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(text_len)?)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;

    let mut config = PolicyConfig::default();
    let mut train_step = None;
    let mut best_success = None;
    let mut optimizer_step = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Config(format!("malformed line {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        let bad = |e: String| CheckpointError::Config(format!("{k}: {e}"));
        match k {
            "train_step" => train_step = Some(v.parse::<u64>().map_err(|e| bad(e.to_string()))?),
            "best_success" => best_success = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "optimizer_step" => {
                optimizer_step = Some(v.parse::<u64>().map_err(|e| bad(e.to_string()))?)
            }
            _ => {
                if !config.set(k, v).map_err(bad)? {
                    return Err(CheckpointError::Config(format!("unknown key {k:?}")));
                }
            }
        }
    }
    config
        .validate()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;

    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let dtype = Dtype::from_tag(r.u8()?)?;
        manifest.push((name, shape, dtype));
    }

    // Validate names and shapes before touching any payload.
    let plan = config.param_plan();
    for spec in &plan {
        let found = manifest.iter().find(|(n, _, _)| *n == spec.name);
        match found {
            Some((_, shape, _)) if *shape == spec.shape => {}
            Some((_, shape, _)) => {
                return Err(CheckpointError::Manifest(format!(
                    "{} has shape {shape:?}, config implies {:?}",
                    spec.name, spec.shape
                )))
            }
            None => {
                return Err(CheckpointError::Manifest(format!("missing tensor {}", spec.name)))
            }
        }
    }
    for (name, shape, _) in &manifest {
        let base = name
            .strip_prefix(FIRST_MOMENT)
            .or_else(|| name.strip_prefix(SECOND_MOMENT))
            .unwrap_or(name);
        match plan.iter().find(|s| s.name == base) {
            Some(spec) if spec.shape == *shape => {}
            _ => return Err(CheckpointError::Manifest(format!("unexpected tensor {name}"))),
        }
    }

    let mut params = Params::new();
    let mut first = Params::new();
    let mut second = Params::new();
    for (name, shape, dtype) in manifest {
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.width())?;
        let data: Vec<f64> = match dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if let Some(base) = name.strip_prefix(FIRST_MOMENT) {
            first.insert(base, t);
        } else if let Some(base) = name.strip_prefix(SECOND_MOMENT) {
            second.insert(base, t);
        } else {
            params.insert(name, t);
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Manifest(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }

    let optimizer = match optimizer_step {
        Some(step) => Some(OptimizerSnapshot {
            step,
            first_moment: first,
            second_moment: second,
        }),
        None if first.is_empty() && second.is_empty() => None,
        None => {
            return Err(CheckpointError::Config(
                "optimizer moments present without optimizer_step".into(),
            ))
        }
    };
    Ok(Checkpoint {
        config,
        params,
        optimizer,
        train_step: train_step.ok_or_else(|| CheckpointError::Config("missing train_step".into()))?,
        best_success: best_success
            .ok_or_else(|| CheckpointError::Config("missing best_success".into()))?,
    })
}

/// Writes through a temporary file and renames, so a reader never sees a
/// partial checkpoint.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, dtype: Dtype) -> Result<(), CheckpointError> {
    fsio::write_atomic(path, &encode_checkpoint(ckpt, dtype))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}
