//! The guided point-cloud policy: configuration, forward pass and
//! checkpoints.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError, Dtype, OptimizerSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{CondensedMode, PolicyConfig};
pub use network::{
    bias_buckets, canonical_cloud, encode, forward_on_tape, guided_attention, pairwise_bias,
    pool_and_act, AttentionArtifacts, EncoderOutputs, ForwardTrace,
};

use thiserror::Error;

use crate::autodiff::Tape;
use crate::nn::{init_params, Params};
use crate::observation::PointCloudObservation;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter {0:?} missing from the store")]
    MissingParam(String),
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
}

/// A configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub params: Params,
}

impl Policy {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let params = init_params(seed, &config.param_plan());
        Ok(Self { config, params })
    }

    pub fn from_parts(config: PolicyConfig, params: Params) -> Result<Self, PolicyError> {
        config.validate()?;
        for spec in config.param_plan() {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| PolicyError::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(PolicyError::Config(format!(
                    "{} has shape {:?}, config needs {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// `π(s)` as an `[action_dim]` tensor.
    pub fn forward(&self, obs: &PointCloudObservation) -> Result<Tensor, PolicyError> {
        let mut tape = Tape::new();
        self.forward_with(&mut tape, obs)
    }

    /// Like [`Policy::forward`] but on a caller-owned tape, so intermediates
    /// and op counters stay inspectable.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        obs: &PointCloudObservation,
    ) -> Result<Tensor, PolicyError> {
        let bp = self.params.bind(tape);
        let trace = forward_on_tape(tape, obs, &bp, &self.config)?;
        Ok(tape.value(trace.action).reshaped(&[self.config.action_dim])?)
    }

    /// Pooled feature `max(concat(G, P4))` for one observation.
    pub fn pooled_feature(&self, obs: &PointCloudObservation) -> Result<Tensor, PolicyError> {
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape);
        let trace = forward_on_tape(&mut tape, obs, &bp, &self.config)?;
        Ok(tape.value(trace.pooled).clone())
    }
}
