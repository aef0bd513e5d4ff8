//! Guided point-cloud behavior cloning: a small reverse-mode autodiff
//! engine, the policy network built on it, a behavior-cloning trainer with
//! a two-stage fine-tuning schedule, and a deterministic toy particle
//! environment that supplies demonstrations and success metrics.

pub mod autodiff;
pub mod cli;
pub mod env;
pub mod finite_diff;
pub mod fsio;
pub mod gradcheck;
pub mod nn;
pub mod observation;
pub mod policy;
pub mod tensor;
pub mod train;

pub use autodiff::{GradMap, OpKind, Tape, Var};
pub use nn::Params;
pub use observation::PointCloudObservation;
pub use policy::{Checkpoint, CondensedMode, Policy, PolicyConfig};
pub use tensor::{Tensor, TensorError};
