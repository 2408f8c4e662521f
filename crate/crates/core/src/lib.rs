//! Desk-scale flow-matching post-training lab.
//!
//! A small tanh MLP velocity field is pretrained with flow matching on a
//! planar Gaussian mixture, specialised into single-reward teachers with
//! group-relative policy gradients on SDE rollouts, and then distilled into
//! one student by on-policy, hard-routed velocity matching with an optional
//! anchor penalty toward a frozen quality model.

// `!(x > 0.0)` is used on purpose so that NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coldstart;
pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod grpo;
pub mod numgrad;
pub mod opd;
pub mod optim;
pub mod pipeline;
pub mod rewards;
pub mod rollout;
pub mod verify;

pub use error::{Error, Result};
pub use flow::{NoiseSchedule, TimeGrid};
pub use numgrad::{ArchSpec, GradVector, ParamVector};
pub use rewards::TaskWorld;
pub use rollout::{Condition, Group, TaskId, Trajectory};
