// SPDX-License-Identifier: Apache-2.0

//! Coordinator and learner nodes.
//!
//! Both are sans-IO state machines: they consume frames and clock ticks and
//! return envelopes for the transport to deliver. The simulator and the TCP
//! runner drive the same code.

pub mod config;
pub mod coordinator;
pub mod envelope;
pub mod learner;
pub mod model;

pub use config::{LearnerConfig, Role};
pub use coordinator::{
    Coordinator, CoordinatorEvent, DecryptRecord, Effects, HeartbeatConfig, JobConfig, JobEvent, JobStatus,
    RotationPolicy,
};
pub use envelope::{Address, Envelope};
pub use learner::{Behaviour, Learner, LearnerEvent, LearnerOptions, LearnerOutput, LearnerStatus};
pub use model::{Batch, GradientSource, LinearTrainer};
