// SPDX-License-Identifier: Apache-2.0

//! Benchmark and test harness.
//!
//! Runs a coordinator and `P` learners on a deterministic virtual network
//! (or loopback sockets), injects failures and collusion, and reports
//! per-round synchronization costs as CSV.

pub mod attack;
pub mod network;
pub mod realnet;
pub mod report;
pub mod runner;
pub mod scenario;

pub use report::{emit_report, ReportRow};
pub use runner::{run_scenario, run_with, RunOptions, RunOutcome, SimError};
pub use scenario::{CollusionMode, CollusionPlan, FailureEvent, Scenario, TransformCost, Workload};
