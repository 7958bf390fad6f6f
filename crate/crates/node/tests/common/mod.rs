// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use fedcrypt_core::protocol::Protocol;
use fedcrypt_core::wire::{AuthToken, Frame, JobId};
use fedcrypt_node::{
    Address, Coordinator, CoordinatorEvent, Envelope, GradientSource, JobConfig, Learner, LearnerEvent, LearnerOptions,
};

pub const TOKEN: AuthToken = AuthToken([0x5A; 32]);

pub fn job_id() -> JobId {
    JobId::from_label("node-tests")
}

pub fn config(parties: usize, len: usize, protocol: Protocol, rounds: u32) -> JobConfig {
    let mut cfg = JobConfig::new(job_id(), TOKEN, parties, len);
    cfg.protocol = protocol;
    cfg.key_bits = 512;
    cfg.total_rounds = rounds;
    cfg.key_seed = Some([9u8; 32]);
    cfg
}

/// Zero-latency in-memory cluster with a manual clock.
pub struct Cluster {
    pub coordinator: Coordinator,
    pub learners: BTreeMap<String, Learner>,
    pub queue: VecDeque<(Option<String>, Envelope)>,
    pub now: Duration,
    pub crashed: Vec<String>,
    /// `(name, round)`: the learner dies the moment it starts that round.
    pub crash_at: Vec<(String, u32)>,
    pub coordinator_events: Vec<CoordinatorEvent>,
    pub learner_events: Vec<(String, LearnerEvent)>,
    /// Every frame that crossed the network, with its sender.
    pub log: Vec<(Option<String>, Address, Frame)>,
}

impl Cluster {
    pub fn new(cfg: JobConfig, sources: Vec<(String, Box<dyn GradientSource>)>) -> Self {
        let coordinator = Coordinator::new();
        coordinator.create_job(cfg.clone()).unwrap();
        let learners = sources
            .into_iter()
            .enumerate()
            .map(|(i, (name, source))| {
                let mut opts = LearnerOptions::new(name.clone(), cfg.job_id, cfg.token);
                opts.rng_seed = Some(i as u64 + 100);
                (name, Learner::new(opts, source))
            })
            .collect();
        Self {
            coordinator,
            learners,
            queue: VecDeque::new(),
            now: Duration::ZERO,
            crashed: Vec::new(),
            crash_at: Vec::new(),
            coordinator_events: Vec::new(),
            learner_events: Vec::new(),
            log: Vec::new(),
        }
    }

    pub fn register_all(&mut self) {
        let names: Vec<String> = self.learners.keys().cloned().collect();
        for name in names {
            let out = self.learners.get_mut(&name).unwrap().register(self.now);
            self.push_learner(&name, out);
        }
    }

    fn push_learner(&mut self, from: &str, out: fedcrypt_node::LearnerOutput) {
        let dies = out.events.iter().any(|e| match e {
            LearnerEvent::RoundStarted { round, .. } => self.crash_at.contains(&(from.to_string(), *round)),
            _ => false,
        });
        if dies {
            self.crash_at.retain(|(n, _)| n != from);
            self.crashed.push(from.to_string());
            return;
        }
        for e in out.events {
            self.learner_events.push((from.to_string(), e));
        }
        for env in out.outbound {
            self.queue.push_back((Some(from.to_string()), env));
        }
    }

    fn push_coordinator(&mut self, fx: fedcrypt_node::Effects) {
        self.coordinator_events.extend(fx.events.into_iter().map(|e| e.event));
        for env in fx.outbound {
            self.queue.push_back((None, env));
        }
    }

    /// Delivers queued frames until the network is quiet.
    pub fn drain(&mut self) {
        while let Some((from, env)) = self.queue.pop_front() {
            self.log.push((from.clone(), env.to.clone(), env.frame.clone()));
            match &env.to {
                Address::Coordinator => {
                    if from.as_ref().is_some_and(|f| self.crashed.contains(f)) {
                        continue;
                    }
                    let fx = self.coordinator.handle_frame(from.as_deref(), env.frame, self.now);
                    self.push_coordinator(fx);
                }
                Address::Participant(name) => {
                    if self.crashed.contains(name) {
                        continue;
                    }
                    let name = name.clone();
                    let Some(learner) = self.learners.get_mut(&name) else {
                        continue;
                    };
                    let out = learner.handle_frame_tracked(env.frame, env.contributors, self.now);
                    self.push_learner(&name, out);
                }
            }
        }
    }

    /// Advances the clock in `step` increments, ticking everyone.
    pub fn advance(&mut self, total: Duration, step: Duration) {
        let end = self.now + total;
        while self.now < end {
            self.now += step;
            let names: Vec<String> = self.learners.keys().cloned().collect();
            for name in names {
                if self.crashed.contains(&name) {
                    continue;
                }
                let out = self.learners.get_mut(&name).unwrap().tick(self.now);
                self.push_learner(&name, out);
            }
            let fx = self.coordinator.tick(self.now);
            self.push_coordinator(fx);
            self.drain();
        }
    }

    pub fn results_for(&self, name: &str) -> Vec<Vec<f64>> {
        self.learner_events
            .iter()
            .filter(|(n, _)| n == name)
            .filter_map(|(_, e)| match e {
                LearnerEvent::ResultApplied { average, .. } => Some(average.clone()),
                _ => None,
            })
            .collect()
    }
}
