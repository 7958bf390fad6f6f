// SPDX-License-Identifier: Apache-2.0

//! Drives a coordinator and its learners over the virtual network.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use fedcrypt_core::protocol::TransformStats;
use fedcrypt_core::topology::Rank;
use fedcrypt_core::wire::{self, AuthToken, JobId, MessageType};
use fedcrypt_node::model::{centralized_descent, FixedGradient, SyntheticProblem};
use fedcrypt_node::{
    Address, Behaviour, Coordinator, CoordinatorEvent, DecryptRecord, Envelope, GradientSource, JobConfig, JobStatus,
    Learner, LearnerEvent, LearnerOptions, LearnerOutput, LinearTrainer,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::network::{duration, nanos, seconds, EventQueue, LinkModel, Nanos, Network};
use crate::report::ReportRow;
use crate::scenario::{CollusionMode, FailureEvent, Scenario, ScenarioError, TransformCost, Workload};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("job rejected by coordinator: {0}")]
    Job(String),
    #[error("expected {expected} gradient sources, got {got}")]
    Sources { expected: usize, got: usize },
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Keep full frame bytes in the transcript.
    pub record_frames: bool,
    /// Virtual time after which the run is cut off.
    pub time_limit: Duration,
    /// Coordinator timer resolution.
    pub tick: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            record_frames: false,
            time_limit: Duration::from_secs(600),
            tick: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub sent: Nanos,
    pub delivered: Nanos,
    pub from: Address,
    pub to: Address,
    pub kind: MessageType,
    /// Aggregation round, for AGG_MSG and AGG_SUBMIT.
    pub round: Option<u32>,
    pub sender_rank: Option<Rank>,
    pub size: usize,
    pub digest: [u8; 8],
    /// Ranks whose plaintext is folded into an aggregation payload.
    pub contributors: Option<BTreeSet<Rank>>,
    pub frame: Option<Vec<u8>>,
    /// Addressed to or sent by a learner that was down.
    pub dropped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recovery {
    Resumed,
    Rebuilt { parties: usize },
    Aborted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureCheck {
    pub plan: FailureEvent,
    pub learner: Option<String>,
    pub failed_at: Option<Nanos>,
    /// Parties in the topology when the failure hit.
    pub parties: usize,
    pub paused: bool,
    pub recovery: Option<Recovery>,
    /// A round completed after the recovery.
    pub completed_after: bool,
}

impl FailureCheck {
    /// Paused, then resumed or rebuilt into a working topology, or aborted
    /// because too few parties were left.
    pub fn holds(&self) -> bool {
        if self.failed_at.is_none() || !self.paused {
            return false;
        }
        match self.recovery {
            Some(Recovery::Resumed) => self.completed_after,
            Some(Recovery::Rebuilt { parties }) => parties + 1 == self.parties && self.completed_after,
            Some(Recovery::Aborted) => self.parties <= 2,
            None => false,
        }
    }
}

pub struct RunOutcome {
    pub scenario: Scenario,
    pub rows: Vec<ReportRow>,
    pub transcript: Vec<TranscriptEntry>,
    pub coordinator_events: Vec<(Nanos, CoordinatorEvent)>,
    pub learner_events: Vec<(Nanos, String, LearnerEvent)>,
    pub status: JobStatus,
    pub completed_rounds: u32,
    pub audit: Vec<DecryptRecord>,
    pub parameters: BTreeMap<String, Vec<f64>>,
    pub failure_checks: Vec<FailureCheck>,
    pub red_flags: Vec<Vec<Rank>>,
    pub finished_at: Nanos,
    pub timed_out: bool,
}

impl RunOutcome {
    pub fn succeeded(&self) -> bool {
        self.status == JobStatus::Completed && self.completed_rounds == self.scenario.rounds
    }

    /// Honest ranks whose contribution reached the decryptor alone.
    pub fn isolated_ranks(&self) -> BTreeSet<Rank> {
        isolated_ranks(&self.transcript)
    }

    /// One line per frame; identical runs give identical text.
    pub fn transcript_text(&self) -> String {
        let mut out = String::new();
        for e in &self.transcript {
            let digest: String = e.digest.iter().map(|b| format!("{b:02x}")).collect();
            let _ = write!(
                out,
                "{:.9} {:.9} {} -> {} {:?} {} {}",
                seconds(e.sent),
                seconds(e.delivered),
                e.from,
                e.to,
                e.kind,
                e.size,
                digest
            );
            if let Some(c) = &e.contributors {
                let ranks: Vec<String> = c.iter().map(|r| r.to_string()).collect();
                let _ = write!(out, " [{}]", ranks.join(","));
            }
            if e.dropped {
                out.push_str(" dropped");
            }
            out.push('\n');
        }
        out
    }

    pub fn events_of<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a LearnerEvent> + 'a {
        self.learner_events
            .iter()
            .filter(move |(_, n, _)| n == name)
            .map(|(_, _, e)| e)
    }
}

/// Ranks isolated by some decryptor-bound submission: the payload folds in
/// exactly one plaintext.
pub fn isolated_ranks(transcript: &[TranscriptEntry]) -> BTreeSet<Rank> {
    transcript
        .iter()
        .filter(|e| e.kind == MessageType::AggSubmit && !e.dropped)
        .filter_map(|e| e.contributors.as_ref())
        .filter(|c| c.len() == 1)
        .flat_map(|c| c.iter().copied())
        .collect()
}

pub fn learner_name(index: usize, parties: usize) -> String {
    let width = parties.to_string().len().max(2);
    format!("learner-{:0width$}", index + 1)
}

pub fn job_id(s: &Scenario) -> JobId {
    JobId::from_label(&format!("sim-{}", s.seed))
}

fn seeded(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn job_token(s: &Scenario) -> AuthToken {
    let mut t = [0u8; 32];
    seeded(s.seed, 1).fill_bytes(&mut t);
    AuthToken(t)
}

pub fn job_config(s: &Scenario) -> JobConfig {
    let mut cfg = JobConfig::new(job_id(s), job_token(s), s.parties, s.vector_length);
    cfg.protocol = s.protocol;
    cfg.key_bits = s.key_bits;
    cfg.total_rounds = s.rounds;
    let mut key_seed = [0u8; 32];
    seeded(s.seed, 2).fill_bytes(&mut key_seed);
    cfg.key_seed = Some(key_seed);
    cfg
}

fn linear_problem(s: &Scenario) -> Option<(SyntheticProblem, f64)> {
    match s.workload {
        Workload::Linear {
            samples_per_party,
            learning_rate,
        } => Some((
            SyntheticProblem::generate(s.seed, s.vector_length, samples_per_party * s.parties, None),
            learning_rate,
        )),
        Workload::Random => None,
    }
}

/// Gradient sources for learners `1..=P` as described by the workload.
pub fn default_sources(s: &Scenario) -> Vec<Box<dyn GradientSource>> {
    match linear_problem(s) {
        Some((problem, lr)) => problem
            .data
            .partition(s.parties)
            .into_iter()
            .map(|part| {
                Box::new(LinearTrainer::new(vec![0.0; s.vector_length], vec![part], lr)) as Box<dyn GradientSource>
            })
            .collect(),
        None => (0..s.parties)
            .map(|i| {
                let mut rng = seeded(s.seed, 100 + i as u64);
                let v = (0..s.vector_length).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Box::new(FixedGradient::new(v)) as Box<dyn GradientSource>
            })
            .collect(),
    }
}

/// Parameters plain gradient descent reaches after `rounds` steps, for
/// linear workloads.
pub fn centralized_reference(s: &Scenario, rounds: u32) -> Option<Vec<f64>> {
    let (problem, lr) = linear_problem(s)?;
    let path = centralized_descent(&vec![0.0; s.vector_length], &problem.data, lr, rounds as usize).ok()?;
    path.last().cloned()
}

pub fn transform_seconds(cost: TransformCost, stats: &TransformStats) -> f64 {
    match cost {
        TransformCost::Measured => stats.elapsed.as_secs_f64(),
        TransformCost::Modeled { encrypt_us, add_us } => {
            (stats.encryptions as f64 * encrypt_us + stats.additions as f64 * add_us) / 1e6
        }
    }
}

pub fn run_scenario(s: &Scenario) -> Result<RunOutcome, SimError> {
    run_with(s, default_sources(s), &RunOptions::default())
}

enum Ev {
    Deliver { entry: usize, env: Envelope },
    LearnerTick(usize),
    CoordinatorTick,
    Reconnect(usize),
}

struct Slot {
    learner: Learner,
    name: String,
    down: bool,
    /// Aggregation frames sent, per round.
    sent: BTreeMap<u32, u32>,
}

struct Sim<'a> {
    scenario: &'a Scenario,
    opts: &'a RunOptions,
    job: JobId,
    coordinator: Coordinator,
    slots: Vec<Slot>,
    by_name: BTreeMap<String, usize>,
    network: Network<Address>,
    queue: EventQueue<Ev>,
    in_flight: usize,
    transcript: Vec<TranscriptEntry>,
    coordinator_events: Vec<(Nanos, CoordinatorEvent)>,
    learner_events: Vec<(Nanos, String, LearnerEvent)>,
    checks: Vec<FailureCheck>,
}

/// Runs `s` with caller-supplied gradient sources, one per learner in rank
/// order.
pub fn run_with(
    s: &Scenario,
    sources: Vec<Box<dyn GradientSource>>,
    opts: &RunOptions,
) -> Result<RunOutcome, SimError> {
    s.validate()?;
    if sources.len() != s.parties {
        return Err(SimError::Sources {
            expected: s.parties,
            got: sources.len(),
        });
    }
    let cfg = job_config(s);
    let coordinator = Coordinator::new();
    coordinator
        .create_job(cfg.clone())
        .map_err(|e| SimError::Job(e.to_string()))?;

    let shared = Arc::new(Mutex::new(BTreeMap::new()));
    let mut slots = Vec::with_capacity(s.parties);
    for (i, source) in sources.into_iter().enumerate() {
        let name = learner_name(i, s.parties);
        let mut o = LearnerOptions::new(name.clone(), cfg.job_id, cfg.token);
        o.endpoint = format!("sim://{name}");
        o.rng_seed = Some(seeded(s.seed, 1000 + i as u64).next_u64());
        let mut learner = Learner::new(o, source);
        // names sort in index order, so initial rank = index + 1
        if let Some(plan) = &s.collusion_plan {
            if plan.ranks.contains(&(i as u16 + 1)) {
                learner.set_behaviour(match plan.mode {
                    CollusionMode::PassThrough => Behaviour::PassThrough,
                    CollusionMode::DuplicateCiphertext => Behaviour::Duplicate(shared.clone()),
                });
            }
        }
        slots.push(Slot {
            learner,
            name,
            down: false,
            sent: BTreeMap::new(),
        });
    }
    let by_name = slots.iter().enumerate().map(|(i, sl)| (sl.name.clone(), i)).collect();
    let checks = s
        .failure_plan
        .iter()
        .map(|p| FailureCheck {
            plan: p.clone(),
            learner: None,
            failed_at: None,
            parties: 0,
            paused: false,
            recovery: None,
            completed_after: false,
        })
        .collect();
    let mut sim = Sim {
        scenario: s,
        opts,
        job: cfg.job_id,
        coordinator,
        slots,
        by_name,
        network: Network::new(LinkModel::new(s.latency(), s.bandwidth)),
        queue: EventQueue::new(),
        in_flight: 0,
        transcript: Vec::new(),
        coordinator_events: Vec::new(),
        learner_events: Vec::new(),
        checks,
    };
    let timed_out = sim.run();
    Ok(sim.finish(timed_out))
}

impl Sim<'_> {
    fn run(&mut self) -> bool {
        for i in 0..self.slots.len() {
            let out = self.slots[i].learner.register(Duration::ZERO);
            self.absorb(i, out, 0);
            let at = nanos(self.slots[i].learner.next_heartbeat());
            self.queue.schedule(at, Ev::LearnerTick(i));
        }
        self.queue.schedule(nanos(self.opts.tick), Ev::CoordinatorTick);
        let limit = nanos(self.opts.time_limit);
        while let Some((now, ev)) = self.queue.pop() {
            if now > limit {
                return true;
            }
            match ev {
                Ev::Deliver { entry, env } => {
                    self.in_flight -= 1;
                    self.deliver(entry, env, now);
                }
                Ev::CoordinatorTick => {
                    let fx = self.coordinator.tick(duration(now));
                    self.absorb_coordinator(fx, now);
                    self.queue.schedule(now + nanos(self.opts.tick), Ev::CoordinatorTick);
                }
                Ev::LearnerTick(i) => {
                    if self.slots[i].down || self.slots[i].learner.is_done() {
                        continue;
                    }
                    let out = self.slots[i].learner.tick(duration(now));
                    self.absorb(i, out, now);
                    let next = nanos(self.slots[i].learner.next_heartbeat()).max(now + 1);
                    self.queue.schedule(next, Ev::LearnerTick(i));
                }
                Ev::Reconnect(i) => {
                    // frames lost while down are only replayed after a pause
                    if !self.paused_since_failure(i) {
                        self.queue.schedule(now + nanos(self.opts.tick), Ev::Reconnect(i));
                        continue;
                    }
                    self.slots[i].down = false;
                    log::info!("{} reconnects at {:.6}s", self.slots[i].name, seconds(now));
                    self.queue.schedule(now, Ev::LearnerTick(i));
                }
            }
            if self.in_flight == 0 && self.settled() {
                return false;
            }
        }
        false
    }

    fn settled(&self) -> bool {
        let job_over = matches!(
            self.coordinator.status(&self.job),
            Some(JobStatus::Completed | JobStatus::Aborted)
        );
        job_over || self.slots.iter().all(|s| s.learner.is_done())
    }

    fn deliver(&mut self, entry: usize, env: Envelope, now: Nanos) {
        let from = self.transcript[entry].from.clone();
        match &env.to {
            Address::Coordinator => {
                let origin = from.name().map(str::to_string);
                let fx = self
                    .coordinator
                    .handle_frame(origin.as_deref(), env.frame, duration(now));
                self.absorb_coordinator(fx, now);
            }
            Address::Participant(name) => {
                let Some(&i) = self.by_name.get(name) else {
                    return;
                };
                if self.slots[i].down {
                    self.transcript[entry].dropped = true;
                    return;
                }
                let out = self.slots[i]
                    .learner
                    .handle_frame_tracked(env.frame, env.contributors, duration(now));
                self.absorb(i, out, now);
            }
        }
    }

    fn absorb_coordinator(&mut self, fx: fedcrypt_node::Effects, now: Nanos) {
        for e in fx.events {
            self.coordinator_events.push((now, e.event));
        }
        for env in fx.outbound {
            self.send(Address::Coordinator, None, env, now);
        }
    }

    fn absorb(&mut self, i: usize, out: LearnerOutput, now: Nanos) {
        let name = self.slots[i].name.clone();
        for e in out.events {
            self.learner_events.push((now, name.clone(), e));
        }
        let rank = self.slots[i].learner.rank();
        for env in out.outbound {
            if self.slots[i].down {
                break;
            }
            let kind = env.frame.kind;
            if matches!(kind, MessageType::AggMsg | MessageType::AggSubmit) {
                if let Ok(round) = wire::peek_aggregate_round(&env.frame.payload) {
                    let step = *self.slots[i].sent.get(&round).unwrap_or(&0);
                    if self.maybe_fail(i, rank, round, step, now) {
                        break;
                    }
                    *self.slots[i].sent.entry(round).or_default() += 1;
                }
            }
            self.send(Address::Participant(name.clone()), rank, env, now);
        }
    }

    /// Takes learner `i` down if a planned failure matches.
    fn maybe_fail(&mut self, i: usize, rank: Option<Rank>, round: u32, step: u32, now: Nanos) -> bool {
        let Some(rank) = rank else {
            return false;
        };
        let parties = self.current_parties();
        let hit = self.checks.iter_mut().find(|c| {
            c.failed_at.is_none() && c.plan.round == round && c.plan.rank == rank.get() && c.plan.fail_at_step == step
        });
        let Some(check) = hit else {
            return false;
        };
        check.failed_at = Some(now);
        check.learner = Some(self.slots[i].name.clone());
        check.parties = parties;
        let reconnect = check.plan.reconnect_after_s;
        self.slots[i].down = true;
        log::info!(
            "{} (rank {rank}) fails in round {round} at step {step}, t={:.6}s",
            self.slots[i].name,
            seconds(now)
        );
        if let Some(after) = reconnect {
            self.queue
                .schedule(now + nanos(Duration::from_secs_f64(after)), Ev::Reconnect(i));
        }
        true
    }

    fn paused_since_failure(&self, i: usize) -> bool {
        let name = &self.slots[i].name;
        let Some(t) = self
            .checks
            .iter()
            .filter(|c| c.learner.as_ref() == Some(name))
            .filter_map(|c| c.failed_at)
            .max()
        else {
            return true;
        };
        self.coordinator_events
            .iter()
            .any(|(at, e)| *at >= t && matches!(e, CoordinatorEvent::Paused { .. }))
    }

    fn current_parties(&self) -> usize {
        self.coordinator_events
            .iter()
            .rev()
            .find_map(|(_, e)| match e {
                CoordinatorEvent::Started { parties, .. } | CoordinatorEvent::Rebuilt { parties, .. } => Some(*parties),
                _ => None,
            })
            .unwrap_or(self.scenario.parties)
    }

    fn send(&mut self, from: Address, rank: Option<Rank>, env: Envelope, now: Nanos) {
        let bytes = env.frame.encode();
        let kind = env.frame.kind;
        let tx = self
            .network
            .transmit(&from, bytes.len(), now, kind != MessageType::Heartbeat);
        let round = match kind {
            MessageType::AggMsg | MessageType::AggSubmit => wire::peek_aggregate_round(&env.frame.payload).ok(),
            _ => None,
        };
        let mut digest = [0u8; 8];
        digest.copy_from_slice(&Sha256::digest(&bytes)[..8]);
        self.transcript.push(TranscriptEntry {
            sent: now,
            delivered: tx.delivered,
            from,
            to: env.to.clone(),
            kind,
            round,
            sender_rank: rank,
            size: bytes.len(),
            digest,
            contributors: env.contributors.clone(),
            frame: self.opts.record_frames.then_some(bytes),
            dropped: false,
        });
        self.in_flight += 1;
        self.queue.schedule(
            tx.delivered,
            Ev::Deliver {
                entry: self.transcript.len() - 1,
                env,
            },
        );
    }

    fn rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        for (_, e) in &self.coordinator_events {
            let CoordinatorEvent::RoundCompleted { round, parties, .. } = e else {
                continue;
            };
            let round = *round;
            let mut start = None::<Nanos>;
            let mut end = None::<Nanos>;
            let mut transform = 0.0f64;
            for (t, _, le) in &self.learner_events {
                match le {
                    LearnerEvent::RoundStarted { round: r, .. } if *r == round => {
                        start = Some(start.map_or(*t, |s| s.min(*t)));
                    }
                    LearnerEvent::ResultApplied { round: r, .. } if *r == round => {
                        end = Some(end.map_or(*t, |s| s.max(*t)));
                    }
                    LearnerEvent::TransformDone { round: r, stats } if *r == round => {
                        transform = transform.max(transform_seconds(self.scenario.transform, stats));
                    }
                    _ => {}
                }
            }
            let comm = match (start, end) {
                (Some(s), Some(e)) => seconds(e.saturating_sub(s)),
                _ => 0.0,
            };
            rows.push(ReportRow::new(*parties, self.scenario.protocol, round, comm, transform));
        }
        rows
    }

    fn finish(mut self, timed_out: bool) -> RunOutcome {
        let events = &self.coordinator_events;
        for check in &mut self.checks {
            let Some(t) = check.failed_at else {
                continue;
            };
            check.paused = events
                .iter()
                .any(|(at, e)| *at >= t && matches!(e, CoordinatorEvent::Paused { .. }));
            let recovered = events.iter().find_map(|(at, e)| {
                let r = match e {
                    CoordinatorEvent::Resumed { .. } => Recovery::Resumed,
                    CoordinatorEvent::Rebuilt { parties, .. } => Recovery::Rebuilt { parties: *parties },
                    CoordinatorEvent::Aborted { .. } => Recovery::Aborted,
                    _ => return None,
                };
                (*at >= t).then_some((*at, r))
            });
            if let Some((at, r)) = recovered {
                check.recovery = Some(r);
                check.completed_after = events
                    .iter()
                    .any(|(t2, e)| *t2 >= at && matches!(e, CoordinatorEvent::RoundCompleted { .. }));
            }
        }
        let red_flags = events
            .iter()
            .filter_map(|(_, e)| match e {
                CoordinatorEvent::RedFlag { ranks, .. } => Some(ranks.clone()),
                _ => None,
            })
            .collect();
        let snapshot = self.coordinator.snapshot(&self.job);
        let rows = self.rows();
        RunOutcome {
            scenario: self.scenario.clone(),
            rows,
            status: snapshot.as_ref().map_or(JobStatus::Aborted, |s| s.status),
            completed_rounds: snapshot.as_ref().map_or(0, |s| s.completed_rounds),
            audit: self.coordinator.audit_log(&self.job),
            parameters: self
                .slots
                .iter()
                .map(|s| (s.name.clone(), s.learner.parameters().to_vec()))
                .collect(),
            failure_checks: self.checks,
            red_flags,
            finished_at: self.queue.now(),
            timed_out,
            transcript: self.transcript,
            coordinator_events: self.coordinator_events,
            learner_events: self.learner_events,
        }
    }
}
