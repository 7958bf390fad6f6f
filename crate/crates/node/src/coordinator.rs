// SPDX-License-Identifier: Apache-2.0

//! Coordinator: membership, topology, key lifecycle, decryption and
//! failure handling for any number of jobs.
//!
//! The coordinator is transport-agnostic. Callers feed it authenticated
//! frames and clock ticks and deliver the returned envelopes.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use fedcrypt_core::codec::{self, CodecConfig};
use fedcrypt_core::paillier::{KeyPair, PublicKey};
use fedcrypt_core::protocol::{Protocol, SubmissionError, SubmissionSet};
use fedcrypt_core::topology::{OrderingStrategy, Participant, Rank, RingTopology};
use fedcrypt_core::wire::{
    self, AuthToken, ErrorCode, ErrorPayload, Frame, JobId, MemberEntry, MessageType, PubKeyPayload, RegisterPayload,
    TopologyAssignPayload,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::envelope::{Address, Envelope};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationPolicy {
    /// One key for the job's lifetime.
    PerJob,
    /// A fresh key every `rounds` completed rounds.
    PerEpoch { rounds: u32 },
    /// A fresh key once this many minutes have passed, checked at round boundaries.
    EveryMinutes(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeartbeatConfig {
    pub interval: Duration,
    pub misses: u32,
    pub grace: Duration,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        Self {
            interval: Duration::from_secs(1),
            misses: 3,
            grace: Duration::from_secs(10),
        }
    }
}

impl HeartbeatConfig {
    pub fn failure_after(&self) -> Duration {
        self.interval * self.misses
    }
}

#[derive(Debug, Clone)]
pub struct JobConfig {
    pub job_id: JobId,
    /// Pre-shared token every frame of this job must carry.
    pub token: AuthToken,
    pub expected_members: usize,
    pub protocol: Protocol,
    pub strategy: OrderingStrategy,
    pub key_bits: u64,
    pub codec: CodecConfig,
    pub vector_length: usize,
    /// Rounds to run before the job completes; 0 runs until stopped.
    pub total_rounds: u32,
    pub rotation: RotationPolicy,
    pub heartbeat: HeartbeatConfig,
    /// Seeds key generation. `None` uses operating-system entropy.
    pub key_seed: Option<[u8; 32]>,
}

impl JobConfig {
    pub fn new(job_id: JobId, token: AuthToken, expected_members: usize, vector_length: usize) -> Self {
        Self {
            job_id,
            token,
            expected_members,
            protocol: Protocol::Ring,
            strategy: OrderingStrategy::default(),
            key_bits: fedcrypt_core::paillier::DEFAULT_KEY_BITS,
            codec: CodecConfig::default(),
            vector_length,
            total_rounds: 0,
            rotation: RotationPolicy::PerJob,
            heartbeat: HeartbeatConfig::default(),
            key_seed: None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoordinatorError {
    #[error("job {0:?} already exists")]
    DuplicateJob(JobId),
    #[error("invalid job configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobStatus {
    Forming,
    Running,
    Paused,
    Completed,
    Aborted,
}

/// One decryption performed by the coordinator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecryptRecord {
    pub round: u32,
    pub epoch: u32,
    pub protocol: Protocol,
    pub parties: usize,
    pub submitters: Vec<Rank>,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoordinatorEvent {
    Registered {
        name: String,
    },
    Rejected {
        to: Address,
        code: ErrorCode,
        detail: String,
    },
    Started {
        parties: usize,
        round: u32,
    },
    KeyRotated {
        epoch: u32,
        effective_round: u32,
    },
    RoundCompleted {
        round: u32,
        parties: usize,
        decrypt_time: Duration,
        decryptions: usize,
        result: Vec<f64>,
    },
    RoundFailed {
        round: u32,
        reason: String,
    },
    RedFlag {
        reporter: String,
        ranks: Vec<Rank>,
    },
    LearnerSuspected {
        name: String,
    },
    Paused {
        round: u32,
    },
    Reconnected {
        name: String,
    },
    Resumed {
        round: u32,
    },
    Eliminated {
        names: Vec<String>,
    },
    Rebuilt {
        parties: usize,
        start_round: u32,
    },
    Completed,
    Aborted {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobEvent {
    pub job: JobId,
    pub event: CoordinatorEvent,
}

#[derive(Debug, Default)]
pub struct Effects {
    pub outbound: Vec<Envelope>,
    pub events: Vec<JobEvent>,
}

impl Effects {
    fn extend(&mut self, other: Effects) {
        self.outbound.extend(other.outbound);
        self.events.extend(other.events);
    }
}

#[derive(Debug, Clone)]
pub struct JobSnapshot {
    pub status: JobStatus,
    pub round: u32,
    pub completed_rounds: u32,
    pub epoch: u32,
    pub members: Vec<String>,
    pub public_key: Option<PublicKey>,
}

struct EpochKey {
    epoch: u32,
    effective_round: u32,
    keypair: KeyPair,
}

struct Job {
    cfg: JobConfig,
    status: JobStatus,
    registered: Vec<Participant>,
    topology: Option<RingTopology>,
    epochs: Vec<EpochKey>,
    key_rng: ChaCha20Rng,
    rotated_at: Duration,
    round: u32,
    completed: u32,
    submissions: Option<SubmissionSet>,
    last_seen: HashMap<String, Duration>,
    suspects: BTreeMap<String, Duration>,
    audit: Vec<DecryptRecord>,
    out: Effects,
}

/// Serves many jobs; each job's state sits behind its own lock.
#[derive(Default)]
pub struct Coordinator {
    jobs: Mutex<HashMap<JobId, Arc<Mutex<Job>>>>,
}

impl Coordinator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_job(&self, cfg: JobConfig) -> Result<(), CoordinatorError> {
        if cfg.expected_members < 2 {
            return Err(CoordinatorError::InvalidConfig("a job needs at least 2 members".into()));
        }
        if cfg.expected_members as u64 > cfg.codec.max_parties as u64 {
            return Err(CoordinatorError::InvalidConfig(format!(
                "{} members exceed the codec's max_parties {}",
                cfg.expected_members, cfg.codec.max_parties
            )));
        }
        if !fedcrypt_core::paillier::ALLOWED_KEY_BITS.contains(&cfg.key_bits) {
            return Err(CoordinatorError::InvalidConfig(format!(
                "unsupported key size {}",
                cfg.key_bits
            )));
        }
        cfg.codec
            .validate(cfg.key_bits)
            .map_err(|e| CoordinatorError::InvalidConfig(e.to_string()))?;
        if let RotationPolicy::PerEpoch { rounds: 0 } = cfg.rotation {
            return Err(CoordinatorError::InvalidConfig("epoch length must be positive".into()));
        }
        let mut jobs = self.jobs.lock().expect("job table poisoned");
        if jobs.contains_key(&cfg.job_id) {
            return Err(CoordinatorError::DuplicateJob(cfg.job_id));
        }
        let key_rng = match cfg.key_seed {
            Some(seed) => ChaCha20Rng::from_seed(seed),
            None => ChaCha20Rng::from_entropy(),
        };
        let id = cfg.job_id;
        jobs.insert(
            id,
            Arc::new(Mutex::new(Job {
                cfg,
                status: JobStatus::Forming,
                registered: Vec::new(),
                topology: None,
                epochs: Vec::new(),
                key_rng,
                rotated_at: Duration::ZERO,
                round: 0,
                completed: 0,
                submissions: None,
                last_seen: HashMap::new(),
                suspects: BTreeMap::new(),
                audit: Vec::new(),
                out: Effects::default(),
            })),
        );
        Ok(())
    }

    fn job(&self, id: &JobId) -> Option<Arc<Mutex<Job>>> {
        self.jobs.lock().expect("job table poisoned").get(id).cloned()
    }

    fn all_jobs(&self) -> Vec<Arc<Mutex<Job>>> {
        let jobs = self.jobs.lock().expect("job table poisoned");
        let mut ids: Vec<&JobId> = jobs.keys().collect();
        ids.sort_by_key(|id| id.0);
        ids.into_iter().map(|id| jobs[id].clone()).collect()
    }

    /// Processes one inbound frame. `origin` is the participant the
    /// transport has bound to the connection, if any; REGISTER frames
    /// identify themselves through their payload.
    pub fn handle_frame(&self, origin: Option<&str>, frame: Frame, now: Duration) -> Effects {
        let reply_to = match (frame.kind, origin) {
            (_, Some(name)) => Address::participant(name),
            (MessageType::Register, None) => match RegisterPayload::decode(&frame.payload) {
                Ok(p) => Address::Participant(p.name),
                Err(_) => return Effects::default(),
            },
            _ => return Effects::default(),
        };
        let Some(job) = self.job(&frame.job_id) else {
            let mut fx = Effects::default();
            reject(&mut fx, frame.job_id, reply_to, ErrorCode::REJECTED, "unknown job");
            return fx;
        };
        let mut job = job.lock().expect("job poisoned");
        if !job.cfg.token.ct_eq(&frame.token) {
            let mut fx = Effects::default();
            reject(&mut fx, frame.job_id, reply_to, ErrorCode::UNAUTHORIZED, "bad token");
            return fx;
        }
        job.on_frame(reply_to, frame, now);
        std::mem::take(&mut job.out)
    }

    /// Drives heartbeat monitoring for every job.
    pub fn tick(&self, now: Duration) -> Effects {
        let mut fx = Effects::default();
        for job in self.all_jobs() {
            let mut job = job.lock().expect("job poisoned");
            job.tick(now);
            fx.extend(std::mem::take(&mut job.out));
        }
        fx
    }

    /// Starts a new key epoch now; it applies from the next round.
    pub fn rotate_keys(&self, id: &JobId, now: Duration) -> Option<(u32, Effects)> {
        let job = self.job(id)?;
        let mut job = job.lock().expect("job poisoned");
        if !matches!(job.status, JobStatus::Running | JobStatus::Paused) {
            return None;
        }
        let next = job.round + 1;
        job.rotate(next, now);
        let epoch = job.epochs.last().map(|e| e.epoch)?;
        Some((epoch, std::mem::take(&mut job.out)))
    }

    pub fn snapshot(&self, id: &JobId) -> Option<JobSnapshot> {
        let job = self.job(id)?;
        let job = job.lock().expect("job poisoned");
        Some(JobSnapshot {
            status: job.status,
            round: job.round,
            completed_rounds: job.completed,
            epoch: job.epochs.last().map_or(0, |e| e.epoch),
            members: match &job.topology {
                Some(t) => t.participants().iter().map(|p| p.name.clone()).collect(),
                None => job.registered.iter().map(|p| p.name.clone()).collect(),
            },
            public_key: job.epochs.last().map(|e| e.keypair.public_key().clone()),
        })
    }

    pub fn status(&self, id: &JobId) -> Option<JobStatus> {
        self.snapshot(id).map(|s| s.status)
    }

    pub fn audit_log(&self, id: &JobId) -> Vec<DecryptRecord> {
        self.job(id)
            .map(|j| j.lock().expect("job poisoned").audit.clone())
            .unwrap_or_default()
    }

    /// Test hook: the private key material of every epoch, so transcript
    /// scans can search outbound frames for it.
    pub fn private_key_material(&self, id: &JobId) -> Vec<Vec<u8>> {
        let Some(job) = self.job(id) else {
            return Vec::new();
        };
        let job = job.lock().expect("job poisoned");
        job.epochs
            .iter()
            .flat_map(|e| {
                let sk = e.keypair.private_key();
                [sk.p(), sk.q(), sk.lambda(), sk.mu()].map(|v| v.to_bytes_be())
            })
            .collect()
    }
}

fn reject(fx: &mut Effects, job: JobId, to: Address, code: ErrorCode, detail: &str) {
    let payload = ErrorPayload {
        code,
        detail: detail.to_string(),
    };
    // the reply carries no token: the sender failed to prove it holds one
    fx.outbound.push(Envelope::new(
        to.clone(),
        Frame::new(MessageType::Error, job, AuthToken([0; 32]), payload.encode()),
    ));
    fx.events.push(JobEvent {
        job,
        event: CoordinatorEvent::Rejected {
            to,
            code,
            detail: detail.to_string(),
        },
    });
}

impl Job {
    fn emit(&mut self, event: CoordinatorEvent) {
        let job = self.cfg.job_id;
        self.out.events.push(JobEvent { job, event });
    }

    fn send(&mut self, to: &str, kind: MessageType, payload: Vec<u8>) {
        let frame = Frame::new(kind, self.cfg.job_id, self.cfg.token, payload);
        self.out.outbound.push(Envelope::new(Address::participant(to), frame));
    }

    fn error_to(&mut self, to: &str, code: ErrorCode, detail: impl Into<String>) {
        let payload = ErrorPayload {
            code,
            detail: detail.into(),
        };
        self.send(to, MessageType::Error, payload.encode());
    }

    fn member_names(&self) -> Vec<String> {
        match &self.topology {
            Some(t) => t.participants().iter().map(|p| p.name.clone()).collect(),
            None => self.registered.iter().map(|p| p.name.clone()).collect(),
        }
    }

    fn broadcast(&mut self, kind: MessageType, payload: Vec<u8>, skip_suspects: bool) {
        for name in self.member_names() {
            if skip_suspects && self.suspects.contains_key(&name) {
                continue;
            }
            self.send(&name, kind, payload.clone());
        }
    }

    fn parties(&self) -> usize {
        self.topology.as_ref().map_or(0, |t| t.len())
    }

    fn key_for(&self, round: u32) -> Option<&EpochKey> {
        self.epochs.iter().rev().find(|e| e.effective_round <= round)
    }

    fn on_frame(&mut self, from: Address, frame: Frame, now: Duration) {
        let Address::Participant(name) = from else {
            return;
        };
        if self.last_seen.contains_key(&name) {
            self.last_seen.insert(name.clone(), now);
        }
        match frame.kind {
            MessageType::Register => match RegisterPayload::decode(&frame.payload) {
                Ok(p) => self.register(p, now),
                Err(e) => self.error_to(&name, ErrorCode::MALFORMED, e.to_string()),
            },
            MessageType::AggSubmit => self.on_submit(&name, &frame.payload, now),
            MessageType::Heartbeat => self.on_heartbeat(&name, now),
            MessageType::Error => {
                if let Ok(p) = ErrorPayload::decode(&frame.payload) {
                    self.on_learner_error(&name, p);
                }
            }
            other => self.error_to(
                &name,
                ErrorCode::PROTOCOL,
                format!("{other:?} is not accepted by the coordinator"),
            ),
        }
    }

    fn register(&mut self, p: RegisterPayload, now: Duration) {
        if self.status != JobStatus::Forming {
            let job = self.cfg.job_id;
            reject(
                &mut self.out,
                job,
                Address::participant(&p.name),
                ErrorCode::REJECTED,
                "job is not accepting members",
            );
            return;
        }
        if self.registered.iter().any(|q| q.name == p.name) {
            let job = self.cfg.job_id;
            reject(
                &mut self.out,
                job,
                Address::participant(&p.name),
                ErrorCode::REJECTED,
                "name already registered",
            );
            return;
        }
        let mut participant = Participant::new(p.name.clone(), p.endpoint);
        if let Some(tag) = p.location_tag {
            participant = participant.with_location(tag);
        }
        self.registered.push(participant);
        self.emit(CoordinatorEvent::Registered { name: p.name });
        if self.registered.len() == self.cfg.expected_members {
            self.start(now);
        }
    }

    fn start(&mut self, now: Duration) {
        let topology = match RingTopology::build(self.registered.clone(), self.cfg.strategy) {
            Ok(t) => t,
            Err(e) => return self.abort(format!("topology: {e}")),
        };
        self.round = 1;
        self.topology = Some(topology);
        self.rotate(self.round, now);
        if self.status == JobStatus::Aborted {
            return;
        }
        self.status = JobStatus::Running;
        for name in self.member_names() {
            self.last_seen.insert(name, now);
        }
        self.submissions = Some(self.new_submission_set());
        self.send_assignments();
        let key = self.epochs.last().expect("key generated");
        let payload = PubKeyPayload {
            epoch: key.epoch,
            effective_round: key.effective_round,
            key: key.keypair.public_key().clone(),
        }
        .encode();
        self.broadcast(MessageType::PubKey, payload, false);
        let (parties, round) = (self.parties(), self.round);
        self.emit(CoordinatorEvent::Started { parties, round });
    }

    fn new_submission_set(&self) -> SubmissionSet {
        SubmissionSet::new(self.cfg.protocol, self.parties(), self.round, self.cfg.vector_length)
    }

    fn send_assignments(&mut self) {
        let topology = self.topology.clone().expect("topology built");
        let members: Vec<MemberEntry> = topology
            .ranks()
            .map(|(rank, p)| MemberEntry {
                rank,
                name: p.name.clone(),
                endpoint: p.endpoint.clone(),
            })
            .collect();
        for m in &members {
            let payload = TopologyAssignPayload {
                start_round: self.round,
                protocol: self.cfg.protocol,
                your_rank: m.rank,
                vector_length: self.cfg.vector_length as u32,
                total_rounds: self.cfg.total_rounds,
                codec: self.cfg.codec,
                members: members.clone(),
            };
            self.send(&m.name, MessageType::TopologyAssign, payload.encode());
        }
    }

    /// Generates the next epoch's key, effective from `effective_round`.
    fn rotate(&mut self, effective_round: u32, now: Duration) {
        let mut seed = [0u8; 32];
        self.key_rng.fill_bytes(&mut seed);
        let keypair = match KeyPair::generate(self.cfg.key_bits, Some(seed)) {
            Ok(k) => k,
            Err(e) => return self.abort(format!("key generation: {e}")),
        };
        let epoch = self.epochs.last().map_or(1, |e| e.epoch + 1);
        self.epochs.push(EpochKey {
            epoch,
            effective_round,
            keypair,
        });
        self.rotated_at = now;
        if epoch > 1 {
            let payload = PubKeyPayload {
                epoch,
                effective_round,
                key: self.epochs.last().unwrap().keypair.public_key().clone(),
            }
            .encode();
            self.broadcast(MessageType::PubKey, payload, true);
            self.emit(CoordinatorEvent::KeyRotated { epoch, effective_round });
        }
    }

    fn rotation_due(&self, now: Duration) -> bool {
        match self.cfg.rotation {
            RotationPolicy::PerJob => false,
            RotationPolicy::PerEpoch { rounds } => self.completed % rounds == 0,
            RotationPolicy::EveryMinutes(m) => now.saturating_sub(self.rotated_at) >= Duration::from_secs(m * 60),
        }
    }

    fn on_submit(&mut self, from: &str, payload: &[u8], now: Duration) {
        let Ok(msg_round) = wire::peek_aggregate_round(payload) else {
            return self.error_to(from, ErrorCode::MALFORMED, "unreadable submission");
        };
        if msg_round < self.round {
            let current = self.key_for(self.round).map(|e| e.epoch);
            let theirs = self.key_for(msg_round).map(|e| e.epoch);
            if theirs != current {
                self.error_to(
                    from,
                    ErrorCode::STALE_EPOCH,
                    format!("round {msg_round} belongs to a retired key epoch"),
                );
            }
            // otherwise a leftover from an interrupted round; restarts never splice
            return;
        }
        if msg_round > self.round || self.status != JobStatus::Running {
            return self.error_to(from, ErrorCode::PROTOCOL, format!("no open round {msg_round}"));
        }
        let Some(key) = self.key_for(msg_round).map(|e| e.keypair.public_key().clone()) else {
            return self.error_to(from, ErrorCode::PROTOCOL, "no key for round");
        };
        let msg = match wire::decode_aggregate(self.cfg.job_id, payload, &key) {
            Ok(m) => m,
            Err(e) => return self.error_to(from, ErrorCode::MALFORMED, e.to_string()),
        };
        let expected_rank = self.topology.as_ref().and_then(|t| t.rank_of(from));
        if expected_rank != Some(msg.sender) {
            return self.error_to(from, ErrorCode::PROTOCOL, "sender rank does not match connection");
        }
        let set = self.submissions.as_mut().expect("running job has a submission set");
        match set.add(&key, msg) {
            Ok(true) => self.finish_round(now),
            Ok(false) => {}
            Err(e) => self.error_to(from, ErrorCode::PROTOCOL, e.to_string()),
        }
    }

    fn finish_round(&mut self, now: Duration) {
        let set = self.submissions.take().expect("submission set");
        let round = self.round;
        let aggregate = match set.aggregate() {
            Ok(a) => a,
            Err(e) => {
                let reason = e.to_string();
                self.emit(CoordinatorEvent::RoundFailed {
                    round,
                    reason: reason.clone(),
                });
                let code = if matches!(e, SubmissionError::Divergent(_)) {
                    ErrorCode::DIVERGENT
                } else {
                    ErrorCode::PROTOCOL
                };
                return self.abort_with(code, reason);
            }
        };
        let parties = self.parties();
        let epoch = self.key_for(round).expect("key for open round");
        let (epoch_no, keypair) = (epoch.epoch, &epoch.keypair);
        let started = Instant::now();
        let residues: Result<Vec<_>, _> = aggregate.iter().map(|c| keypair.private_key().decrypt(c)).collect();
        let decoded = residues.map_err(|e| e.to_string()).and_then(|r| {
            codec::decode_sum(&self.cfg.codec, keypair.public_key().n(), &r, parties as u32).map_err(|e| e.to_string())
        });
        let decrypt_time = started.elapsed();
        let result = match decoded {
            Ok(v) => v,
            Err(reason) => {
                self.emit(CoordinatorEvent::RoundFailed {
                    round,
                    reason: reason.clone(),
                });
                return self.abort_with(ErrorCode::PROTOCOL, reason);
            }
        };
        self.audit.push(DecryptRecord {
            round,
            epoch: epoch_no,
            protocol: self.cfg.protocol,
            parties,
            submitters: set.submitters().collect(),
            elements: aggregate.len(),
        });
        self.completed += 1;
        self.emit(CoordinatorEvent::RoundCompleted {
            round,
            parties,
            decrypt_time,
            decryptions: aggregate.len(),
            result: result.clone(),
        });

        let finished = self.cfg.total_rounds != 0 && self.completed >= self.cfg.total_rounds;
        if !finished && self.rotation_due(now) {
            // learners must hold the new key before the result starts their next round
            self.rotate(round + 1, now);
        }
        self.broadcast(MessageType::Result, wire::encode_result(&result), true);
        if finished {
            self.status = JobStatus::Completed;
            self.emit(CoordinatorEvent::Completed);
        } else {
            self.round += 1;
            self.submissions = Some(self.new_submission_set());
        }
    }

    fn on_heartbeat(&mut self, from: &str, now: Duration) {
        if !self.last_seen.contains_key(from) {
            return;
        }
        if self.suspects.remove(from).is_some() {
            self.emit(CoordinatorEvent::Reconnected { name: from.to_string() });
            if self.suspects.is_empty() && self.status == JobStatus::Paused {
                self.resume(now);
            }
        }
    }

    fn on_learner_error(&mut self, from: &str, p: ErrorPayload) {
        if !matches!(self.status, JobStatus::Running | JobStatus::Paused) {
            return;
        }
        let round = self.round;
        if p.code == ErrorCode::RED_FLAG {
            let ranks: Vec<Rank> = p
                .detail
                .split(',')
                .filter_map(|s| s.trim().parse::<u16>().ok())
                .filter_map(Rank::new)
                .collect();
            self.emit(CoordinatorEvent::RedFlag {
                reporter: from.to_string(),
                ranks,
            });
            self.emit(CoordinatorEvent::RoundFailed {
                round,
                reason: format!("collusion red flag from {from}: ranks {}", p.detail),
            });
            return self.abort_with(ErrorCode::RED_FLAG, format!("red flag: ranks {}", p.detail));
        }
        let reason = format!("{from} reported error {}: {}", p.code.0, p.detail);
        self.emit(CoordinatorEvent::RoundFailed {
            round,
            reason: reason.clone(),
        });
        self.abort(reason);
    }

    fn tick(&mut self, now: Duration) {
        if !matches!(self.status, JobStatus::Running | JobStatus::Paused) {
            return;
        }
        let limit = self.cfg.heartbeat.failure_after();
        let mut newly = Vec::new();
        for name in self.member_names() {
            if self.suspects.contains_key(&name) {
                continue;
            }
            let seen = self.last_seen.get(&name).copied().unwrap_or(now);
            if now.saturating_sub(seen) > limit {
                newly.push(name);
            }
        }
        for name in newly {
            self.suspects.insert(name.clone(), now);
            self.emit(CoordinatorEvent::LearnerSuspected { name });
        }
        if !self.suspects.is_empty() && self.status == JobStatus::Running {
            self.status = JobStatus::Paused;
            self.submissions = None;
            let round = self.round;
            self.broadcast(MessageType::Pause, wire::encode_u32(round), true);
            self.emit(CoordinatorEvent::Paused { round });
        }
        let grace = self.cfg.heartbeat.grace;
        let expired: Vec<String> = self
            .suspects
            .iter()
            .filter(|(_, since)| now.saturating_sub(**since) >= grace)
            .map(|(n, _)| n.clone())
            .collect();
        if !expired.is_empty() {
            self.eliminate(expired, now);
        }
    }

    fn resume(&mut self, _now: Duration) {
        // the interrupted round is discarded and rerun under a fresh number
        self.round += 1;
        self.status = JobStatus::Running;
        self.submissions = Some(self.new_submission_set());
        let round = self.round;
        self.broadcast(MessageType::Resume, wire::encode_u32(round), false);
        self.emit(CoordinatorEvent::Resumed { round });
    }

    fn eliminate(&mut self, names: Vec<String>, now: Duration) {
        for n in &names {
            self.suspects.remove(n);
            self.last_seen.remove(n);
        }
        self.registered.retain(|p| !names.contains(&p.name));
        self.emit(CoordinatorEvent::Eliminated { names: names.clone() });
        for n in &names {
            self.error_to(n, ErrorCode::REJECTED, "eliminated from the ring");
        }
        if self.registered.len() < 2 {
            self.topology = RingTopology::build(self.registered.clone(), self.cfg.strategy).ok();
            return self.abort(format!("{} surviving member(s); a ring needs 2", self.registered.len()));
        }
        let topology = match RingTopology::build(self.registered.clone(), self.cfg.strategy) {
            Ok(t) => t,
            Err(e) => return self.abort(format!("rebuild: {e}")),
        };
        self.topology = Some(topology);
        if !self.suspects.is_empty() {
            // others are still within their grace period
            return;
        }
        self.round += 1;
        self.status = JobStatus::Running;
        self.submissions = Some(self.new_submission_set());
        for name in self.member_names() {
            self.last_seen.insert(name, now);
        }
        self.send_assignments();
        let (parties, start_round) = (self.parties(), self.round);
        self.emit(CoordinatorEvent::Rebuilt { parties, start_round });
    }

    fn abort(&mut self, reason: String) {
        self.abort_with(ErrorCode::ABORTED, reason)
    }

    fn abort_with(&mut self, code: ErrorCode, reason: String) {
        if self.status == JobStatus::Aborted {
            return;
        }
        self.status = JobStatus::Aborted;
        self.submissions = None;
        let payload = ErrorPayload {
            code: ErrorCode::ABORTED,
            detail: format!("[{}] {reason}", code.0),
        }
        .encode();
        self.broadcast(MessageType::Error, payload, true);
        self.emit(CoordinatorEvent::Aborted { reason });
    }
}
