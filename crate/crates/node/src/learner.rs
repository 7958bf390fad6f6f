// SPDX-License-Identifier: Apache-2.0

//! Learner client: registers, runs one protocol engine per round, applies
//! the averaged result and keeps the coordinator's heartbeat monitor fed.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use fedcrypt_core::codec::{self, CodecConfig};
use fedcrypt_core::paillier::{Ciphertext, PublicKey};
use fedcrypt_core::protocol::{
    start_round, Action, AggregationRound, ContributionMode, Phase, Protocol, ProtocolError, RoundContext,
    TransformStats,
};
use fedcrypt_core::topology::Rank;
use fedcrypt_core::wire::{
    self, AuthToken, ErrorCode, ErrorPayload, Frame, JobId, MemberEntry, MessageType, PubKeyPayload, RegisterPayload,
    TopologyAssignPayload,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::LearnerConfig;
use crate::envelope::{Address, Envelope};
use crate::model::GradientSource;

#[derive(Debug, Clone)]
pub struct LearnerOptions {
    pub name: String,
    pub endpoint: String,
    pub location: Option<String>,
    pub job_id: JobId,
    pub token: AuthToken,
    pub heartbeat_interval: Duration,
    /// Seeds encryption randomness; `None` draws from the operating system.
    pub rng_seed: Option<u64>,
}

impl LearnerOptions {
    pub fn new(name: impl Into<String>, job_id: JobId, token: AuthToken) -> Self {
        let name = name.into();
        Self {
            endpoint: name.clone(),
            name,
            location: None,
            job_id,
            token,
            heartbeat_interval: Duration::from_secs(1),
            rng_seed: None,
        }
    }

    pub fn from_config(cfg: &LearnerConfig) -> Self {
        Self {
            name: cfg.name.clone(),
            endpoint: cfg.endpoint.clone(),
            location: cfg.location.clone(),
            job_id: cfg.job_id,
            token: cfg.token,
            heartbeat_interval: Duration::from_secs(1),
            rng_seed: None,
        }
    }
}

/// Ciphertext vectors shared by colluders replaying one encryption, keyed by round.
pub type SharedCiphertexts = Arc<Mutex<BTreeMap<u32, Vec<Ciphertext>>>>;

/// Deviations available for collusion experiments.
#[derive(Debug, Clone, Default)]
pub enum Behaviour {
    #[default]
    Honest,
    /// Forward inbound payloads without adding an own vector.
    PassThrough,
    /// Send the same ciphertext vector as every other learner holding the same slot.
    Duplicate(SharedCiphertexts),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerStatus {
    Unregistered,
    Waiting,
    Aggregating,
    AwaitingResult,
    Paused,
    Finished,
    Aborted,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LearnerEvent {
    Assigned {
        rank: Rank,
        parties: usize,
        start_round: u32,
    },
    KeyInstalled {
        epoch: u32,
        effective_round: u32,
    },
    RoundStarted {
        round: u32,
        rank: Rank,
    },
    TransformDone {
        round: u32,
        stats: TransformStats,
    },
    ResultApplied {
        round: u32,
        average: Vec<f64>,
    },
    Paused {
        round: u32,
    },
    Resumed {
        round: u32,
    },
    RedFlag {
        round: u32,
        ranks: Vec<Rank>,
    },
    ProtocolFailure {
        round: u32,
        reason: String,
    },
    CoordinatorError {
        code: ErrorCode,
        detail: String,
    },
    Aborted {
        reason: String,
    },
    Finished,
}

#[derive(Debug, Default)]
pub struct LearnerOutput {
    pub outbound: Vec<Envelope>,
    pub events: Vec<LearnerEvent>,
}

struct EpochKey {
    epoch: u32,
    effective_round: u32,
    key: PublicKey,
}

pub struct Learner {
    opts: LearnerOptions,
    source: Box<dyn GradientSource>,
    rng: ChaCha20Rng,
    behaviour: Behaviour,
    status: LearnerStatus,
    rank: Option<Rank>,
    members: Vec<MemberEntry>,
    protocol: Protocol,
    vector_length: usize,
    total_rounds: u32,
    codec: CodecConfig,
    keys: Vec<EpochKey>,
    round: u32,
    completed: u32,
    engine: Option<Box<dyn AggregationRound>>,
    transform_reported: bool,
    early: BTreeMap<u32, Vec<(Vec<u8>, Option<BTreeSet<Rank>>)>>,
    next_heartbeat: Duration,
    heartbeat_seq: u64,
    out: LearnerOutput,
}

impl Learner {
    pub fn new(opts: LearnerOptions, source: Box<dyn GradientSource>) -> Self {
        let rng = match opts.rng_seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        Self {
            opts,
            source,
            rng,
            behaviour: Behaviour::Honest,
            status: LearnerStatus::Unregistered,
            rank: None,
            members: Vec::new(),
            protocol: Protocol::Ring,
            vector_length: 0,
            total_rounds: 0,
            codec: CodecConfig::default(),
            keys: Vec::new(),
            round: 0,
            completed: 0,
            engine: None,
            transform_reported: false,
            early: BTreeMap::new(),
            next_heartbeat: Duration::ZERO,
            heartbeat_seq: 0,
            out: LearnerOutput::default(),
        }
    }

    pub fn name(&self) -> &str {
        &self.opts.name
    }

    pub fn status(&self) -> LearnerStatus {
        self.status
    }

    pub fn rank(&self) -> Option<Rank> {
        self.rank
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn completed_rounds(&self) -> u32 {
        self.completed
    }

    pub fn parameters(&self) -> &[f64] {
        self.source.parameters()
    }

    pub fn set_behaviour(&mut self, behaviour: Behaviour) {
        self.behaviour = behaviour;
    }

    pub fn is_done(&self) -> bool {
        matches!(
            self.status,
            LearnerStatus::Finished | LearnerStatus::Aborted | LearnerStatus::Failed
        )
    }

    fn frame(&self, kind: MessageType, payload: Vec<u8>) -> Frame {
        Frame::new(kind, self.opts.job_id, self.opts.token, payload)
    }

    fn to_coordinator(&mut self, kind: MessageType, payload: Vec<u8>) {
        let frame = self.frame(kind, payload);
        self.out.outbound.push(Envelope::new(Address::Coordinator, frame));
    }

    fn take(&mut self) -> LearnerOutput {
        std::mem::take(&mut self.out)
    }

    /// Sends REGISTER and arms the heartbeat timer.
    pub fn register(&mut self, now: Duration) -> LearnerOutput {
        let payload = RegisterPayload {
            name: self.opts.name.clone(),
            location_tag: self.opts.location.clone(),
            endpoint: self.opts.endpoint.clone(),
        };
        self.to_coordinator(MessageType::Register, payload.encode());
        self.status = LearnerStatus::Waiting;
        self.next_heartbeat = now + self.opts.heartbeat_interval;
        self.take()
    }

    /// Emits a heartbeat when one is due.
    pub fn tick(&mut self, now: Duration) -> LearnerOutput {
        let live = !matches!(
            self.status,
            LearnerStatus::Unregistered | LearnerStatus::Finished | LearnerStatus::Aborted
        );
        if live && now >= self.next_heartbeat {
            self.heartbeat_seq += 1;
            self.to_coordinator(MessageType::Heartbeat, wire::encode_heartbeat(self.heartbeat_seq));
            while self.next_heartbeat <= now {
                self.next_heartbeat += self.opts.heartbeat_interval;
            }
        }
        self.take()
    }

    pub fn next_heartbeat(&self) -> Duration {
        self.next_heartbeat
    }

    pub fn handle_frame(&mut self, frame: Frame, now: Duration) -> LearnerOutput {
        self.handle_frame_tracked(frame, None, now)
    }

    /// Like [`Learner::handle_frame`], with the formal sum carried by an
    /// aggregate payload when the transport tracks one.
    pub fn handle_frame_tracked(
        &mut self,
        frame: Frame,
        contributors: Option<BTreeSet<Rank>>,
        _now: Duration,
    ) -> LearnerOutput {
        if frame.job_id != self.opts.job_id {
            log::warn!("{}: frame for foreign job dropped", self.opts.name);
            return self.take();
        }
        if frame.kind != MessageType::Error && !self.opts.token.ct_eq(&frame.token) {
            log::warn!("{}: unauthenticated {:?} dropped", self.opts.name, frame.kind);
            return self.take();
        }
        match frame.kind {
            MessageType::TopologyAssign => match TopologyAssignPayload::decode(&frame.payload) {
                Ok(p) => self.on_assign(p),
                Err(e) => log::warn!("{}: bad TOPOLOGY_ASSIGN: {e}", self.opts.name),
            },
            MessageType::PubKey => match PubKeyPayload::decode(&frame.payload) {
                Ok(p) => self.on_pubkey(p),
                Err(e) => log::warn!("{}: bad PUBKEY: {e}", self.opts.name),
            },
            MessageType::AggMsg => self.on_aggregate(frame.payload, contributors),
            MessageType::Result => match wire::decode_result(&frame.payload) {
                Ok(v) => self.on_result(v),
                Err(e) => log::warn!("{}: bad RESULT: {e}", self.opts.name),
            },
            MessageType::Pause => {
                if let Ok(r) = wire::decode_u32(&frame.payload, "PAUSE") {
                    self.on_pause(r);
                }
            }
            MessageType::Resume => {
                if let Ok(r) = wire::decode_u32(&frame.payload, "RESUME") {
                    self.on_resume(r);
                }
            }
            MessageType::Error => {
                if let Ok(p) = ErrorPayload::decode(&frame.payload) {
                    self.on_error(p);
                }
            }
            MessageType::Heartbeat | MessageType::Register | MessageType::AggSubmit => {
                log::debug!("{}: ignoring {:?}", self.opts.name, frame.kind);
            }
        }
        self.take()
    }

    fn on_assign(&mut self, p: TopologyAssignPayload) {
        if matches!(self.status, LearnerStatus::Finished | LearnerStatus::Aborted) {
            return;
        }
        self.rank = Some(p.your_rank);
        self.members = p.members;
        self.protocol = p.protocol;
        self.vector_length = p.vector_length as usize;
        self.total_rounds = p.total_rounds;
        self.codec = p.codec;
        self.round = p.start_round;
        self.engine = None;
        self.status = LearnerStatus::Waiting;
        let start = p.start_round;
        self.early.retain(|&r, _| r >= start);
        self.out.events.push(LearnerEvent::Assigned {
            rank: p.your_rank,
            parties: self.members.len(),
            start_round: start,
        });
        self.try_start();
    }

    fn on_pubkey(&mut self, p: PubKeyPayload) {
        self.out.events.push(LearnerEvent::KeyInstalled {
            epoch: p.epoch,
            effective_round: p.effective_round,
        });
        self.keys.retain(|k| k.epoch != p.epoch);
        self.keys.push(EpochKey {
            epoch: p.epoch,
            effective_round: p.effective_round,
            key: p.key,
        });
        self.keys.sort_by_key(|k| k.effective_round);
        self.try_start();
    }

    fn key_for(&self, round: u32) -> Option<&PublicKey> {
        self.keys
            .iter()
            .rev()
            .find(|k| k.effective_round <= round)
            .map(|k| &k.key)
    }

    fn peer_name(&self, rank: Rank) -> Option<String> {
        self.members.iter().find(|m| m.rank == rank).map(|m| m.name.clone())
    }

    fn try_start(&mut self) {
        if self.status != LearnerStatus::Waiting || self.engine.is_some() {
            return;
        }
        let (Some(rank), Some(key)) = (self.rank, self.key_for(self.round).cloned()) else {
            return;
        };
        let round = self.round;
        let gradient = self.source.gradient();
        let encoded = match codec::encode(&self.codec, key.n(), &gradient) {
            Ok(e) => e,
            Err(e) => return self.fail(round, format!("cannot encode gradient: {e}"), ErrorCode::PROTOCOL),
        };
        if encoded.len() != self.vector_length {
            return self.fail(
                round,
                format!(
                    "gradient has {} elements, job expects {}",
                    encoded.len(),
                    self.vector_length
                ),
                ErrorCode::PROTOCOL,
            );
        }
        let mode = match &self.behaviour {
            Behaviour::Honest => ContributionMode::Honest,
            Behaviour::PassThrough => ContributionMode::Withhold,
            Behaviour::Duplicate(slot) => {
                let mut slot = slot.lock().expect("collusion slot poisoned");
                let rng = &mut self.rng;
                let shared = slot.entry(round).or_insert_with(|| {
                    encoded
                        .elements()
                        .iter()
                        .map(|m| key.encrypt(m, rng).expect("encoded below n"))
                        .collect()
                });
                ContributionMode::Replay(shared.clone())
            }
        };
        let ctx = RoundContext {
            job_id: self.opts.job_id,
            round,
            rank,
            parties: self.members.len(),
        };
        match start_round(self.protocol, ctx, &key, &encoded, mode, &mut self.rng) {
            Ok((engine, actions)) => {
                self.engine = Some(engine);
                self.transform_reported = false;
                self.status = LearnerStatus::Aggregating;
                self.out.events.push(LearnerEvent::RoundStarted { round, rank });
                self.dispatch(actions, &key);
            }
            Err(e) => return self.engine_failed(round, e),
        }
        // messages that overtook our own start
        if let Some(pending) = self.early.remove(&round) {
            for (payload, contributors) in pending {
                if self.status != LearnerStatus::Aggregating && self.status != LearnerStatus::AwaitingResult {
                    break;
                }
                self.deliver(payload, contributors);
            }
        }
    }

    fn dispatch(&mut self, actions: Vec<Action>, key: &PublicKey) {
        let width = key.ciphertext_width();
        for action in actions {
            let (to, kind, message, contributors) = match action {
                Action::Send {
                    to,
                    message,
                    contributors,
                } => match self.peer_name(to) {
                    Some(name) => (Address::Participant(name), MessageType::AggMsg, message, contributors),
                    None => {
                        let round = self.round;
                        return self.fail(round, format!("no member with rank {to}"), ErrorCode::PROTOCOL);
                    }
                },
                Action::Submit { message, contributors } => {
                    (Address::Coordinator, MessageType::AggSubmit, message, contributors)
                }
            };
            let frame = self.frame(kind, wire::encode_aggregate(&message, width));
            let mut envelope = Envelope::new(to, frame);
            envelope.contributors = Some(contributors);
            self.out.outbound.push(envelope);
        }
        if let Some(engine) = &self.engine {
            if engine.state().phase() == Phase::AwaitingDecryption && !self.transform_reported {
                self.transform_reported = true;
                self.status = LearnerStatus::AwaitingResult;
                self.out.events.push(LearnerEvent::TransformDone {
                    round: self.round,
                    stats: engine.stats(),
                });
            }
        }
    }

    fn on_aggregate(&mut self, payload: Vec<u8>, contributors: Option<BTreeSet<Rank>>) {
        let Ok(round) = wire::peek_aggregate_round(&payload) else {
            return;
        };
        if matches!(
            self.status,
            LearnerStatus::Finished | LearnerStatus::Aborted | LearnerStatus::Failed
        ) || round < self.round
        {
            return;
        }
        let running = matches!(self.status, LearnerStatus::Aggregating | LearnerStatus::AwaitingResult);
        if round > self.round || (round == self.round && !running && self.status != LearnerStatus::Paused) {
            self.early.entry(round).or_default().push((payload, contributors));
            return;
        }
        if self.status == LearnerStatus::Paused {
            // the paused round restarts from scratch
            return;
        }
        self.deliver(payload, contributors);
    }

    fn deliver(&mut self, payload: Vec<u8>, contributors: Option<BTreeSet<Rank>>) {
        let round = self.round;
        let Some(key) = self.key_for(round).cloned() else {
            return;
        };
        let msg = match wire::decode_aggregate(self.opts.job_id, &payload, &key) {
            Ok(m) => m,
            Err(e) => return self.fail(round, format!("undecodable aggregate: {e}"), ErrorCode::MALFORMED),
        };
        let Some(engine) = self.engine.as_mut() else {
            return;
        };
        match engine.on_message_tracked(msg, contributors.unwrap_or_default()) {
            Ok(actions) => self.dispatch(actions, &key),
            Err(e) => self.engine_failed(round, e),
        }
    }

    fn engine_failed(&mut self, round: u32, e: ProtocolError) {
        if let ProtocolError::RedFlag(report) = &e {
            let ranks = report.ranks();
            let detail = ranks.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",");
            self.out.events.push(LearnerEvent::RedFlag { round, ranks });
            self.status = LearnerStatus::Failed;
            self.to_coordinator(
                MessageType::Error,
                ErrorPayload {
                    code: ErrorCode::RED_FLAG,
                    detail,
                }
                .encode(),
            );
            return;
        }
        self.fail(round, e.to_string(), ErrorCode::PROTOCOL);
    }

    fn fail(&mut self, round: u32, reason: String, code: ErrorCode) {
        log::warn!("{}: round {round} failed: {reason}", self.opts.name);
        self.status = LearnerStatus::Failed;
        self.out.events.push(LearnerEvent::ProtocolFailure {
            round,
            reason: reason.clone(),
        });
        self.to_coordinator(MessageType::Error, ErrorPayload { code, detail: reason }.encode());
    }

    fn on_result(&mut self, average: Vec<f64>) {
        if !matches!(self.status, LearnerStatus::Aggregating | LearnerStatus::AwaitingResult) {
            return;
        }
        if average.len() != self.vector_length {
            let round = self.round;
            return self.fail(round, "result length mismatch".into(), ErrorCode::PROTOCOL);
        }
        if let Some(engine) = self.engine.as_mut() {
            let _ = engine.state_mut().complete();
        }
        self.source.apply(&average);
        self.completed += 1;
        let round = self.round;
        self.out.events.push(LearnerEvent::ResultApplied { round, average });
        self.engine = None;
        if self.total_rounds != 0 && self.completed >= self.total_rounds {
            self.status = LearnerStatus::Finished;
            self.out.events.push(LearnerEvent::Finished);
            return;
        }
        self.round += 1;
        self.status = LearnerStatus::Waiting;
        let current = self.round;
        self.early.retain(|&r, _| r >= current);
        self.try_start();
    }

    fn on_pause(&mut self, round: u32) {
        if !matches!(
            self.status,
            LearnerStatus::Aggregating | LearnerStatus::AwaitingResult | LearnerStatus::Waiting
        ) {
            return;
        }
        if let Some(engine) = self.engine.as_mut() {
            engine.state_mut().pause();
        }
        self.status = LearnerStatus::Paused;
        self.out.events.push(LearnerEvent::Paused { round });
    }

    fn on_resume(&mut self, round: u32) {
        if matches!(
            self.status,
            LearnerStatus::Finished | LearnerStatus::Aborted | LearnerStatus::Unregistered
        ) {
            return;
        }
        self.round = round;
        self.engine = None;
        self.status = LearnerStatus::Waiting;
        self.early.retain(|&r, _| r >= round);
        self.out.events.push(LearnerEvent::Resumed { round });
        self.try_start();
    }

    fn on_error(&mut self, p: ErrorPayload) {
        if matches!(
            p.code,
            ErrorCode::ABORTED | ErrorCode::REJECTED | ErrorCode::UNAUTHORIZED
        ) {
            self.status = LearnerStatus::Aborted;
            self.engine = None;
            self.out.events.push(LearnerEvent::Aborted { reason: p.detail });
        } else {
            self.out.events.push(LearnerEvent::CoordinatorError {
                code: p.code,
                detail: p.detail,
            });
        }
    }
}
