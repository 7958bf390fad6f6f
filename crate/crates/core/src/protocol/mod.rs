// SPDX-License-Identifier: Apache-2.0

//! Per-learner aggregation state machines.
//!
//! Each protocol consumes one inbound [`AggregateMessage`] at a time and
//! answers with [`Action`]s: messages for ring neighbours or peers, and the
//! final submission for the coordinator's decryptor. The engines never see
//! plaintext from anyone but their own learner.

mod allreduce;
mod broadcast;
mod collusion;
pub mod local;
mod ring;
mod submission;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use num_traits::Zero;
use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::codec::EncodedVector;
use crate::paillier::{Ciphertext, CryptoError, PublicKey};
use crate::topology::Rank;
use crate::wire::JobId;

pub use allreduce::AllReduceRound;
pub use broadcast::BroadcastRound;
pub use collusion::{detect_duplicates, CollusionReport, DuplicateVerdict};
pub use ring::RingRound;
pub use submission::{SubmissionError, SubmissionSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Protocol {
    Ring,
    Broadcast,
    AllReduce,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Ring, Protocol::Broadcast, Protocol::AllReduce];

    pub fn code(self) -> u8 {
        match self {
            Self::Ring => 1,
            Self::Broadcast => 2,
            Self::AllReduce => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Self::Ring),
            2 => Some(Self::Broadcast),
            3 => Some(Self::AllReduce),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ring => "ring",
            Self::Broadcast => "broadcast",
            Self::AllReduce => "allreduce",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "ring" => Ok(Self::Ring),
            "broadcast" => Ok(Self::Broadcast),
            "allreduce" => Ok(Self::AllReduce),
            _ => Err(format!("unknown protocol {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Idle,
    Aggregating,
    AwaitingDecryption,
    Paused,
    Done,
    Failed,
}

impl Phase {
    fn can_become(self, next: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, next),
            (Idle, Aggregating)
                | (Aggregating, AwaitingDecryption)
                | (AwaitingDecryption, Done)
                | (Aggregating, Paused)
                | (Paused, Aggregating)
        ) || (next == Failed && !matches!(self, Done | Failed))
    }
}

/// Bookkeeping for one learner's participation in one round.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub job_id: JobId,
    pub round: u32,
    pub protocol: Protocol,
    phase: Phase,
    /// `(sender, chunk index)`; chunk index 0 stands for a full vector.
    received: BTreeSet<(Rank, u16)>,
}

impl RoundState {
    pub fn new(job_id: JobId, round: u32, protocol: Protocol) -> Self {
        Self {
            job_id,
            round,
            protocol,
            phase: Phase::Idle,
            received: BTreeSet::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn received(&self) -> &BTreeSet<(Rank, u16)> {
        &self.received
    }

    pub fn transition(&mut self, next: Phase) -> Result<(), ProtocolError> {
        if !self.phase.can_become(next) {
            return Err(ProtocolError::IllegalTransition {
                from: self.phase,
                to: next,
            });
        }
        self.phase = next;
        Ok(())
    }

    /// Aggregating -> Paused. Returns false if the round is in any other phase.
    pub fn pause(&mut self) -> bool {
        self.transition(Phase::Paused).is_ok()
    }

    pub fn resume(&mut self) -> bool {
        self.phase == Phase::Paused && self.transition(Phase::Aggregating).is_ok()
    }

    /// AwaitingDecryption -> Done, once the averaged result arrives.
    pub fn complete(&mut self) -> Result<(), ProtocolError> {
        self.transition(Phase::Done)
    }

    fn fail(&mut self) {
        let _ = self.transition(Phase::Failed);
    }

    fn record(&mut self, sender: Rank, chunk: u16) -> Result<(), ProtocolError> {
        if !self.received.insert((sender, chunk)) {
            return Err(ProtocolError::DuplicateSender(sender));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PayloadKind {
    FullVector,
    /// 1-based chunk index and all-reduce step.
    Chunk {
        index: u16,
        step: u16,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregateMessage {
    pub job_id: JobId,
    pub round: u32,
    pub sender: Rank,
    pub kind: PayloadKind,
    pub ciphertexts: Vec<Ciphertext>,
}

/// Outbound effect of an engine step. `contributors` is the formal sum of
/// the payload: the ranks whose plaintext is folded into it. It never leaves
/// the process; simulations use it for transcript analysis.
#[derive(Debug, Clone)]
pub enum Action {
    Send {
        to: Rank,
        message: AggregateMessage,
        contributors: BTreeSet<Rank>,
    },
    Submit {
        message: AggregateMessage,
        contributors: BTreeSet<Rank>,
    },
}

impl Action {
    pub fn message(&self) -> &AggregateMessage {
        match self {
            Action::Send { message, .. } | Action::Submit { message, .. } => message,
        }
    }

    pub fn contributors(&self) -> &BTreeSet<Rank> {
        match self {
            Action::Send { contributors, .. } | Action::Submit { contributors, .. } => contributors,
        }
    }
}

/// How a learner contributes its own vector. Anything other than `Honest`
/// is a deviation used to exercise collusion analysis.
#[derive(Debug, Clone, Default)]
pub enum ContributionMode {
    #[default]
    Honest,
    /// Contribute nothing: forward inbound payloads unchanged and send
    /// encryptions of zero where the learner would originate a payload.
    Withhold,
    /// Send these ciphertexts verbatim as the learner's own vector.
    Replay(Vec<Ciphertext>),
}

#[derive(Debug, Clone, Copy)]
pub struct RoundContext {
    pub job_id: JobId,
    pub round: u32,
    pub rank: Rank,
    pub parties: usize,
}

/// Real CPU cost of the gradient transformation: encryption plus
/// ciphertext additions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransformStats {
    pub encryptions: usize,
    pub additions: usize,
    pub elapsed: Duration,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("message for round {got}, expected round {expected}")]
    WrongRound { expected: u32, got: u32 },
    #[error("message for another job")]
    WrongJob,
    #[error("unexpected sender {got} (expected {expected:?})")]
    UnexpectedSender { expected: Option<Rank>, got: Rank },
    #[error("second message from rank {0}")]
    DuplicateSender(Rank),
    #[error("payload has {got} ciphertexts, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("chunk {got_index} at step {got_step} arrived out of order (expected chunk {expected_index} at step {expected_step})")]
    OutOfOrder {
        expected_step: u16,
        expected_index: u16,
        got_step: u16,
        got_index: u16,
    },
    #[error("payload kind not valid for this protocol")]
    UnexpectedPayload,
    #[error("message received while {0:?}")]
    NotAggregating(Phase),
    #[error("illegal phase transition {from:?} -> {to:?}")]
    IllegalTransition { from: Phase, to: Phase },
    #[error("collusion red flag: {0}")]
    RedFlag(CollusionReport),
    #[error("a ring needs at least 2 parties")]
    TooFewParties,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Common surface of the three protocol engines.
pub trait AggregationRound: Send {
    /// Consumes one inbound payload. `inbound` is the formal sum carried by
    /// the payload; pass an empty set when it is not tracked.
    fn on_message_tracked(
        &mut self,
        message: AggregateMessage,
        inbound: BTreeSet<Rank>,
    ) -> Result<Vec<Action>, ProtocolError>;

    fn on_message(&mut self, message: AggregateMessage) -> Result<Vec<Action>, ProtocolError> {
        self.on_message_tracked(message, BTreeSet::new())
    }

    fn state(&self) -> &RoundState;
    fn state_mut(&mut self) -> &mut RoundState;
    fn stats(&self) -> TransformStats;
}

/// Starts `protocol` for one learner and returns the engine plus its first actions.
pub fn start_round<R: RngCore + CryptoRng + ?Sized>(
    protocol: Protocol,
    ctx: RoundContext,
    key: &PublicKey,
    own: &EncodedVector,
    mode: ContributionMode,
    rng: &mut R,
) -> Result<(Box<dyn AggregationRound>, Vec<Action>), ProtocolError> {
    Ok(match protocol {
        Protocol::Ring => {
            let (engine, actions) = RingRound::start(ctx, key, own, mode, rng)?;
            (Box::new(engine), actions)
        }
        Protocol::Broadcast => {
            let (engine, actions) = BroadcastRound::start(ctx, key, own, mode, rng)?;
            (Box::new(engine), actions)
        }
        Protocol::AllReduce => {
            let (engine, actions) = AllReduceRound::start(ctx, key, own, mode, rng)?;
            (Box::new(engine), actions)
        }
    })
}

/// Encrypts the learner's own vector according to `mode`, with fresh
/// randomness for every element.
fn encrypt_own<R: RngCore + CryptoRng + ?Sized>(
    key: &PublicKey,
    own: &EncodedVector,
    mode: &ContributionMode,
    rng: &mut R,
    stats: &mut TransformStats,
) -> Result<Vec<Ciphertext>, ProtocolError> {
    let started = Instant::now();
    let out = match mode {
        ContributionMode::Honest => own
            .elements()
            .iter()
            .map(|m| key.encrypt(m, rng))
            .collect::<Result<Vec<_>, _>>()?,
        ContributionMode::Withhold => {
            let zero = BigUint::zero();
            (0..own.len())
                .map(|_| key.encrypt(&zero, rng))
                .collect::<Result<Vec<_>, _>>()?
        }
        ContributionMode::Replay(cts) => {
            if cts.len() != own.len() {
                return Err(ProtocolError::LengthMismatch {
                    expected: own.len(),
                    got: cts.len(),
                });
            }
            cts.clone()
        }
    };
    if !matches!(mode, ContributionMode::Replay(_)) {
        stats.encryptions += out.len();
    }
    stats.elapsed += started.elapsed();
    Ok(out)
}

fn timed_add(
    key: &PublicKey,
    a: &[Ciphertext],
    b: &[Ciphertext],
    stats: &mut TransformStats,
) -> Result<Vec<Ciphertext>, ProtocolError> {
    let started = Instant::now();
    let sum = key.add_vectors(a, b)?;
    stats.additions += sum.len();
    stats.elapsed += started.elapsed();
    Ok(sum)
}

fn check_common(state: &RoundState, msg: &AggregateMessage) -> Result<(), ProtocolError> {
    if msg.job_id != state.job_id {
        return Err(ProtocolError::WrongJob);
    }
    if msg.round != state.round {
        return Err(ProtocolError::WrongRound {
            expected: state.round,
            got: msg.round,
        });
    }
    if state.phase() != Phase::Aggregating {
        return Err(ProtocolError::NotAggregating(state.phase()));
    }
    Ok(())
}

fn check_key(key: &PublicKey, cts: &[Ciphertext]) -> Result<(), ProtocolError> {
    if cts.iter().any(|c| c.fingerprint() != key.fingerprint()) {
        return Err(CryptoError::KeyMismatch.into());
    }
    Ok(())
}

fn contributes(mode: &ContributionMode) -> bool {
    matches!(mode, ContributionMode::Honest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_graph() {
        let mut s = RoundState::new(JobId::default(), 1, Protocol::Ring);
        assert!(s.transition(Phase::Done).is_err());
        s.transition(Phase::Aggregating).unwrap();
        assert!(s.pause());
        assert!(!s.pause());
        assert!(s.resume());
        s.transition(Phase::AwaitingDecryption).unwrap();
        assert!(!s.pause());
        s.complete().unwrap();
        s.fail();
        assert_eq!(s.phase(), Phase::Done);

        let mut s = RoundState::new(JobId::default(), 1, Protocol::Ring);
        s.fail();
        assert_eq!(s.phase(), Phase::Failed);
        assert!(s.transition(Phase::Aggregating).is_err());
    }

    #[test]
    fn protocol_names() {
        for p in Protocol::ALL {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
            assert_eq!(Protocol::from_code(p.code()), Some(p));
        }
        assert_eq!("All-Reduce".parse::<Protocol>().unwrap(), Protocol::AllReduce);
        assert!("gossip".parse::<Protocol>().is_err());
    }
}
