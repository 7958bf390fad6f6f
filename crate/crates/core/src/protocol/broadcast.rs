// SPDX-License-Identifier: Apache-2.0

//! Broadcast: every learner sends its encrypted vector to all peers, checks
//! the received set for duplicates, sums, and submits.

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};

use super::{
    check_common, check_key, contributes, detect_duplicates, encrypt_own, timed_add, Action, AggregateMessage,
    AggregationRound, ContributionMode, DuplicateVerdict, PayloadKind, Phase, Protocol, ProtocolError, RoundContext,
    RoundState, TransformStats,
};
use crate::codec::EncodedVector;
use crate::paillier::{Ciphertext, PublicKey};
use crate::topology::Rank;

pub struct BroadcastRound {
    ctx: RoundContext,
    key: PublicKey,
    state: RoundState,
    own: Vec<Ciphertext>,
    mode: ContributionMode,
    inbox: BTreeMap<Rank, (Vec<Ciphertext>, BTreeSet<Rank>)>,
    stats: TransformStats,
}

impl BroadcastRound {
    pub fn start<R: RngCore + CryptoRng + ?Sized>(
        ctx: RoundContext,
        key: &PublicKey,
        own: &EncodedVector,
        mode: ContributionMode,
        rng: &mut R,
    ) -> Result<(Self, Vec<Action>), ProtocolError> {
        if ctx.parties < 2 {
            return Err(ProtocolError::TooFewParties);
        }
        let mut stats = TransformStats::default();
        let own_ct = encrypt_own(key, own, &mode, rng, &mut stats)?;
        let mut state = RoundState::new(ctx.job_id, ctx.round, Protocol::Broadcast);
        state.transition(Phase::Aggregating)?;
        let contributors = if contributes(&mode) {
            BTreeSet::from([ctx.rank])
        } else {
            BTreeSet::new()
        };
        let actions = (1..=ctx.parties as u16)
            .filter_map(Rank::new)
            .filter(|&r| r != ctx.rank)
            .map(|to| Action::Send {
                to,
                message: AggregateMessage {
                    job_id: ctx.job_id,
                    round: ctx.round,
                    sender: ctx.rank,
                    kind: PayloadKind::FullVector,
                    ciphertexts: own_ct.clone(),
                },
                contributors: contributors.clone(),
            })
            .collect();
        Ok((
            Self {
                ctx,
                key: key.clone(),
                state,
                own: own_ct,
                mode,
                inbox: BTreeMap::new(),
                stats,
            },
            actions,
        ))
    }

    fn step(&mut self, msg: AggregateMessage, inbound: BTreeSet<Rank>) -> Result<Vec<Action>, ProtocolError> {
        check_common(&self.state, &msg)?;
        if msg.sender == self.ctx.rank || msg.sender.index() >= self.ctx.parties {
            return Err(ProtocolError::UnexpectedSender {
                expected: None,
                got: msg.sender,
            });
        }
        if msg.kind != PayloadKind::FullVector {
            return Err(ProtocolError::UnexpectedPayload);
        }
        if msg.ciphertexts.len() != self.own.len() {
            return Err(ProtocolError::LengthMismatch {
                expected: self.own.len(),
                got: msg.ciphertexts.len(),
            });
        }
        check_key(&self.key, &msg.ciphertexts)?;
        self.state.record(msg.sender, 0)?;
        self.inbox.insert(msg.sender, (msg.ciphertexts, inbound));
        if self.inbox.len() < self.ctx.parties - 1 {
            return Ok(Vec::new());
        }

        let mut vectors: Vec<(Rank, &[Ciphertext])> =
            self.inbox.iter().map(|(r, (cts, _))| (*r, cts.as_slice())).collect();
        vectors.push((self.ctx.rank, &self.own));
        if let DuplicateVerdict::RedFlag(report) = detect_duplicates(&vectors) {
            return Err(ProtocolError::RedFlag(report));
        }

        let mut sum = self.own.clone();
        let mut contributors = if contributes(&self.mode) {
            BTreeSet::from([self.ctx.rank])
        } else {
            BTreeSet::new()
        };
        let inbox = std::mem::take(&mut self.inbox);
        for (cts, from) in inbox.into_values() {
            sum = timed_add(&self.key, &sum, &cts, &mut self.stats)?;
            contributors.extend(from);
        }
        self.state.transition(Phase::AwaitingDecryption)?;
        Ok(vec![Action::Submit {
            message: AggregateMessage {
                job_id: self.ctx.job_id,
                round: self.ctx.round,
                sender: self.ctx.rank,
                kind: PayloadKind::FullVector,
                ciphertexts: sum,
            },
            contributors,
        }])
    }
}

impl AggregationRound for BroadcastRound {
    fn on_message_tracked(
        &mut self,
        message: AggregateMessage,
        inbound: BTreeSet<Rank>,
    ) -> Result<Vec<Action>, ProtocolError> {
        let result = self.step(message, inbound);
        if result.is_err() {
            self.state.fail();
        }
        result
    }

    fn state(&self) -> &RoundState {
        &self.state
    }

    fn state_mut(&mut self) -> &mut RoundState {
        &mut self.state
    }

    fn stats(&self) -> TransformStats {
        self.stats
    }
}
