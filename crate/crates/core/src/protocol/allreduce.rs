// SPDX-License-Identifier: Apache-2.0

//! Chunked ring all-reduce over encrypted vectors.

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};

use super::{
    check_common, check_key, contributes, encrypt_own, timed_add, Action, AggregateMessage, AggregationRound,
    ContributionMode, PayloadKind, Phase, Protocol, ProtocolError, RoundContext, RoundState, TransformStats,
};
use crate::codec::EncodedVector;
use crate::paillier::{Ciphertext, PublicKey};
use crate::topology::{successor, AllReduceSchedule, Rank};

pub struct AllReduceRound {
    ctx: RoundContext,
    key: PublicKey,
    state: RoundState,
    schedule: AllReduceSchedule,
    /// Partial sums per chunk, 0-based.
    partial: Vec<Vec<Ciphertext>>,
    contributors: Vec<BTreeSet<Rank>>,
    mode: ContributionMode,
    /// Next step expected from the predecessor.
    next_step: u16,
    early: BTreeMap<u16, (AggregateMessage, BTreeSet<Rank>)>,
    stats: TransformStats,
}

impl AllReduceRound {
    pub fn start<R: RngCore + CryptoRng + ?Sized>(
        ctx: RoundContext,
        key: &PublicKey,
        own: &EncodedVector,
        mode: ContributionMode,
        rng: &mut R,
    ) -> Result<(Self, Vec<Action>), ProtocolError> {
        let schedule = AllReduceSchedule::new(ctx.parties, own.len()).map_err(|_| ProtocolError::TooFewParties)?;
        let mut stats = TransformStats::default();
        let own_ct = encrypt_own(key, own, &mode, rng, &mut stats)?;
        let partial: Vec<Vec<Ciphertext>> = schedule
            .chunk_ranges()
            .iter()
            .map(|r| own_ct[r.clone()].to_vec())
            .collect();
        let mine = if contributes(&mode) {
            BTreeSet::from([ctx.rank])
        } else {
            BTreeSet::new()
        };
        let mut state = RoundState::new(ctx.job_id, ctx.round, Protocol::AllReduce);
        state.transition(Phase::Aggregating)?;
        let engine = Self {
            ctx,
            key: key.clone(),
            state,
            contributors: vec![mine; ctx.parties],
            partial,
            schedule,
            mode,
            next_step: 1,
            early: BTreeMap::new(),
            stats,
        };
        let first = engine.send_at(1);
        Ok((engine, vec![first]))
    }

    pub fn schedule(&self) -> &AllReduceSchedule {
        &self.schedule
    }

    fn message(&self, index: u16, step: u16) -> AggregateMessage {
        AggregateMessage {
            job_id: self.ctx.job_id,
            round: self.ctx.round,
            sender: self.ctx.rank,
            kind: PayloadKind::Chunk { index, step },
            ciphertexts: self.partial[index as usize - 1].clone(),
        }
    }

    fn send_at(&self, step: u16) -> Action {
        let index = self.schedule.send_of(self.ctx.rank, step).chunk_index;
        Action::Send {
            to: successor(self.ctx.rank, self.ctx.parties),
            message: self.message(index, step),
            contributors: self.contributors[index as usize - 1].clone(),
        }
    }

    fn step(&mut self, msg: AggregateMessage, inbound: BTreeSet<Rank>) -> Result<Vec<Action>, ProtocolError> {
        check_common(&self.state, &msg)?;
        let from = self.schedule.receive_of(self.ctx.rank, 1).sender;
        if msg.sender != from {
            return Err(ProtocolError::UnexpectedSender {
                expected: Some(from),
                got: msg.sender,
            });
        }
        let PayloadKind::Chunk { index, step } = msg.kind else {
            return Err(ProtocolError::UnexpectedPayload);
        };
        if step < self.next_step || step > self.schedule.steps() {
            let expected_index = if self.next_step <= self.schedule.steps() {
                self.schedule.receive_of(self.ctx.rank, self.next_step).chunk_index
            } else {
                0
            };
            return Err(ProtocolError::OutOfOrder {
                expected_step: self.next_step,
                expected_index,
                got_step: step,
                got_index: index,
            });
        }
        if step > self.next_step {
            // the predecessor may run ahead of us
            if self.early.insert(step, (msg, inbound)).is_some() {
                return Err(ProtocolError::DuplicateSender(from));
            }
            return Ok(Vec::new());
        }

        let mut actions = self.apply(msg, inbound)?;
        while let Some((m, c)) = self.early.remove(&self.next_step) {
            actions.extend(self.apply(m, c)?);
        }
        Ok(actions)
    }

    fn apply(&mut self, msg: AggregateMessage, inbound: BTreeSet<Rank>) -> Result<Vec<Action>, ProtocolError> {
        let PayloadKind::Chunk { index, step } = msg.kind else {
            return Err(ProtocolError::UnexpectedPayload);
        };
        let expected = self.schedule.receive_of(self.ctx.rank, step);
        if index != expected.chunk_index {
            return Err(ProtocolError::OutOfOrder {
                expected_step: step,
                expected_index: expected.chunk_index,
                got_step: step,
                got_index: index,
            });
        }
        let slot = index as usize - 1;
        if msg.ciphertexts.len() != self.partial[slot].len() {
            return Err(ProtocolError::LengthMismatch {
                expected: self.partial[slot].len(),
                got: msg.ciphertexts.len(),
            });
        }
        check_key(&self.key, &msg.ciphertexts)?;
        self.state.record(msg.sender, step)?;

        self.partial[slot] = match self.mode {
            ContributionMode::Withhold => msg.ciphertexts,
            _ => timed_add(&self.key, &msg.ciphertexts, &self.partial[slot], &mut self.stats)?,
        };
        self.contributors[slot].extend(inbound);
        self.next_step += 1;

        if step < self.schedule.steps() {
            return Ok(vec![self.send_at(step + 1)]);
        }
        let last = self.schedule.final_chunk(self.ctx.rank);
        debug_assert_eq!(last, index);
        self.state.transition(Phase::AwaitingDecryption)?;
        Ok(vec![Action::Submit {
            message: self.message(last, step),
            contributors: self.contributors[slot].clone(),
        }])
    }
}

impl AggregationRound for AllReduceRound {
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
