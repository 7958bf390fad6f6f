// SPDX-License-Identifier: Apache-2.0

//! Basic ring: rank 1 starts, every rank folds in its own encrypted vector
//! and forwards, rank P submits the total.

use std::collections::BTreeSet;

use rand::{CryptoRng, RngCore};

use super::{
    check_common, check_key, contributes, encrypt_own, timed_add, Action, AggregateMessage, AggregationRound,
    ContributionMode, PayloadKind, Phase, ProtocolError, RoundContext, RoundState, TransformStats,
};
use crate::codec::EncodedVector;
use crate::paillier::{Ciphertext, PublicKey};
use crate::topology::{predecessor, successor, Rank};

pub struct RingRound {
    ctx: RoundContext,
    key: PublicKey,
    state: RoundState,
    own: Vec<Ciphertext>,
    mode: ContributionMode,
    stats: TransformStats,
}

impl RingRound {
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
        let mut state = RoundState::new(ctx.job_id, ctx.round, super::Protocol::Ring);
        state.transition(Phase::Aggregating)?;
        let mut engine = Self {
            ctx,
            key: key.clone(),
            state,
            own: own_ct,
            mode,
            stats,
        };
        let mut actions = Vec::new();
        if ctx.rank.get() == 1 {
            // the initiator has no inbound; its encrypted vector opens the ring
            let contributors = if contributes(&engine.mode) {
                BTreeSet::from([ctx.rank])
            } else {
                BTreeSet::new()
            };
            actions.push(engine.forward(engine.own.clone(), contributors));
            engine.state.transition(Phase::AwaitingDecryption)?;
        }
        Ok((engine, actions))
    }

    fn forward(&self, ciphertexts: Vec<Ciphertext>, contributors: BTreeSet<Rank>) -> Action {
        let message = AggregateMessage {
            job_id: self.ctx.job_id,
            round: self.ctx.round,
            sender: self.ctx.rank,
            kind: PayloadKind::FullVector,
            ciphertexts,
        };
        if self.ctx.rank.index() + 1 == self.ctx.parties {
            Action::Submit { message, contributors }
        } else {
            Action::Send {
                to: successor(self.ctx.rank, self.ctx.parties),
                message,
                contributors,
            }
        }
    }

    fn step(&mut self, msg: AggregateMessage, mut contributors: BTreeSet<Rank>) -> Result<Vec<Action>, ProtocolError> {
        check_common(&self.state, &msg)?;
        let expected = (self.ctx.rank.get() > 1).then(|| predecessor(self.ctx.rank, self.ctx.parties));
        if Some(msg.sender) != expected {
            return Err(ProtocolError::UnexpectedSender {
                expected,
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

        let outgoing = match self.mode {
            ContributionMode::Withhold => msg.ciphertexts,
            _ => {
                if contributes(&self.mode) {
                    contributors.insert(self.ctx.rank);
                }
                timed_add(&self.key, &msg.ciphertexts, &self.own, &mut self.stats)?
            }
        };
        self.state.transition(Phase::AwaitingDecryption)?;
        Ok(vec![self.forward(outgoing, contributors)])
    }
}

impl AggregationRound for RingRound {
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
