// SPDX-License-Identifier: Apache-2.0

//! Decryptor-side collection of the final encrypted aggregate.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{AggregateMessage, PayloadKind, Protocol};
use crate::paillier::{Ciphertext, PublicKey};
use crate::topology::{AllReduceSchedule, Rank};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SubmissionError {
    #[error("rank {0} may not submit in this protocol")]
    UnexpectedSubmitter(Rank),
    #[error("rank {0} submitted twice")]
    Duplicate(Rank),
    #[error("submission for round {got}, expected {expected}")]
    WrongRound { expected: u32, got: u32 },
    #[error("submission has {got} ciphertexts, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("payload kind does not match the protocol")]
    WrongKind,
    #[error("ciphertext under a different key")]
    KeyMismatch,
    #[error("submitted sums diverge at ranks {0:?}")]
    Divergent(Vec<Rank>),
    #[error("aggregate incomplete: {missing} submissions outstanding")]
    Incomplete { missing: usize },
}

/// Accumulates the submissions of one round and yields the full encrypted
/// aggregate once complete.
#[derive(Debug, Clone)]
pub struct SubmissionSet {
    protocol: Protocol,
    parties: usize,
    round: u32,
    vector_length: usize,
    schedule: Option<AllReduceSchedule>,
    received: BTreeMap<Rank, Vec<Ciphertext>>,
}

impl SubmissionSet {
    pub fn new(protocol: Protocol, parties: usize, round: u32, vector_length: usize) -> Self {
        let schedule = (protocol == Protocol::AllReduce)
            .then(|| AllReduceSchedule::new(parties, vector_length).ok())
            .flatten();
        Self {
            protocol,
            parties,
            round,
            vector_length,
            schedule,
            received: BTreeMap::new(),
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn required(&self) -> usize {
        match self.protocol {
            Protocol::Ring => 1,
            Protocol::Broadcast | Protocol::AllReduce => self.parties,
        }
    }

    pub fn submitters(&self) -> impl Iterator<Item = Rank> + '_ {
        self.received.keys().copied()
    }

    pub fn is_complete(&self) -> bool {
        self.received.len() == self.required()
    }

    /// Records one submission. Returns true when the set became complete.
    pub fn add(&mut self, key: &PublicKey, msg: AggregateMessage) -> Result<bool, SubmissionError> {
        if msg.round != self.round {
            return Err(SubmissionError::WrongRound {
                expected: self.round,
                got: msg.round,
            });
        }
        if msg.sender.index() >= self.parties {
            return Err(SubmissionError::UnexpectedSubmitter(msg.sender));
        }
        let expected_len = match (self.protocol, msg.kind) {
            (Protocol::Ring, PayloadKind::FullVector) => {
                if msg.sender.index() + 1 != self.parties {
                    return Err(SubmissionError::UnexpectedSubmitter(msg.sender));
                }
                self.vector_length
            }
            (Protocol::Broadcast, PayloadKind::FullVector) => self.vector_length,
            (Protocol::AllReduce, PayloadKind::Chunk { index, step }) => {
                let schedule = self.schedule.as_ref().ok_or(SubmissionError::WrongKind)?;
                if index != schedule.final_chunk(msg.sender) || step != schedule.steps() {
                    return Err(SubmissionError::WrongKind);
                }
                schedule.chunk_range(index).len()
            }
            _ => return Err(SubmissionError::WrongKind),
        };
        if msg.ciphertexts.len() != expected_len {
            return Err(SubmissionError::LengthMismatch {
                expected: expected_len,
                got: msg.ciphertexts.len(),
            });
        }
        if msg.ciphertexts.iter().any(|c| c.fingerprint() != key.fingerprint()) {
            return Err(SubmissionError::KeyMismatch);
        }
        if self.received.contains_key(&msg.sender) {
            return Err(SubmissionError::Duplicate(msg.sender));
        }
        self.received.insert(msg.sender, msg.ciphertexts);
        Ok(self.is_complete())
    }

    /// The encrypted aggregate, in element order.
    pub fn aggregate(&self) -> Result<Vec<Ciphertext>, SubmissionError> {
        if !self.is_complete() {
            return Err(SubmissionError::Incomplete {
                missing: self.required() - self.received.len(),
            });
        }
        match self.protocol {
            Protocol::Ring => Ok(self.received.values().next().cloned().unwrap_or_default()),
            Protocol::Broadcast => self.cross_check(),
            Protocol::AllReduce => {
                let schedule = self.schedule.as_ref().ok_or(SubmissionError::WrongKind)?;
                let mut by_index: Vec<(u16, &Vec<Ciphertext>)> = self
                    .received
                    .iter()
                    .map(|(r, cts)| (schedule.final_chunk(*r), cts))
                    .collect();
                by_index.sort_by_key(|(i, _)| *i);
                Ok(by_index.into_iter().flat_map(|(_, c)| c.iter().cloned()).collect())
            }
        }
    }

    /// All broadcast sums must agree. Ranks outside the largest agreeing
    /// group are named as divergent.
    fn cross_check(&self) -> Result<Vec<Ciphertext>, SubmissionError> {
        let mut groups: Vec<(&Vec<Ciphertext>, Vec<Rank>)> = Vec::new();
        for (rank, cts) in &self.received {
            match groups.iter_mut().find(|(v, _)| *v == cts) {
                Some((_, ranks)) => ranks.push(*rank),
                None => groups.push((cts, vec![*rank])),
            }
        }
        if groups.len() == 1 {
            return Ok(groups[0].0.clone());
        }
        // stable: on a tie the group holding the lowest rank wins
        let majority = groups
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.1.len().cmp(&b.1.len()).then(j.cmp(i)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let mut divergent: Vec<Rank> = groups
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != majority)
            .flat_map(|(_, (_, r))| r.iter().copied())
            .collect();
        divergent.sort();
        Err(SubmissionError::Divergent(divergent))
    }
}
