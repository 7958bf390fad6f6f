// SPDX-License-Identifier: Apache-2.0

//! In-process driver that runs one round for all ranks over FIFO queues.

use std::collections::{BTreeSet, VecDeque};

use rand::{CryptoRng, RngCore};

use super::{
    start_round, Action, AggregateMessage, AggregationRound, ContributionMode, Protocol, ProtocolError, RoundContext,
    SubmissionError, SubmissionSet, TransformStats,
};
use crate::codec::EncodedVector;
use crate::paillier::{Ciphertext, PublicKey};
use crate::topology::Rank;
use crate::wire::JobId;

/// One message as seen on the wire between two ranks, or from a rank to the
/// decryptor (`to == None`).
#[derive(Debug, Clone)]
pub struct TranscriptEntry {
    pub to: Option<Rank>,
    pub message: AggregateMessage,
    pub contributors: BTreeSet<Rank>,
}

#[derive(Debug)]
pub struct LocalOutcome {
    pub aggregate: Vec<Ciphertext>,
    pub transcript: Vec<TranscriptEntry>,
    pub stats: Vec<TransformStats>,
}

impl LocalOutcome {
    /// Peer messages sent by `rank`, excluding decryptor submissions.
    pub fn sent_by(&self, rank: Rank) -> usize {
        self.transcript
            .iter()
            .filter(|e| e.to.is_some() && e.message.sender == rank)
            .count()
    }

    /// Everything `rank` receives from peers.
    pub fn received_by(&self, rank: Rank) -> impl Iterator<Item = &TranscriptEntry> {
        self.transcript.iter().filter(move |e| e.to == Some(rank))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LocalError {
    #[error("rank {rank}: {source}")]
    Protocol {
        rank: Rank,
        #[source]
        source: ProtocolError,
    },
    #[error(transparent)]
    Submission(#[from] SubmissionError),
}

/// Runs one round of `protocol` with `inputs[i]` belonging to rank `i + 1`.
/// `modes` may be shorter than `inputs`; missing entries are honest.
pub fn run_round<R: RngCore + CryptoRng + ?Sized>(
    protocol: Protocol,
    key: &PublicKey,
    inputs: &[EncodedVector],
    modes: &[ContributionMode],
    round: u32,
    rng: &mut R,
) -> Result<LocalOutcome, LocalError> {
    let parties = inputs.len();
    let job_id = JobId::from_label("local");
    let vector_length = inputs.first().map_or(0, |v| v.len());
    let mut engines: Vec<Box<dyn AggregationRound>> = Vec::with_capacity(parties);
    let mut queue: VecDeque<(Rank, Action)> = VecDeque::new();
    let mut submissions = SubmissionSet::new(protocol, parties, round, vector_length);
    let mut transcript = Vec::new();

    for (i, input) in inputs.iter().enumerate() {
        let rank = Rank::new(i as u16 + 1).expect("rank fits");
        let ctx = RoundContext {
            job_id,
            round,
            rank,
            parties,
        };
        let mode = modes.get(i).cloned().unwrap_or_default();
        let (engine, actions) = start_round(protocol, ctx, key, input, mode, rng)
            .map_err(|source| LocalError::Protocol { rank, source })?;
        engines.push(engine);
        queue.extend(actions.into_iter().map(|a| (rank, a)));
    }

    while let Some((_, action)) = queue.pop_front() {
        match action {
            Action::Send {
                to,
                message,
                contributors,
            } => {
                transcript.push(TranscriptEntry {
                    to: Some(to),
                    message: message.clone(),
                    contributors: contributors.clone(),
                });
                let out = engines[to.index()]
                    .on_message_tracked(message, contributors)
                    .map_err(|source| LocalError::Protocol { rank: to, source })?;
                queue.extend(out.into_iter().map(|a| (to, a)));
            }
            Action::Submit { message, contributors } => {
                transcript.push(TranscriptEntry {
                    to: None,
                    message: message.clone(),
                    contributors,
                });
                submissions.add(key, message)?;
            }
        }
    }

    Ok(LocalOutcome {
        aggregate: submissions.aggregate()?,
        transcript,
        stats: engines.iter().map(|e| e.stats()).collect(),
    })
}
