// SPDX-License-Identifier: Apache-2.0

//! Ring construction, rank assignment and the all-reduce transfer schedule.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::chunk_ranges;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("duplicate participant name {0:?}")]
    DuplicateName(String),
    #[error("participant name must not be empty")]
    EmptyName,
    #[error("a ring needs at least 2 participants, got {0}")]
    TooFewParticipants(usize),
    #[error("a ring supports at most {max} participants, got {got}")]
    TooManyParticipants { got: usize, max: usize },
    #[error("unknown ordering strategy {0:?}")]
    UnknownStrategy(String),
}

/// 1-based position on the ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rank(u16);

impl Rank {
    pub fn new(rank: u16) -> Option<Self> {
        (rank >= 1).then_some(Self(rank))
    }

    pub fn get(self) -> u16 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub(crate) fn from_index(index: usize) -> Self {
        Self(index as u16 + 1)
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Participant {
    pub name: String,
    pub location_tag: Option<String>,
    pub endpoint: String,
}

impl Participant {
    pub fn new(name: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            location_tag: None,
            endpoint: endpoint.into(),
        }
    }

    pub fn with_location(mut self, tag: impl Into<String>) -> Self {
        self.location_tag = Some(tag.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum OrderingStrategy {
    #[default]
    NameAscending,
    NameDescending,
    ConsistentHash,
    /// Stable grouping by location tag, then name.
    LocationGrouped,
}

impl OrderingStrategy {
    pub fn code(self) -> u8 {
        match self {
            Self::NameAscending => 0,
            Self::NameDescending => 1,
            Self::ConsistentHash => 2,
            Self::LocationGrouped => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Self::NameAscending,
            1 => Self::NameDescending,
            2 => Self::ConsistentHash,
            3 => Self::LocationGrouped,
            _ => return None,
        })
    }
}

impl FromStr for OrderingStrategy {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "nameascending" | "ascending" => Ok(Self::NameAscending),
            "namedescending" | "descending" => Ok(Self::NameDescending),
            "consistenthash" | "hash" => Ok(Self::ConsistentHash),
            "locationgrouped" | "location" => Ok(Self::LocationGrouped),
            _ => Err(TopologyError::UnknownStrategy(s.to_string())),
        }
    }
}

/// Position of `name` on the 64-bit hash ring: the first eight bytes of
/// SHA-256(name), big-endian.
pub fn hash_position(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Immutable ring snapshot. Membership changes produce a new topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingTopology {
    ordered: Vec<Participant>,
    strategy: OrderingStrategy,
}

impl RingTopology {
    /// Orders `participants` by `strategy`; rank `i` is the `i`-th in order.
    pub fn build(
        participants: impl IntoIterator<Item = Participant>,
        strategy: OrderingStrategy,
    ) -> Result<Self, TopologyError> {
        let mut ordered: Vec<Participant> = participants.into_iter().collect();
        let mut seen = BTreeSet::new();
        for p in &ordered {
            if p.name.is_empty() {
                return Err(TopologyError::EmptyName);
            }
            if !seen.insert(p.name.as_str()) {
                return Err(TopologyError::DuplicateName(p.name.clone()));
            }
        }
        if ordered.len() < 2 {
            return Err(TopologyError::TooFewParticipants(ordered.len()));
        }
        if ordered.len() > u16::MAX as usize {
            return Err(TopologyError::TooManyParticipants {
                got: ordered.len(),
                max: u16::MAX as usize,
            });
        }
        match strategy {
            OrderingStrategy::NameAscending => ordered.sort_by(|a, b| a.name.as_bytes().cmp(b.name.as_bytes())),
            OrderingStrategy::NameDescending => ordered.sort_by(|a, b| b.name.as_bytes().cmp(a.name.as_bytes())),
            OrderingStrategy::ConsistentHash => ordered.sort_by(|a, b| {
                hash_position(&a.name)
                    .cmp(&hash_position(&b.name))
                    .then_with(|| a.name.as_bytes().cmp(b.name.as_bytes()))
            }),
            OrderingStrategy::LocationGrouped => {
                ordered.sort_by(|a, b| a.name.as_bytes().cmp(b.name.as_bytes()));
                // stable: names stay ascending within a location; untagged last
                ordered.sort_by(|a, b| match (&a.location_tag, &b.location_tag) {
                    (Some(x), Some(y)) => x.cmp(y),
                    (Some(_), None) => std::cmp::Ordering::Less,
                    (None, Some(_)) => std::cmp::Ordering::Greater,
                    (None, None) => std::cmp::Ordering::Equal,
                });
            }
        }
        Ok(Self { ordered, strategy })
    }

    pub fn len(&self) -> usize {
        self.ordered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered.is_empty()
    }

    pub fn strategy(&self) -> OrderingStrategy {
        self.strategy
    }

    pub fn participants(&self) -> &[Participant] {
        &self.ordered
    }

    pub fn ranks(&self) -> impl Iterator<Item = (Rank, &Participant)> {
        self.ordered.iter().enumerate().map(|(i, p)| (Rank::from_index(i), p))
    }

    pub fn rank_of(&self, name: &str) -> Option<Rank> {
        self.ordered.iter().position(|p| p.name == name).map(Rank::from_index)
    }

    pub fn participant(&self, rank: Rank) -> Option<&Participant> {
        self.ordered.get(rank.index())
    }

    pub fn last_rank(&self) -> Rank {
        Rank::from_index(self.ordered.len() - 1)
    }

    pub fn successor(&self, rank: Rank) -> Rank {
        successor(rank, self.len())
    }

    pub fn predecessor(&self, rank: Rank) -> Rank {
        predecessor(rank, self.len())
    }

    pub fn allreduce_schedule(&self, vector_length: usize) -> AllReduceSchedule {
        AllReduceSchedule::new(self.len(), vector_length).expect("ring has at least two members")
    }
}

/// Rank `i`'s successor is `i mod P + 1`.
pub fn successor(rank: Rank, parties: usize) -> Rank {
    Rank((rank.get() as usize % parties + 1) as u16)
}

pub fn predecessor(rank: Rank, parties: usize) -> Rank {
    Rank(((rank.get() as usize + parties - 2) % parties + 1) as u16)
}

/// One chunk hop of the all-reduce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transfer {
    /// 1-based step.
    pub step: u16,
    pub sender: Rank,
    pub receiver: Rank,
    /// 1-based chunk index.
    pub chunk_index: u16,
    pub elements: Range<usize>,
}

/// Transfer plan for `P - 1` steps over `P` chunks.
///
/// At step `s` rank `i` sends chunk `((i - s) mod P) + 1` to its successor
/// and receives chunk `((i - s - 1) mod P) + 1`. After the final step rank
/// `i` holds the complete sum of chunk `(i mod P) + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllReduceSchedule {
    parties: usize,
    chunks: Vec<Range<usize>>,
    transfers: Vec<Transfer>,
}

impl AllReduceSchedule {
    pub fn new(parties: usize, vector_length: usize) -> Result<Self, TopologyError> {
        if parties < 2 {
            return Err(TopologyError::TooFewParticipants(parties));
        }
        if parties > u16::MAX as usize {
            return Err(TopologyError::TooManyParticipants {
                got: parties,
                max: u16::MAX as usize,
            });
        }
        let chunks = chunk_ranges(vector_length, parties).expect("parties >= 2");
        let mut transfers = Vec::with_capacity(parties * (parties - 1));
        for step in 1..parties {
            for i in 1..=parties {
                let sender = Rank(i as u16);
                let chunk_index = send_chunk(sender, step, parties);
                transfers.push(Transfer {
                    step: step as u16,
                    sender,
                    receiver: successor(sender, parties),
                    chunk_index,
                    elements: chunks[chunk_index as usize - 1].clone(),
                });
            }
        }
        Ok(Self {
            parties,
            chunks,
            transfers,
        })
    }

    pub fn parties(&self) -> usize {
        self.parties
    }

    pub fn steps(&self) -> u16 {
        (self.parties - 1) as u16
    }

    pub fn transfers(&self) -> &[Transfer] {
        &self.transfers
    }

    pub fn transfers_at(&self, step: u16) -> &[Transfer] {
        let s = step as usize;
        assert!(s >= 1 && s < self.parties, "step out of range");
        &self.transfers[(s - 1) * self.parties..s * self.parties]
    }

    /// The transfer `rank` sends at `step`.
    pub fn send_of(&self, rank: Rank, step: u16) -> &Transfer {
        &self.transfers_at(step)[rank.index()]
    }

    /// The transfer `rank` receives at `step`.
    pub fn receive_of(&self, rank: Rank, step: u16) -> &Transfer {
        self.send_of(predecessor(rank, self.parties), step)
    }

    /// Chunk index fully aggregated at `rank` after the last step.
    pub fn final_chunk(&self, rank: Rank) -> u16 {
        (rank.get() as usize % self.parties + 1) as u16
    }

    pub fn chunk_range(&self, index: u16) -> Range<usize> {
        self.chunks[index as usize - 1].clone()
    }

    pub fn chunk_ranges(&self) -> &[Range<usize>] {
        &self.chunks
    }
}

fn send_chunk(rank: Rank, step: usize, parties: usize) -> u16 {
    ((rank.get() as i64 - step as i64).rem_euclid(parties as i64) + 1) as u16
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn names(names: &[&str]) -> Vec<Participant> {
        names.iter().map(|n| Participant::new(*n, format!("{n}:1"))).collect()
    }

    fn order(t: &RingTopology) -> Vec<&str> {
        t.participants().iter().map(|p| p.name.as_str()).collect()
    }

    #[test]
    fn name_orderings() {
        let t = RingTopology::build(names(&["b", "a", "c"]), OrderingStrategy::NameAscending).unwrap();
        assert_eq!(order(&t), ["a", "b", "c"]);
        assert_eq!(t.rank_of("a"), Rank::new(1));
        assert_eq!(t.rank_of("b"), Rank::new(2));
        assert_eq!(t.rank_of("c"), Rank::new(3));
        let t = RingTopology::build(names(&["b", "a", "c"]), OrderingStrategy::NameDescending).unwrap();
        assert_eq!(order(&t), ["c", "b", "a"]);
    }

    #[test]
    fn rejects_invalid_membership() {
        assert_eq!(
            RingTopology::build(names(&["a"]), OrderingStrategy::default()).unwrap_err(),
            TopologyError::TooFewParticipants(1)
        );
        assert_eq!(
            RingTopology::build(names(&["a", "a"]), OrderingStrategy::default()).unwrap_err(),
            TopologyError::DuplicateName("a".into())
        );
        assert_eq!(
            RingTopology::build(names(&["", "a"]), OrderingStrategy::default()).unwrap_err(),
            TopologyError::EmptyName
        );
    }

    #[test]
    fn hash_of_empty_string() {
        assert_eq!(hash_position(""), 0xE3B0_C442_98FC_1C14);
        assert_eq!(hash_position("n1"), hash_position("n1"));
    }

    #[test]
    fn hash_positions_do_not_collide() {
        let positions: BTreeSet<u64> = (0..1000).map(|i| hash_position(&format!("learner-{i}"))).collect();
        assert_eq!(positions.len(), 1000);
    }

    #[test]
    fn consistent_hash_order() {
        // positions from an external SHA-256: n1 = 0x676b8bb84ce7267d,
        // n2 = 0x0480a93d2e9b094b, n3 = 0x8721d664ef60096a
        assert_eq!(hash_position("n1"), 0x676b_8bb8_4ce7_267d);
        assert_eq!(hash_position("n2"), 0x0480_a93d_2e9b_094b);
        assert_eq!(hash_position("n3"), 0x8721_d664_ef60_096a);
        let mut expect = vec!["n1", "n2", "n3"];
        expect.sort_by_key(|n| hash_position(n));
        let t = RingTopology::build(names(&["n3", "n1", "n2"]), OrderingStrategy::ConsistentHash).unwrap();
        assert_eq!(order(&t), expect);
        assert_eq!(order(&t), ["n2", "n1", "n3"]);
    }

    #[test]
    fn location_grouping_is_stable() {
        let ps = vec![
            Participant::new("d", "x").with_location("us"),
            Participant::new("a", "x").with_location("eu"),
            Participant::new("c", "x").with_location("us"),
            Participant::new("b", "x"),
            Participant::new("e", "x").with_location("eu"),
        ];
        let t = RingTopology::build(ps, OrderingStrategy::LocationGrouped).unwrap();
        assert_eq!(order(&t), ["a", "e", "c", "d", "b"]);
    }

    #[test]
    fn successor_is_a_single_cycle() {
        for p in 2..=16usize {
            let mut seen = BTreeSet::new();
            let mut r = Rank(1);
            for _ in 0..p {
                assert!(seen.insert(r));
                let next = successor(r, p);
                assert_eq!(predecessor(next, p), r);
                r = next;
            }
            assert_eq!(r, Rank(1));
            assert_eq!(seen.len(), p);
        }
    }

    #[test]
    fn smallest_schedule() {
        let s = AllReduceSchedule::new(2, 5).unwrap();
        assert_eq!(s.steps(), 1);
        let t = s.transfers_at(1);
        assert_eq!((t[0].sender, t[0].receiver, t[0].chunk_index), (Rank(1), Rank(2), 1));
        assert_eq!((t[1].sender, t[1].receiver, t[1].chunk_index), (Rank(2), Rank(1), 2));
        assert_eq!(s.final_chunk(Rank(1)), 2);
        assert_eq!(s.final_chunk(Rank(2)), 1);
        assert!(AllReduceSchedule::new(1, 5).is_err());
    }

    #[test]
    fn three_learner_flow() {
        let s = AllReduceSchedule::new(3, 3).unwrap();
        // step 1: each learner sends its own-index chunk
        assert_eq!(s.send_of(Rank(2), 1).chunk_index, 2);
        assert_eq!(s.send_of(Rank(2), 1).receiver, Rank(3));
        assert_eq!(s.receive_of(Rank(2), 1).chunk_index, 1);
        // step 2: learner 2 forwards partial chunk 1 to learner 3,
        // learner 3 forwards chunk 2 to learner 1, learner 1 forwards chunk 3 to learner 2
        assert_eq!(
            (s.send_of(Rank(2), 2).chunk_index, s.send_of(Rank(2), 2).receiver),
            (1, Rank(3))
        );
        assert_eq!(
            (s.send_of(Rank(3), 2).chunk_index, s.send_of(Rank(3), 2).receiver),
            (2, Rank(1))
        );
        assert_eq!(
            (s.send_of(Rank(1), 2).chunk_index, s.send_of(Rank(1), 2).receiver),
            (3, Rank(2))
        );
    }

    /// Formal-sum execution: each rank starts with {own rank} for every chunk;
    /// a receive merges the sender's partial set into the receiver's.
    #[test]
    fn symbolic_execution_completes_every_chunk() {
        for p in 2..=8usize {
            for len in [1usize, 3, 10, 17] {
                let s = AllReduceSchedule::new(p, len).unwrap();
                let mut held: Vec<BTreeMap<u16, BTreeSet<u16>>> = (1..=p)
                    .map(|i| (1..=p as u16).map(|c| (c, BTreeSet::from([i as u16]))).collect())
                    .collect();
                for step in 1..=s.steps() {
                    let mut per_step = BTreeSet::new();
                    let moves: Vec<_> = s
                        .transfers_at(step)
                        .iter()
                        .map(|t| {
                            assert!(per_step.insert(t.chunk_index), "chunk repeated in step");
                            (
                                t.receiver,
                                t.chunk_index,
                                held[t.sender.index()][&t.chunk_index].clone(),
                            )
                        })
                        .collect();
                    for (recv, chunk, set) in moves {
                        held[recv.index()].get_mut(&chunk).unwrap().extend(set);
                    }
                }
                let all: BTreeSet<u16> = (1..=p as u16).collect();
                let mut finals = BTreeSet::new();
                for i in 1..=p {
                    let c = s.final_chunk(Rank(i as u16));
                    assert_eq!(held[i - 1][&c], all, "P={p} rank {i} chunk {c}");
                    finals.insert(c);
                }
                assert_eq!(finals.len(), p);
            }
        }
    }

    #[test]
    fn schedule_uses_codec_chunk_boundaries() {
        let s = AllReduceSchedule::new(4, 10).unwrap();
        let sizes: Vec<usize> = s.chunk_ranges().iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
        assert_eq!(s.transfers().len(), 12);
        for t in s.transfers() {
            assert_eq!(t.elements, s.chunk_range(t.chunk_index));
        }
    }

    #[test]
    fn rebuild_is_deterministic() {
        for strategy in [
            OrderingStrategy::NameAscending,
            OrderingStrategy::NameDescending,
            OrderingStrategy::ConsistentHash,
            OrderingStrategy::LocationGrouped,
        ] {
            let a = RingTopology::build(names(&["q", "w", "e", "r"]), strategy).unwrap();
            let b = RingTopology::build(names(&["r", "e", "w", "q"]), strategy).unwrap();
            assert_eq!(a, b);
        }
    }
}
