// SPDX-License-Identifier: Apache-2.0

//! Collusion scenarios and the checks run on their outcomes.

use std::collections::BTreeSet;

use fedcrypt_core::protocol::Protocol;
use fedcrypt_core::topology::Rank;
use fedcrypt_core::wire::MessageType;
use fedcrypt_node::JobStatus;

use crate::runner::{run_scenario, RunOutcome, SimError};
use crate::scenario::{CollusionMode, CollusionPlan, Scenario};

#[derive(Debug, Clone)]
pub struct DuplicateReport {
    pub parties: usize,
    pub planted: BTreeSet<u16>,
    /// Rank lists carried by every red flag the coordinator received.
    pub flagged: Vec<Vec<Rank>>,
    pub status: JobStatus,
}

impl DuplicateReport {
    /// At least one red flag, and every flag names exactly the planted ranks.
    pub fn holds(&self) -> bool {
        !self.flagged.is_empty()
            && self.flagged.iter().all(|f| {
                let got: BTreeSet<u16> = f.iter().map(|r| r.get()).collect();
                got == self.planted
            })
    }
}

/// Runs a broadcast round in which `ranks` submit byte-identical ciphertexts.
pub fn duplicate_attack(base: &Scenario, ranks: &BTreeSet<u16>) -> Result<DuplicateReport, SimError> {
    let mut s = base.clone();
    s.protocol = Protocol::Broadcast;
    s.failure_plan.clear();
    s.collusion_plan = Some(CollusionPlan {
        ranks: ranks.clone(),
        mode: CollusionMode::DuplicateCiphertext,
    });
    let out = run_scenario(&s)?;
    Ok(DuplicateReport {
        parties: s.parties,
        planted: ranks.clone(),
        flagged: out.red_flags,
        status: out.status,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsolationCase {
    pub deviants: BTreeSet<u16>,
    /// Honest ranks whose vector reached the decryptor on its own.
    pub isolated: BTreeSet<u16>,
    /// Fewest plaintexts folded into any decryptor-bound submission.
    pub min_contributors: usize,
    pub completed: bool,
}

#[derive(Debug, Clone)]
pub struct IsolationReport {
    pub parties: usize,
    pub protocol: Protocol,
    pub cases: Vec<IsolationCase>,
}

impl IsolationReport {
    /// A vector is exposed exactly when every other party passes through.
    pub fn holds(&self) -> bool {
        let p = self.parties;
        self.cases.iter().all(|c| {
            if !c.completed {
                return false;
            }
            let honest: BTreeSet<u16> = (1..=p as u16).filter(|r| !c.deviants.contains(r)).collect();
            if c.deviants.len() == p - 1 {
                c.isolated == honest && c.min_contributors == 1
            } else {
                c.isolated.is_empty() && c.min_contributors >= 2 && c.min_contributors == honest.len()
            }
        })
    }

    /// Smallest coalition that isolated somebody.
    pub fn smallest_exposing_coalition(&self) -> Option<usize> {
        self.cases
            .iter()
            .filter(|c| !c.isolated.is_empty())
            .map(|c| c.deviants.len())
            .min()
    }
}

fn analyse(out: &RunOutcome, deviants: BTreeSet<u16>) -> IsolationCase {
    let min_contributors = out
        .transcript
        .iter()
        .filter(|e| e.kind == MessageType::AggSubmit && !e.dropped)
        .filter_map(|e| e.contributors.as_ref().map(|c| c.len()))
        .min()
        .unwrap_or(0);
    IsolationCase {
        deviants,
        isolated: out.isolated_ranks().iter().map(|r| r.get()).collect(),
        min_contributors,
        completed: out.succeeded(),
    }
}

/// Every coalition of 1..=P-1 pass-through ranks, one round each.
pub fn passthrough_sweep(base: &Scenario) -> Result<IsolationReport, SimError> {
    let p = base.parties;
    let mut cases = Vec::new();
    for mask in 1u32..(1u32 << p) {
        let deviants: BTreeSet<u16> = (0..p).filter(|i| mask & (1 << i) != 0).map(|i| i as u16 + 1).collect();
        if deviants.len() == p {
            continue;
        }
        let mut s = base.clone();
        s.rounds = 1;
        s.failure_plan.clear();
        s.collusion_plan = Some(CollusionPlan {
            ranks: deviants.clone(),
            mode: CollusionMode::PassThrough,
        });
        let out = run_scenario(&s)?;
        cases.push(analyse(&out, deviants));
    }
    Ok(IsolationReport {
        parties: p,
        protocol: base.protocol,
        cases,
    })
}
