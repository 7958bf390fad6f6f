// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;
use std::fmt;

use crate::paillier::Ciphertext;
use crate::topology::Rank;

/// Groups of senders whose ciphertext vectors were byte-identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollusionReport {
    pub groups: Vec<Vec<Rank>>,
}

impl CollusionReport {
    /// Every rank named in the report, ascending.
    pub fn ranks(&self) -> Vec<Rank> {
        let mut all: Vec<Rank> = self.groups.iter().flatten().copied().collect();
        all.sort();
        all.dedup();
        all
    }
}

impl fmt::Display for CollusionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, group) in self.groups.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            f.write_str("identical vectors from ranks ")?;
            for (j, r) in group.iter().enumerate() {
                if j > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{r}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DuplicateVerdict {
    Ok,
    RedFlag(CollusionReport),
}

/// Flags any two distinct senders whose ciphertext vectors are identical.
/// Empty vectors carry nothing and are ignored.
pub fn detect_duplicates(received: &[(Rank, &[Ciphertext])]) -> DuplicateVerdict {
    let mut seen: HashMap<&[Ciphertext], Vec<Rank>> = HashMap::new();
    for (rank, cts) in received {
        if cts.is_empty() {
            continue;
        }
        let senders = seen.entry(cts).or_default();
        if !senders.contains(rank) {
            senders.push(*rank);
        }
    }
    let mut groups: Vec<Vec<Rank>> = seen
        .into_values()
        .filter(|g| g.len() > 1)
        .map(|mut g| {
            g.sort();
            g
        })
        .collect();
    if groups.is_empty() {
        return DuplicateVerdict::Ok;
    }
    groups.sort();
    DuplicateVerdict::RedFlag(CollusionReport { groups })
}
