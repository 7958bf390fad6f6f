// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;
use std::fmt;

use fedcrypt_core::topology::Rank;
use fedcrypt_core::wire::Frame;

/// Logical endpoint of a frame. Transports map these to connections.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Address {
    Coordinator,
    Participant(String),
}

impl Address {
    pub fn participant(name: impl Into<String>) -> Self {
        Address::Participant(name.into())
    }

    pub fn name(&self) -> Option<&str> {
        match self {
            Address::Coordinator => None,
            Address::Participant(n) => Some(n),
        }
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Address::Coordinator => f.write_str("coordinator"),
            Address::Participant(n) => f.write_str(n),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Envelope {
    pub to: Address,
    pub frame: Frame,
    /// Ranks whose plaintext is folded into an aggregate payload. Local
    /// bookkeeping for transcript analysis; never serialized.
    pub contributors: Option<BTreeSet<Rank>>,
}

impl Envelope {
    pub fn new(to: Address, frame: Frame) -> Self {
        Self {
            to,
            frame,
            contributors: None,
        }
    }
}
