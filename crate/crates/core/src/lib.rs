// SPDX-License-Identifier: Apache-2.0

//! Building blocks for federated gradient aggregation under additively
//! homomorphic encryption: Paillier keys and ciphertexts, a fixed-point
//! codec for gradient vectors, ring topologies, the per-learner aggregation
//! protocols, and the binary frame format shared by coordinator and learners.

pub mod codec;
pub mod paillier;
pub mod prime;
pub mod protocol;
pub mod topology;
pub mod wire;

pub use codec::{CodecConfig, CodecError, EncodedVector};
pub use paillier::{Ciphertext, CryptoError, KeyFingerprint, KeyPair, PrivateKey, PublicKey};
pub use protocol::{AggregateMessage, PayloadKind, Protocol};
pub use topology::{OrderingStrategy, Participant, Rank, RingTopology};
pub use wire::{AuthToken, Frame, JobId, MessageType};
