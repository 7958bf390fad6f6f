// SPDX-License-Identifier: Apache-2.0

use std::sync::OnceLock;

use fedcrypt_core::codec::{self, CodecConfig};
use fedcrypt_core::protocol::local::run_round;
use fedcrypt_core::protocol::Protocol;
use fedcrypt_core::KeyPair;
use num_bigint::{BigUint, RandBigInt};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn key() -> &'static KeyPair {
    static KEY: OnceLock<KeyPair> = OnceLock::new();
    KEY.get_or_init(|| KeyPair::generate(512, Some([3u8; 32])).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn decryption_inverts_encryption(seed in any::<u64>()) {
        let pk = key().public_key();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let m = rng.gen_biguint_below(pk.n());
        let c = pk.encrypt(&m, &mut rng).unwrap();
        prop_assert_eq!(key().private_key().decrypt(&c).unwrap(), m.clone());
        prop_assert_eq!(key().private_key().decrypt_textbook(&c).unwrap(), m);
    }

    #[test]
    fn addition_is_plaintext_addition_mod_n(seed in any::<u64>()) {
        let pk = key().public_key();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = rng.gen_biguint_below(pk.n());
        let b = rng.gen_biguint_below(pk.n());
        let sum = pk.add(&pk.encrypt(&a, &mut rng).unwrap(), &pk.encrypt(&b, &mut rng).unwrap()).unwrap();
        prop_assert_eq!(key().private_key().decrypt(&sum).unwrap(), (a + b) % pk.n());
    }

    #[test]
    fn fresh_randomness_gives_distinct_ciphertexts(seed in any::<u64>(), m in any::<u64>()) {
        let pk = key().public_key();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let m = BigUint::from(m);
        prop_assert_ne!(pk.encrypt(&m, &mut rng).unwrap(), pk.encrypt(&m, &mut rng).unwrap());
    }

    #[test]
    fn ciphertext_bytes_round_trip(seed in any::<u64>()) {
        let pk = key().public_key();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let c = pk.encrypt(&rng.gen_biguint_below(pk.n()), &mut rng).unwrap();
        let bytes = c.to_bytes(pk.ciphertext_width());
        prop_assert_eq!(bytes.len(), pk.ciphertext_width());
        prop_assert_eq!(pk.ciphertext_from_bytes(&bytes).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Ring, broadcast and all-reduce all decrypt to the residue-wise sum of
    /// the encodings.
    #[test]
    fn protocols_agree(
        parties in 2usize..=6,
        values in prop::collection::vec(-1000.0f64..1000.0, 1..=12),
        seed in any::<u64>(),
    ) {
        let cfg = CodecConfig::default();
        let n = key().public_key().n();
        let inputs: Vec<_> = (0..parties)
            .map(|p| {
                let shifted: Vec<f64> = values.iter().map(|v| v * (p as f64 + 1.0) / 7.0).collect();
                codec::encode(&cfg, n, &shifted).unwrap()
            })
            .collect();
        let want = inputs.iter().skip(1).fold(inputs[0].elements().to_vec(), |acc, v| {
            codec::add_residues(n, &acc, v.elements())
        });
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for protocol in Protocol::ALL {
            let out = run_round(protocol, key().public_key(), &inputs, &[], 1, &mut rng).unwrap();
            let got: Vec<BigUint> = out
                .aggregate
                .iter()
                .map(|c| key().private_key().decrypt(c).unwrap())
                .collect();
            prop_assert_eq!(&got, &want, "{}", protocol);
        }
    }

    #[test]
    fn allreduce_sends_parties_minus_one_chunks(parties in 2usize..=8, len in 1usize..=20) {
        let cfg = CodecConfig::default();
        let n = key().public_key().n();
        let inputs: Vec<_> = (0..parties)
            .map(|_| codec::encode(&cfg, n, &vec![0.5; len]).unwrap())
            .collect();
        let mut rng = ChaCha20Rng::seed_from_u64(len as u64);
        let out = run_round(Protocol::AllReduce, key().public_key(), &inputs, &[], 1, &mut rng).unwrap();
        for r in 1..=parties as u16 {
            prop_assert_eq!(out.sent_by(fedcrypt_core::Rank::new(r).unwrap()), parties - 1);
        }
    }
}
