// SPDX-License-Identifier: Apache-2.0

//! Probabilistic prime generation for Paillier moduli.

use std::sync::OnceLock;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;

/// Number of Miller-Rabin rounds used when generating key primes.
pub const MILLER_RABIN_ROUNDS: usize = 64;

const SIEVE_LIMIT: usize = 2000;

fn small_primes() -> &'static [u32] {
    static PRIMES: OnceLock<Vec<u32>> = OnceLock::new();
    PRIMES.get_or_init(|| {
        let mut composite = vec![false; SIEVE_LIMIT];
        let mut primes = Vec::new();
        for i in 2..SIEVE_LIMIT {
            if !composite[i] {
                primes.push(i as u32);
                let mut j = i * i;
                while j < SIEVE_LIMIT {
                    composite[j] = true;
                    j += i;
                }
            }
        }
        primes
    })
}

/// Miller-Rabin test with `rounds` random bases, preceded by trial division.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &p in small_primes() {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }

    let n_minus_one = n - 1u32;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;

    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_one);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = (&x * &x) % n;
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Draws random `bits`-bit candidates until one passes [`MILLER_RABIN_ROUNDS`] rounds.
///
/// The two most significant bits are forced on so that the product of two
/// such primes has exactly `2 * bits` bits.
pub fn random_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    assert!(bits >= 8, "prime size too small");
    loop {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return candidate;
        }
    }
}

pub(crate) fn lcm(a: &BigUint, b: &BigUint) -> BigUint {
    a.lcm(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn naive_is_prime(n: u64) -> bool {
        if n < 2 {
            return false;
        }
        let mut d = 2;
        while d * d <= n {
            if n % d == 0 {
                return false;
            }
            d += 1;
        }
        true
    }

    #[test]
    fn agrees_with_trial_division_below_20000() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for n in 0u64..20_000 {
            assert_eq!(
                is_probable_prime(&BigUint::from(n), 16, &mut rng),
                naive_is_prime(n),
                "n = {n}"
            );
        }
    }

    #[test]
    fn rejects_carmichael_numbers() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for n in [561u64, 1105, 1729, 2465, 2821, 6601, 8911, 41041, 825265, 321197185] {
            assert!(!is_probable_prime(&BigUint::from(n), 16, &mut rng), "{n}");
        }
    }

    #[test]
    fn accepts_known_large_prime() {
        // 2^127 - 1
        let m127 = (BigUint::one() << 127u32) - 1u32;
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(is_probable_prime(&m127, 32, &mut rng));
        assert!(!is_probable_prime(&(&m127 * 3u32), 32, &mut rng));
    }

    #[test]
    fn random_prime_has_requested_size() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for bits in [32u64, 64, 128, 256] {
            let p = random_prime(bits, &mut rng);
            assert_eq!(p.bits(), bits);
            assert!(p.bit(bits - 2));
        }
    }
}
