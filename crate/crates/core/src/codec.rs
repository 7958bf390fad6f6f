// SPDX-License-Identifier: Apache-2.0

//! Signed fixed-point encoding of gradient vectors into Paillier plaintexts.
//!
//! A real `x` becomes `round(x * 2^scale_bits) mod n`; negative values wrap
//! into the upper half of `[0, n)`. Sums of at most `max_parties` encodings
//! stay strictly inside `(-n/2, n/2)` as long as [`CodecConfig::validate`]
//! accepts the configuration for the key in use.

use std::ops::Range;

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{Signed, ToPrimitive, Zero};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("element {index} is not finite")]
    NonFinite { index: usize },
    #[error("element {index} = {value} exceeds magnitude bound {bound}")]
    MagnitudeExceeded { index: usize, value: f64, bound: f64 },
    #[error("{parties} parties exceeds configured maximum {max}")]
    TooManyParties { parties: u32, max: u32 },
    #[error("parties must be at least 1")]
    NoParties,
    #[error("codec needs {needed} bits of headroom, key has {key_bits}")]
    InsufficientHeadroom { needed: u64, key_bits: u64 },
    #[error("invalid codec configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("residue at {index} is outside the decodable range")]
    Overflow { index: usize },
    #[error("chunk count must be at least 1")]
    ZeroParts,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    /// Fixed-point fraction bits.
    pub scale_bits: u32,
    /// Largest number of encodings that may be summed before decoding.
    pub max_parties: u32,
    /// Largest accepted `|x|` per element.
    pub magnitude_bound: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            scale_bits: 40,
            max_parties: 64,
            magnitude_bound: 65536.0,
        }
    }
}

fn ceil_log2_u32(x: u32) -> u64 {
    if x <= 1 {
        0
    } else {
        (32 - (x - 1).leading_zeros()) as u64
    }
}

fn ceil_log2_f64(x: f64) -> u64 {
    if x <= 1.0 {
        0
    } else {
        x.log2().ceil() as u64
    }
}

impl CodecConfig {
    /// `ceil(log2 P_max) + scale_bits + ceil(log2 B) + 1`.
    pub fn headroom_bits(&self) -> u64 {
        ceil_log2_u32(self.max_parties) + self.scale_bits as u64 + ceil_log2_f64(self.magnitude_bound) + 1
    }

    /// Checks the configuration against a key size, keeping a factor-two
    /// margin: `2 * headroom_bits < key_bits`.
    pub fn validate(&self, key_bits: u64) -> Result<(), CodecError> {
        if !(self.magnitude_bound.is_finite() && self.magnitude_bound > 0.0) {
            return Err(CodecError::InvalidConfig("magnitude bound must be positive and finite"));
        }
        if self.max_parties == 0 {
            return Err(CodecError::InvalidConfig("max_parties must be at least 1"));
        }
        // scaled values must stay exactly representable as i128
        if self.scale_bits as u64 + ceil_log2_f64(self.magnitude_bound) > 120 {
            return Err(CodecError::InvalidConfig("scale_bits + log2(bound) exceeds 120"));
        }
        let needed = 2 * self.headroom_bits();
        if needed >= key_bits {
            return Err(CodecError::InsufficientHeadroom { needed, key_bits });
        }
        Ok(())
    }

    /// Grid spacing `2^-scale_bits`.
    pub fn resolution(&self) -> f64 {
        (-(self.scale_bits as f64)).exp2()
    }

    fn scale(&self) -> f64 {
        (self.scale_bits as f64).exp2()
    }
}

/// Per-element plaintext residues of one gradient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVector {
    elements: Vec<BigUint>,
    config: CodecConfig,
}

impl EncodedVector {
    pub fn from_residues(config: CodecConfig, elements: Vec<BigUint>) -> Self {
        Self { elements, config }
    }

    pub fn elements(&self) -> &[BigUint] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn into_elements(self) -> Vec<BigUint> {
        self.elements
    }
}

/// Maps each element to `round(x * 2^scale_bits) mod n`.
pub fn encode(cfg: &CodecConfig, n: &BigUint, values: &[f64]) -> Result<EncodedVector, CodecError> {
    let scale = cfg.scale();
    let elements = values
        .iter()
        .enumerate()
        .map(|(index, &x)| {
            if !x.is_finite() {
                return Err(CodecError::NonFinite { index });
            }
            if x.abs() > cfg.magnitude_bound {
                return Err(CodecError::MagnitudeExceeded {
                    index,
                    value: x,
                    bound: cfg.magnitude_bound,
                });
            }
            // exact: scaling by a power of two, then rounding half away from zero
            let fixed = (x * scale).round() as i128;
            Ok(to_residue(fixed, n))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EncodedVector { elements, config: *cfg })
}

fn to_residue(fixed: i128, n: &BigUint) -> BigUint {
    let magnitude = BigUint::from(fixed.unsigned_abs()) % n;
    if fixed < 0 && !magnitude.is_zero() {
        n - magnitude
    } else {
        magnitude
    }
}

/// Interprets `residue` as a signed integer in `(-n/2, n/2]`.
pub fn center(residue: &BigUint, n: &BigUint) -> BigInt {
    if residue << 1u32 >= *n {
        BigInt::from_biguint(Sign::Plus, residue.clone()) - BigInt::from_biguint(Sign::Plus, n.clone())
    } else {
        BigInt::from_biguint(Sign::Plus, residue.clone())
    }
}

/// Decodes a sum of `parties` encodings into the element-wise mean.
pub fn decode_sum(cfg: &CodecConfig, n: &BigUint, residues: &[BigUint], parties: u32) -> Result<Vec<f64>, CodecError> {
    if parties == 0 {
        return Err(CodecError::NoParties);
    }
    if parties > cfg.max_parties {
        return Err(CodecError::TooManyParties {
            parties,
            max: cfg.max_parties,
        });
    }
    let scale = cfg.scale();
    let limit = BigInt::from(cfg.max_parties) * BigInt::from((cfg.magnitude_bound * scale).ceil() as i128);
    residues
        .iter()
        .enumerate()
        .map(|(index, r)| {
            if r >= n {
                return Err(CodecError::Overflow { index });
            }
            let v = center(r, n);
            if v.abs() > limit {
                return Err(CodecError::Overflow { index });
            }
            let v = v.to_i128().ok_or(CodecError::Overflow { index })?;
            Ok(v as f64 / scale / parties as f64)
        })
        .collect()
}

/// Contiguous chunk boundaries: the first `len % parts` chunks get
/// `ceil(len / parts)` elements, the rest `floor(len / parts)`.
pub fn chunk_ranges(len: usize, parts: usize) -> Result<Vec<Range<usize>>, CodecError> {
    if parts == 0 {
        return Err(CodecError::ZeroParts);
    }
    let base = len / parts;
    let extra = len % parts;
    let mut start = 0;
    Ok((0..parts)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let range = start..start + size;
            start += size;
            range
        })
        .collect())
}

/// Splits `items` per [`chunk_ranges`].
pub fn chunk<T>(items: &[T], parts: usize) -> Result<Vec<&[T]>, CodecError> {
    Ok(chunk_ranges(items.len(), parts)?
        .into_iter()
        .map(|r| &items[r])
        .collect())
}

/// Sum of residues modulo `n`, the plaintext image of homomorphic addition.
pub fn add_residues(n: &BigUint, a: &[BigUint], b: &[BigUint]) -> Vec<BigUint> {
    a.iter().zip(b).map(|(x, y)| (x + y) % n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::One;
    use proptest::prelude::*;

    fn big_n() -> BigUint {
        // any large odd modulus works for the codec
        (BigUint::one() << 511u32) + 12345u32
    }

    fn cfg16() -> CodecConfig {
        CodecConfig {
            scale_bits: 16,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn encodes_reference_values() {
        let n = big_n();
        let e = encode(&cfg16(), &n, &[0.0, 1.5, -1.0]).unwrap();
        assert_eq!(e.elements()[0], BigUint::zero());
        assert_eq!(e.elements()[1], BigUint::from(98304u32));
        assert_eq!(e.elements()[2], &n - 65536u32);
    }

    #[test]
    fn rejects_bad_elements() {
        let n = big_n();
        let cfg = cfg16();
        assert_eq!(
            encode(&cfg, &n, &[1.0, f64::NAN]).unwrap_err(),
            CodecError::NonFinite { index: 1 }
        );
        assert!(matches!(
            encode(&cfg, &n, &[f64::INFINITY]).unwrap_err(),
            CodecError::NonFinite { index: 0 }
        ));
        assert!(matches!(
            encode(&cfg, &n, &[65536.5]).unwrap_err(),
            CodecError::MagnitudeExceeded { index: 0, .. }
        ));
        assert!(encode(&cfg, &n, &[65536.0, -65536.0]).is_ok());
    }

    #[test]
    fn decodes_means() {
        let n = big_n();
        let cfg = CodecConfig::default();
        let sum = [1.0, 2.0, 3.0]
            .iter()
            .map(|&x| encode(&cfg, &n, &[x]).unwrap().into_elements())
            .reduce(|a, b| add_residues(&n, &a, &b))
            .unwrap();
        assert_eq!(decode_sum(&cfg, &n, &sum, 3).unwrap(), vec![2.0]);

        let a = encode(&cfg, &n, &[0.5]).unwrap();
        let b = encode(&cfg, &n, &[-0.5]).unwrap();
        let s = add_residues(&n, a.elements(), b.elements());
        assert_eq!(decode_sum(&cfg, &n, &s, 2).unwrap(), vec![0.0]);

        assert_eq!(
            decode_sum(&cfg, &n, &s, 65).unwrap_err(),
            CodecError::TooManyParties { parties: 65, max: 64 }
        );
        assert_eq!(decode_sum(&cfg, &n, &s, 0).unwrap_err(), CodecError::NoParties);
    }

    #[test]
    fn decode_flags_out_of_range_residues() {
        let n = big_n();
        let huge = &n >> 2u32;
        assert_eq!(
            decode_sum(&CodecConfig::default(), &n, &[huge], 1).unwrap_err(),
            CodecError::Overflow { index: 0 }
        );
    }

    #[test]
    fn headroom_validation() {
        let cfg = CodecConfig::default();
        // 6 + 40 + 16 + 1 = 63
        assert_eq!(cfg.headroom_bits(), 63);
        assert!(cfg.validate(512).is_ok());
        assert!(cfg.validate(126).is_err());
        assert!(cfg.validate(127).is_ok());
        let bad = CodecConfig { max_parties: 0, ..cfg };
        assert!(bad.validate(2048).is_err());
        let bad = CodecConfig {
            magnitude_bound: f64::NAN,
            ..cfg
        };
        assert!(bad.validate(2048).is_err());
    }

    #[test]
    fn chunk_sizes() {
        let sizes = |len, parts| -> Vec<usize> { chunk_ranges(len, parts).unwrap().iter().map(|r| r.len()).collect() };
        assert_eq!(sizes(10, 1), vec![10]);
        assert_eq!(sizes(10, 3), vec![4, 3, 3]);
        assert_eq!(sizes(2, 3), vec![1, 1, 0]);
        assert_eq!(chunk_ranges(4, 0).unwrap_err(), CodecError::ZeroParts);
    }

    #[test]
    fn chunk_then_concat_is_identity_exhaustive() {
        for len in 0..=64usize {
            let items: Vec<usize> = (0..len).collect();
            for parts in 1..=8 {
                let chunks = chunk(&items, parts).unwrap();
                assert_eq!(chunks.len(), parts);
                assert_eq!(chunks.concat(), items, "len {len} parts {parts}");
                let max = chunks.iter().map(|c| c.len()).max().unwrap();
                let min = chunks.iter().map(|c| c.len()).min().unwrap();
                assert!(max - min <= 1);
            }
        }
    }

    proptest! {
        #[test]
        fn single_party_round_trip(x in -65536.0f64..65536.0) {
            let n = big_n();
            let cfg = CodecConfig::default();
            let e = encode(&cfg, &n, &[x]).unwrap();
            let back = decode_sum(&cfg, &n, e.elements(), 1).unwrap()[0];
            prop_assert!((back - x).abs() <= cfg.resolution());
        }

        #[test]
        fn grid_values_sum_exactly(ints in proptest::collection::vec(-(1i64 << 50)..(1i64 << 50), 1..16)) {
            let n = big_n();
            let cfg = CodecConfig::default();
            let xs: Vec<f64> = ints.iter().map(|&k| k as f64 * cfg.resolution()).collect();
            let sum = xs
                .iter()
                .map(|&x| encode(&cfg, &n, &[x]).unwrap().into_elements())
                .reduce(|a, b| add_residues(&n, &a, &b))
                .unwrap();
            let total: i128 = ints.iter().map(|&k| k as i128).sum();
            let decoded = decode_sum(&cfg, &n, &sum, 1).unwrap()[0];
            prop_assert_eq!(decoded, total as f64 * cfg.resolution());
        }

        #[test]
        fn mean_error_is_half_ulp_of_grid(xs in proptest::collection::vec(-1000.0f64..1000.0, 1..12)) {
            let n = big_n();
            let cfg = CodecConfig::default();
            let parties = xs.len() as u32;
            let sum = xs
                .iter()
                .map(|&x| encode(&cfg, &n, &[x]).unwrap().into_elements())
                .reduce(|a, b| add_residues(&n, &a, &b))
                .unwrap();
            let decoded = decode_sum(&cfg, &n, &sum, parties).unwrap()[0];
            let mean = xs.iter().sum::<f64>() / parties as f64;
            // plus f64 rounding of the mean itself at |x| <= 1000
            let slack = 1000.0 * f64::EPSILON * 4.0;
            prop_assert!((decoded - mean).abs() <= cfg.resolution() / 2.0 + slack);
        }
    }
}
