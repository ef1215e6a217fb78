//! Fixed-point ring arithmetic and pairwise additive masks.
//!
//! Reals are embedded into Z/2^64 with `scale_bits` fractional bits. Masks
//! are built from PRG streams seeded by pairwise secrets, signed by party
//! index order, so that the masks of all participants in a group sum to
//! exactly zero.

use std::collections::BTreeMap;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};

use thiserror::Error;

use crate::crypto::{prg_expand_stream, KEY_LEN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskingError {
    #[error("value {value} is outside the fixed-point range (|x| < {limit})")]
    RangeOverflow { value: f64, limit: f64 },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("no pairwise seed for peer {peer} of party {party}")]
    MissingPeer { party: u16, peer: u16 },

    #[error("malformed ring vector encoding")]
    Malformed,
}

/// An element of Z/2^64.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ring(pub u64);

impl Add for Ring {
    type Output = Ring;
    fn add(self, rhs: Ring) -> Ring {
        Ring(self.0.wrapping_add(rhs.0))
    }
}

impl Sub for Ring {
    type Output = Ring;
    fn sub(self, rhs: Ring) -> Ring {
        Ring(self.0.wrapping_sub(rhs.0))
    }
}

impl Neg for Ring {
    type Output = Ring;
    fn neg(self) -> Ring {
        Ring(self.0.wrapping_neg())
    }
}

impl AddAssign for Ring {
    fn add_assign(&mut self, rhs: Ring) {
        self.0 = self.0.wrapping_add(rhs.0);
    }
}

impl SubAssign for Ring {
    fn sub_assign(&mut self, rhs: Ring) {
        self.0 = self.0.wrapping_sub(rhs.0);
    }
}

impl Sum for Ring {
    fn sum<I: Iterator<Item = Ring>>(iter: I) -> Ring {
        iter.fold(Ring(0), Add::add)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointCodec {
    pub scale_bits: u32,
    /// Upper bound on how many encoded values are ever added together.
    pub max_summands: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        FixedPointCodec {
            scale_bits: 24,
            max_summands: 256,
        }
    }
}

impl FixedPointCodec {
    pub fn new(scale_bits: u32, max_summands: u32) -> Self {
        assert!(scale_bits < 62, "scale_bits must leave room for an integer part");
        assert!(max_summands >= 1);
        FixedPointCodec {
            scale_bits,
            max_summands,
        }
    }

    fn scale(&self) -> f64 {
        (1u64 << self.scale_bits) as f64
    }

    /// Largest magnitude accepted by [`encode`](Self::encode), exclusive.
    pub fn limit(&self) -> f64 {
        2f64.powi(63 - self.scale_bits as i32) / self.max_summands as f64
    }

    /// Worst-case round-trip error of a single value.
    pub fn resolution(&self) -> f64 {
        1.0 / self.scale()
    }

    pub fn encode(&self, x: f64) -> Result<Ring, MaskingError> {
        let limit = self.limit();
        if !x.is_finite() || x.abs() >= limit {
            return Err(MaskingError::RangeOverflow { value: x, limit });
        }
        Ok(Ring((x * self.scale()).round() as i64 as u64))
    }

    pub fn decode(&self, e: Ring) -> f64 {
        e.0 as i64 as f64 / self.scale()
    }

    pub fn encode_all(&self, xs: &[f64]) -> Result<Vec<Ring>, MaskingError> {
        xs.iter().map(|&x| self.encode(x)).collect()
    }

    pub fn decode_all(&self, es: &[Ring]) -> Vec<f64> {
        es.iter().map(|&e| self.decode(e)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Forward = 1,
    Backward = 2,
}

/// Selects which slice of each pairwise PRG a mask is drawn from.
///
/// The epoch is already bound into the seed; `(round, direction, group)`
/// pick one of the 2^64 disjoint ChaCha streams, so no mask is reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskStream {
    pub epoch: u64,
    pub round: u32,
    pub direction: Direction,
    pub group: u16,
}

impl MaskStream {
    pub fn new(epoch: u64, round: u32, direction: Direction, group: u16) -> Self {
        MaskStream {
            epoch,
            round,
            direction,
            group,
        }
    }

    pub fn stream_id(&self) -> u64 {
        ((self.round as u64) << 32) | ((self.direction as u64) << 16) | self.group as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVector {
    pub elements: Vec<Ring>,
    pub owner: u16,
    pub epoch: u64,
    pub round: u32,
}

impl MaskVector {
    pub fn zeros(owner: u16, length: usize, stream: MaskStream) -> Self {
        MaskVector {
            elements: vec![Ring(0); length],
            owner,
            epoch: stream.epoch,
            round: stream.round,
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// `n_i = -Σ_{j<i} PRG(ss_ij) + Σ_{j>i} PRG(ss_ij)` over the other members
/// of `participants`.
pub fn compute_mask(
    party: u16,
    participants: &[u16],
    peer_seeds: &BTreeMap<u16, [u8; KEY_LEN]>,
    length: usize,
    stream: MaskStream,
) -> Result<MaskVector, MaskingError> {
    let mut mask = MaskVector::zeros(party, length, stream);
    for &peer in participants.iter().filter(|&&p| p != party) {
        let seed = peer_seeds
            .get(&peer)
            .ok_or(MaskingError::MissingPeer { party, peer })?;
        let noise = prg_expand_stream(seed, stream.stream_id(), length);
        if peer < party {
            mask.elements.iter_mut().zip(noise).for_each(|(m, r)| *m -= r);
        } else {
            mask.elements.iter_mut().zip(noise).for_each(|(m, r)| *m += r);
        }
    }
    Ok(mask)
}

/// `out[k] = encode(plain[k]) + mask[k]`.
pub fn mask_values(
    plain: &[f64],
    codec: &FixedPointCodec,
    mask: &MaskVector,
) -> Result<Vec<Ring>, MaskingError> {
    if plain.len() != mask.len() {
        return Err(MaskingError::LengthMismatch {
            expected: mask.len(),
            actual: plain.len(),
        });
    }
    plain
        .iter()
        .zip(&mask.elements)
        .map(|(&x, &m)| Ok(codec.encode(x)? + m))
        .collect()
}

/// Element-wise sum of equally long ring vectors. An empty input sums to
/// an empty vector.
pub fn sum_masked<V: AsRef<[Ring]>>(contributions: &[V]) -> Result<Vec<Ring>, MaskingError> {
    let Some(first) = contributions.first() else {
        return Ok(Vec::new());
    };
    let mut acc = first.as_ref().to_vec();
    for c in &contributions[1..] {
        let c = c.as_ref();
        if c.len() != acc.len() {
            return Err(MaskingError::LengthMismatch {
                expected: acc.len(),
                actual: c.len(),
            });
        }
        acc.iter_mut().zip(c).for_each(|(a, &b)| *a += b);
    }
    Ok(acc)
}

/// `count (u32 LE) ‖ words (u64 LE)`.
pub fn encode_ring_vec(v: &[Ring]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * v.len());
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for r in v {
        out.extend_from_slice(&r.0.to_le_bytes());
    }
    out
}

pub fn decode_ring_vec(bytes: &[u8]) -> Result<Vec<Ring>, MaskingError> {
    let n = bytes
        .get(..4)
        .map(|h| u32::from_le_bytes(h.try_into().unwrap()) as usize)
        .ok_or(MaskingError::Malformed)?;
    let body = &bytes[4..];
    if body.len() != 8 * n {
        return Err(MaskingError::Malformed);
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| Ring(u64::from_le_bytes(c.try_into().unwrap())))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn codec() -> FixedPointCodec {
        FixedPointCodec::default()
    }

    /// Pairwise seeds for `n` parties, as each party would see them.
    fn seeds_for(n: u16, rng: &mut impl Rng) -> Vec<BTreeMap<u16, [u8; 32]>> {
        let mut views = vec![BTreeMap::new(); n as usize];
        for i in 0..n {
            for j in (i + 1)..n {
                let s: [u8; 32] = rng.gen();
                views[i as usize].insert(j, s);
                views[j as usize].insert(i, s);
            }
        }
        views
    }

    fn stream() -> MaskStream {
        MaskStream::new(0, 0, Direction::Forward, 0)
    }

    #[test]
    fn encode_examples() {
        let c = codec();
        assert_eq!(c.encode(0.0).unwrap(), Ring(0));
        assert_eq!(c.decode(Ring(0)), 0.0);
        // 1.5 * 2^24
        assert_eq!(c.encode(1.5).unwrap(), Ring(25_165_824));
        assert_eq!(c.decode(Ring(25_165_824)), 1.5);
        // two's complement of 2^24
        let minus_one = Ring(0u64.wrapping_sub(1 << 24));
        assert_eq!(c.encode(-1.0).unwrap(), minus_one);
        assert_eq!(c.decode(minus_one), -1.0);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let c = codec();
        assert!(matches!(c.encode(c.limit()), Err(MaskingError::RangeOverflow { .. })));
        assert!(c.encode(f64::NAN).is_err());
        assert!(c.encode(f64::INFINITY).is_err());
        assert!(c.encode(-c.limit() * 0.999).is_ok());
    }

    #[test]
    fn two_party_masks_are_opposite() {
        let views = seeds_for(2, &mut ChaCha8Rng::seed_from_u64(1));
        let m0 = compute_mask(0, &[0, 1], &views[0], 8, stream()).unwrap();
        let m1 = compute_mask(1, &[0, 1], &views[1], 8, stream()).unwrap();
        let prg = prg_expand_stream(&views[0][&1], stream().stream_id(), 8);
        assert_eq!(m0.elements, prg);
        assert_eq!(m1.elements, prg.iter().map(|&r| -r).collect::<Vec<_>>());
        assert!(sum_masked(&[m0.elements, m1.elements]).unwrap().iter().all(|r| r.0 == 0));
    }

    #[test]
    fn three_party_masks_cancel() {
        let views = seeds_for(3, &mut ChaCha8Rng::seed_from_u64(2));
        let ms: Vec<_> = (0..3)
            .map(|i| compute_mask(i, &[0, 1, 2], &views[i as usize], 8, stream()).unwrap().elements)
            .collect();
        assert_eq!(sum_masked(&ms).unwrap(), vec![Ring(0); 8]);
    }

    #[test]
    fn lone_party_has_zero_mask() {
        let m = compute_mask(0, &[0], &BTreeMap::new(), 4, stream()).unwrap();
        assert_eq!(m.elements, vec![Ring(0); 4]);
    }

    #[test]
    fn missing_peer_is_reported() {
        let views = seeds_for(2, &mut ChaCha8Rng::seed_from_u64(3));
        let err = compute_mask(0, &[0, 1, 2], &views[0], 4, stream()).unwrap_err();
        assert_eq!(err, MaskingError::MissingPeer { party: 0, peer: 2 });
    }

    #[test]
    fn streams_are_fresh_per_round_and_direction() {
        let views = seeds_for(2, &mut ChaCha8Rng::seed_from_u64(4));
        let a = compute_mask(0, &[0, 1], &views[0], 8, stream()).unwrap();
        let b = compute_mask(0, &[0, 1], &views[0], 8, MaskStream::new(0, 1, Direction::Forward, 0))
            .unwrap();
        let c = compute_mask(0, &[0, 1], &views[0], 8, MaskStream::new(0, 0, Direction::Backward, 0))
            .unwrap();
        assert_ne!(a.elements, b.elements);
        assert_ne!(a.elements, c.elements);
    }

    #[test]
    fn mask_values_identities() {
        let views = seeds_for(2, &mut ChaCha8Rng::seed_from_u64(5));
        let m = compute_mask(0, &[0, 1], &views[0], 3, stream()).unwrap();
        assert_eq!(mask_values(&[0.0; 3], &codec(), &m).unwrap(), m.elements);
        let zero = MaskVector::zeros(0, 3, stream());
        let plain = [0.25, -3.0, 7.5];
        assert_eq!(mask_values(&plain, &codec(), &zero).unwrap(), codec().encode_all(&plain).unwrap());
        assert!(matches!(
            mask_values(&[1.0], &codec(), &m),
            Err(MaskingError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn two_party_sum_decodes() {
        let c = codec();
        let views = seeds_for(2, &mut ChaCha8Rng::seed_from_u64(6));
        let m0 = compute_mask(0, &[0, 1], &views[0], 1, stream()).unwrap();
        let m1 = compute_mask(1, &[0, 1], &views[1], 1, stream()).unwrap();
        let a = mask_values(&[1.0], &c, &m0).unwrap();
        let b = mask_values(&[2.0], &c, &m1).unwrap();
        let total = c.decode(sum_masked(&[a, b]).unwrap()[0]);
        assert!((total - 3.0).abs() <= 2.0 * c.resolution());
    }

    #[test]
    fn missing_contribution_garbles_the_sum() {
        let c = codec();
        let views = seeds_for(3, &mut ChaCha8Rng::seed_from_u64(7));
        let plain = [vec![0.5; 16], vec![1.0; 16], vec![-0.25; 16]];
        let masked: Vec<_> = (0..3u16)
            .map(|i| {
                let m = compute_mask(i, &[0, 1, 2], &views[i as usize], 16, stream()).unwrap();
                mask_values(&plain[i as usize], &c, &m).unwrap()
            })
            .collect();
        let partial = c.decode_all(&sum_masked(&masked[..2]).unwrap());
        let truth = 1.5;
        assert!(partial.iter().all(|&x| (x - truth).abs() > 1.0));
    }

    #[test]
    fn sum_masked_edge_cases() {
        assert!(sum_masked::<Vec<Ring>>(&[]).unwrap().is_empty());
        assert!(matches!(
            sum_masked(&[vec![Ring(1)], vec![Ring(1), Ring(2)]]),
            Err(MaskingError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn masked_output_is_uniform() {
        // Chi-square over the top 4 bits of a masked constant, 16 bins.
        let c = codec();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples = 3200;
        let mut bins = [0usize; 16];
        for _ in 0..samples {
            let views = seeds_for(2, &mut rng);
            let m = compute_mask(0, &[0, 1], &views[0], 1, stream()).unwrap();
            let out = mask_values(&[1.25], &c, &m).unwrap()[0];
            bins[(out.0 >> 60) as usize] += 1;
        }
        let expected = samples as f64 / 16.0;
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // df = 15, p = 0.001 critical value.
        assert!(chi2 < 37.7, "chi2 = {chi2}");
    }

    #[test]
    fn ring_vec_codec() {
        let v = vec![Ring(0), Ring(u64::MAX), Ring(12345)];
        let bytes = encode_ring_vec(&v);
        assert_eq!(bytes.len(), 4 + 24);
        assert_eq!(decode_ring_vec(&bytes).unwrap(), v);
        assert_eq!(decode_ring_vec(&bytes[..10]), Err(MaskingError::Malformed));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn masks_cancel_exactly(n in 2u16..=8, len_idx in 0usize..3, seed in any::<u64>()) {
            let len = [1usize, 64, 4096][len_idx];
            let views = seeds_for(n, &mut ChaCha8Rng::seed_from_u64(seed));
            let parts: Vec<u16> = (0..n).collect();
            let masks: Vec<_> = parts
                .iter()
                .map(|&i| compute_mask(i, &parts, &views[i as usize], len, stream()).unwrap().elements)
                .collect();
            prop_assert!(sum_masked(&masks).unwrap().iter().all(|r| r.0 == 0));
        }

        #[test]
        fn aggregate_matches_plain_sum(
            n in 2u16..=6,
            seed in any::<u64>(),
            values in proptest::collection::vec(-1000.0f64..1000.0, 6 * 8),
        ) {
            let c = codec();
            let views = seeds_for(n, &mut ChaCha8Rng::seed_from_u64(seed));
            let parts: Vec<u16> = (0..n).collect();
            let per_party: Vec<&[f64]> = values.chunks(8).take(n as usize).collect();
            let masked: Vec<_> = parts
                .iter()
                .map(|&i| {
                    let m = compute_mask(i, &parts, &views[i as usize], 8, stream()).unwrap();
                    mask_values(per_party[i as usize], &c, &m).unwrap()
                })
                .collect();
            let decoded = c.decode_all(&sum_masked(&masked).unwrap());
            for k in 0..8 {
                let truth: f64 = per_party.iter().map(|v| v[k]).sum();
                prop_assert!((decoded[k] - truth).abs() <= n as f64 * c.resolution());
            }
        }

        #[test]
        fn overflow_guard_precedes_wraparound(frac in -1.5f64..1.5, scale_bits in 8u32..40, summands in 1u32..512) {
            let c = FixedPointCodec::new(scale_bits, summands);
            let x = frac * c.limit();
            match c.encode(x) {
                Ok(e) => {
                    // Any sum of up to max_summands accepted values stays in range.
                    let total: Ring = std::iter::repeat(e).take(summands as usize).sum();
                    let expect = summands as f64 * x;
                    let tol = summands as f64 * c.resolution() + expect.abs() * 1e-12;
                    prop_assert!((c.decode(total) - expect).abs() <= tol);
                }
                Err(MaskingError::RangeOverflow { .. }) => prop_assert!(x.abs() >= c.limit()),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
