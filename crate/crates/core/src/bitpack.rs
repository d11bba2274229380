//! Sign-bit packing of `f32` slices.
//!
//! Binarization takes the raw IEEE-754 sign bit: bit 1 stands for logical −1,
//! bit 0 for logical +1. That makes `-0.0` and negatively signed NaN pack as 1
//! without any comparison against zero.
//!
//! Bits are little-endian inside each 64-bit word (bit 0 is the lowest element
//! index) and bits past the logical length are always 0.

use crate::error::{Error, Result};

/// 64 packed binarized elements.
pub type BitWord = u64;

pub const WORD_BITS: usize = 64;

/// Binarized sequence stored as little-endian bit words.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct PackedBits {
    words: Vec<BitWord>,
    len: usize,
}

impl PackedBits {
    /// Wrap raw words, checking the length and zero-padding invariants.
    pub fn from_words(words: Vec<BitWord>, len: usize) -> Result<Self> {
        if words.len() != words_for(len) {
            return Err(Error::InvalidParameter(format!(
                "{} words cannot hold exactly {} bits",
                words.len(),
                len
            )));
        }
        if let Some(&last) = words.last() {
            if last & !tail_mask(len) != 0 {
                return Err(Error::InvalidParameter(
                    "bits past the logical length must be zero".into(),
                ));
            }
        }
        Ok(Self { words, len })
    }

    pub fn words(&self) -> &[BitWord] {
        &self.words
    }

    pub fn into_words(self) -> Vec<BitWord> {
        self.words
    }

    /// Number of valid bits.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range for length {}", self.len);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Little-endian byte image of the words, truncated to `ceil(len / 8)` bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        bytes.truncate(self.len.div_ceil(8));
        bytes
    }

    /// Up to 64 bits starting at `start`, right-aligned. Bits past `len` read as 0.
    pub(crate) fn bits_at(&self, start: usize, count: usize) -> u64 {
        debug_assert!(count <= WORD_BITS);
        if count == 0 || start >= self.len {
            return 0;
        }
        let word = start / WORD_BITS;
        let shift = start % WORD_BITS;
        let mut out = self.words[word] >> shift;
        if shift != 0 && word + 1 < self.words.len() {
            out |= self.words[word + 1] << (WORD_BITS - shift);
        }
        if count < WORD_BITS {
            out &= (1u64 << count) - 1;
        }
        out
    }
}

pub(crate) fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Mask of the valid bits in the last word of a `len`-bit sequence.
pub(crate) fn tail_mask(len: usize) -> u64 {
    match len % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Raw sign bit of `x`: 1 for a negative sign (including `-0.0` and signed NaN).
#[inline]
pub fn binarize_bit(x: f32) -> u8 {
    (x.to_bits() >> 31) as u8
}

/// Baseline packing: one element per step, strictly sequential.
pub fn pack_naive(values: &[f32]) -> PackedBits {
    let mut words = vec![0u64; words_for(values.len())];
    for (i, &v) in values.iter().enumerate() {
        words[i / WORD_BITS] |= (binarize_bit(v) as u64) << (i % WORD_BITS);
    }
    PackedBits {
        words,
        len: values.len(),
    }
}

/// A 128-bit register seen as four 32-bit lanes.
type Reg = [u32; 4];

const BLOCK: usize = 128;

/// Shift every lane of `src` right by `k` and insert it below the top `k`
/// bits of the matching lane of `dst`.
#[inline(always)]
fn shift_right_insert(dst: Reg, src: Reg, k: u32) -> Reg {
    let keep = !(u32::MAX >> k);
    [
        (dst[0] & keep) | (src[0] >> k),
        (dst[1] & keep) | (src[1] >> k),
        (dst[2] & keep) | (src[2] >> k),
        (dst[3] & keep) | (src[3] >> k),
    ]
}

/// Gather the sign bits of 128 raw floats into two words.
///
/// Register `r` holds, in lane `l`, element `32 * l + 31 - r`. Five rounds of
/// shift-right-insert halve the register count each time (pairs, quadruples,
/// ... full lanes); every round works on independent registers, so no insert
/// waits on the one issued just before it. After the last round bit `j` of
/// lane `l` is the sign of element `32 * l + j`.
#[inline]
fn gather_block(block: &[u32; BLOCK]) -> [u64; 2] {
    let mut regs = [[0u32; 4]; 32];
    for (r, reg) in regs.iter_mut().enumerate() {
        for (l, lane) in reg.iter_mut().enumerate() {
            *lane = block[32 * l + 31 - r];
        }
    }

    let mut live = 32;
    let mut k = 1;
    while live > 1 {
        for r in 0..live / 2 {
            regs[r] = shift_right_insert(regs[2 * r], regs[2 * r + 1], k);
        }
        live /= 2;
        k *= 2;
    }

    let lanes = regs[0];
    [
        lanes[0] as u64 | (lanes[1] as u64) << 32,
        lanes[2] as u64 | (lanes[3] as u64) << 32,
    ]
}

/// Multi-element sign-bit gather. Bit-identical to [`pack_naive`].
pub fn pack_signbits(values: &[f32]) -> PackedBits {
    let mut words = Vec::with_capacity(words_for(values.len()));
    pack_signbits_into(values, &mut words);
    PackedBits {
        words,
        len: values.len(),
    }
}

/// Append the packed words of `values` to `out`.
pub(crate) fn pack_signbits_into(values: &[f32], out: &mut Vec<u64>) {
    let mut block = [0u32; BLOCK];
    let mut chunks = values.chunks_exact(BLOCK);
    for chunk in &mut chunks {
        for (dst, v) in block.iter_mut().zip(chunk) {
            *dst = v.to_bits();
        }
        out.extend_from_slice(&gather_block(&block));
    }

    let rest = chunks.remainder();
    if !rest.is_empty() {
        block = [0u32; BLOCK];
        for (dst, v) in block.iter_mut().zip(rest) {
            *dst = v.to_bits();
        }
        let words = gather_block(&block);
        out.extend_from_slice(&words[..words_for(rest.len())]);
    }
}

/// Logical values (−1 for bit 1, +1 for bit 0).
pub fn unpack(p: &PackedBits) -> Vec<i8> {
    (0..p.len).map(|i| if p.bit(i) { -1 } else { 1 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn signbit_oracle(values: &[f32]) -> Vec<u8> {
        let mut bytes = vec![0u8; values.len().div_ceil(8)];
        for (i, v) in values.iter().enumerate() {
            if v.is_sign_negative() {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        bytes
    }

    #[test]
    fn binarize_uses_the_sign_bit() {
        assert_eq!(binarize_bit(-1.5), 1);
        assert_eq!(binarize_bit(0.0), 0);
        assert_eq!(binarize_bit(-0.0), 1);
        assert_eq!(binarize_bit(3.0), 0);
        assert_eq!(binarize_bit(f32::from_bits(0xFFC0_0000)), 1);
        assert_eq!(binarize_bit(f32::NAN.copysign(1.0)), 0);
    }

    #[test]
    fn naive_mixed_byte() {
        let v = [-1.5f32, 0.25, -0.0, 3.0, -2.0, 0.0, -7.0, 1.0];
        assert_eq!(signbit_oracle(&v), vec![0x55]);
        let p = pack_naive(&v);
        assert_eq!(p.words(), &[0x55]);
        assert_eq!(p.len(), 8);
        assert_eq!(pack_signbits(&v), p);
    }

    #[test]
    fn empty_input() {
        let p = pack_naive(&[]);
        assert!(p.words().is_empty());
        assert_eq!(p.len(), 0);
        assert_eq!(pack_signbits(&[]), p);
        assert!(unpack(&p).is_empty());
    }

    #[test]
    fn all_negative_word() {
        let v = [-1.0f32; 64];
        assert_eq!(pack_naive(&v).words(), &[u64::MAX]);
        assert_eq!(pack_signbits(&v).words(), &[u64::MAX]);
    }

    #[test]
    fn signed_nan_packs_as_one() {
        let neg_nan = f32::from_bits(0xFFC0_0001);
        let p = pack_signbits(&[1.0, neg_nan, 2.0]);
        assert_eq!(p.words(), &[0b010]);
    }

    #[test]
    fn unpack_maps_bits() {
        let p = PackedBits::from_words(vec![0x01], 2).unwrap();
        assert_eq!(unpack(&p), vec![-1, 1]);
    }

    #[test]
    fn from_words_rejects_dirty_padding() {
        assert!(PackedBits::from_words(vec![0b100], 2).is_err());
        assert!(PackedBits::from_words(vec![0, 0], 64).is_err());
    }

    #[test]
    fn gather_handles_partial_blocks() {
        for len in [1usize, 63, 64, 65, 127, 128, 129, 200, 256, 300] {
            let v: Vec<f32> = (0..len)
                .map(|i| if (i * 7 + len) % 3 == 0 { -1.0 } else { 1.0 })
                .collect();
            assert_eq!(pack_signbits(&v), pack_naive(&v), "len {len}");
        }
    }

    #[test]
    fn bits_at_crosses_word_boundaries() {
        let v: Vec<f32> = (0..150).map(|i| if i % 5 == 0 { -1.0 } else { 1.0 }).collect();
        let p = pack_naive(&v);
        for start in [0usize, 3, 60, 64, 100, 140] {
            let count = 16.min(150 - start);
            let got = p.bits_at(start, count);
            for j in 0..count {
                assert_eq!((got >> j) & 1 == 1, p.bit(start + j));
            }
        }
    }

    fn any_f32() -> impl Strategy<Value = f32> {
        prop_oneof![
            any::<u32>().prop_map(f32::from_bits),
            Just(-0.0f32),
            Just(0.0f32),
            Just(f32::INFINITY),
            Just(f32::NEG_INFINITY),
            Just(f32::NAN),
            Just(f32::from_bits(0xFFC0_0000)),
        ]
    }

    proptest! {
        #[test]
        fn strategies_agree(v in prop::collection::vec(any_f32(), 0..400)) {
            let naive = pack_naive(&v);
            let gathered = pack_signbits(&v);
            prop_assert_eq!(naive.to_bytes(), signbit_oracle(&v));
            prop_assert_eq!(&gathered, &naive);
            if let Some(&last) = gathered.words().last() {
                prop_assert_eq!(last & !tail_mask(v.len()), 0);
            }
        }

        #[test]
        fn unpack_round_trip(v in prop::collection::vec(any_f32(), 0..200)) {
            let logical = unpack(&pack_naive(&v));
            let expect: Vec<i8> = v.iter().map(|x| if x.is_sign_negative() { -1 } else { 1 }).collect();
            prop_assert_eq!(logical, expect);
        }
    }
}
