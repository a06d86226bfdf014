//! Packed binary codes, Hamming distances and radius enumeration.
//!
//! Bit `k` of a code is stored in word `k / 64`, bit `k % 64`. A set bit is
//! the `+1` entry of the `{-1, +1}` vector view, a cleared bit is `-1`. Codes
//! print as `0`/`1` strings with bit 0 first, so `"010"` has only bit 1 set.

use std::fmt;
use std::str::FromStr;

use crate::error::{check_len, Error, Result};
use crate::scalar::Scalar;

pub const MAX_BITS: usize = 256;
const WORDS: usize = MAX_BITS / 64;

/// A `q`-bit binary code, `1 <= q <= 256`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HashCode {
    q: u16,
    words: [u64; WORDS],
}

impl HashCode {
    /// All-zero code (every entry `-1`).
    pub fn zeros(q: usize) -> Result<Self> {
        if q == 0 || q > MAX_BITS {
            return Err(Error::arg(format!("code length {q} outside 1..={MAX_BITS}")));
        }
        Ok(HashCode {
            q: q as u16,
            words: [0; WORDS],
        })
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        let mut code = Self::zeros(bits.len())?;
        for (k, &b) in bits.iter().enumerate() {
            if b {
                code.words[k / 64] |= 1 << (k % 64);
            }
        }
        Ok(code)
    }

    /// Sign-binarizes `v`: bit `k` is set iff `v[k] > 0`, so zero maps to `-1`.
    pub fn from_signs<T: Scalar>(v: &[T]) -> Result<Self> {
        let mut code = Self::zeros(v.len())?;
        for (k, &x) in v.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::Numeric(format!("non-finite entry at position {k}")));
            }
            if x > T::zero() {
                code.words[k / 64] |= 1 << (k % 64);
            }
        }
        Ok(code)
    }

    /// Packs the low `q` bits of `value` (bit 0 of `value` is code bit 0).
    pub fn from_u64(value: u64, q: usize) -> Result<Self> {
        let mut code = Self::zeros(q)?;
        code.words[0] = if q >= 64 { value } else { value & ((1u64 << q) - 1) };
        Ok(code)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.q as usize
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn bit(&self, k: usize) -> bool {
        debug_assert!(k < self.len());
        self.words[k / 64] >> (k % 64) & 1 == 1
    }

    #[inline]
    pub fn flip(&mut self, k: usize) {
        debug_assert!(k < self.len());
        self.words[k / 64] ^= 1 << (k % 64);
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// The `{-1, +1}` vector view.
    pub fn to_pm1<T: Scalar>(&self) -> Vec<T> {
        (0..self.len())
            .map(|k| if self.bit(k) { T::one() } else { -T::one() })
            .collect()
    }

    pub fn byte_len(q: usize) -> usize {
        q.div_ceil(8)
    }

    /// `ceil(q/8)` bytes; byte `j` holds bits `8j..8j+8`, least significant bit first.
    pub fn to_bytes(&self) -> Vec<u8> {
        (0..Self::byte_len(self.len()))
            .map(|j| (self.words[j / 8] >> ((j % 8) * 8)) as u8)
            .collect()
    }

    pub fn from_bytes(bytes: &[u8], q: usize) -> Result<Self> {
        let mut code = Self::zeros(q)?;
        check_len(Self::byte_len(q), bytes.len())?;
        for (j, &b) in bytes.iter().enumerate() {
            code.words[j / 8] |= (b as u64) << ((j % 8) * 8);
        }
        let tail = q % 64;
        let last = (q - 1) / 64;
        let unused = if tail == 0 { 0 } else { code.words[last] >> tail };
        if unused != 0 {
            return Err(Error::Format(format!("code has bits set beyond its length {q}")));
        }
        Ok(code)
    }

    fn check_same_len(&self, other: &HashCode) -> Result<()> {
        check_len(self.len(), other.len())
    }
}

impl fmt::Display for HashCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in 0..self.len() {
            f.write_str(if self.bit(k) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for HashCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HashCode({self})")
    }
}

impl FromStr for HashCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::arg(format!("invalid code character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bits(&bits)
    }
}

/// Number of differing bits.
pub fn hamming_distance(a: &HashCode, b: &HashCode) -> Result<u32> {
    a.check_same_len(b)?;
    Ok(distance_unchecked(a, b))
}

#[inline]
pub(crate) fn distance_unchecked(a: &HashCode, b: &HashCode) -> u32 {
    a.words.iter().zip(&b.words).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Inner product of the `{-1, +1}` views, `q - 2 * hamming_distance`.
pub fn inner_product_pm1(a: &HashCode, b: &HashCode) -> Result<i64> {
    let d = hamming_distance(a, b)? as i64;
    Ok(a.len() as i64 - 2 * d)
}

/// Smallest distance from any of an item's codes to the query.
pub fn asymmetric_distance(codes: &[HashCode], query: &HashCode) -> Result<u32> {
    let mut best = None;
    for c in codes {
        let d = hamming_distance(c, query)?;
        best = Some(best.map_or(d, |b: u32| b.min(d)));
    }
    best.ok_or(Error::Empty("item has no codes"))
}

pub(crate) fn asymmetric_unchecked(codes: &[HashCode], query: &HashCode) -> u32 {
    codes
        .iter()
        .map(|c| distance_unchecked(c, query))
        .min()
        .unwrap_or(u32::MAX)
}

/// All codes at exactly distance `r` from `center`.
///
/// Emitted in lexicographic order of the sorted tuple of flipped positions,
/// so `(0, 1)` precedes `(0, 2)` precedes `(1, 2)`.
pub fn enumerate_at_radius(center: &HashCode, r: usize) -> Result<RadiusIter> {
    if r > center.len() {
        return Err(Error::arg(format!("radius {r} exceeds code length {}", center.len())));
    }
    Ok(RadiusIter {
        center: *center,
        positions: (0..r).collect(),
        done: false,
    })
}

#[derive(Clone, Debug)]
pub struct RadiusIter {
    center: HashCode,
    positions: Vec<usize>,
    done: bool,
}

impl Iterator for RadiusIter {
    type Item = HashCode;

    fn next(&mut self) -> Option<HashCode> {
        if self.done {
            return None;
        }
        let mut code = self.center;
        for &p in &self.positions {
            code.flip(p);
        }

        // Advance to the next combination.
        let q = self.center.len();
        let r = self.positions.len();
        let mut i = r;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.positions[i] < q - r + i {
                self.positions[i] += 1;
                for j in i + 1..r {
                    self.positions[j] = self.positions[j - 1] + 1;
                }
                break;
            }
        }
        Some(code)
    }
}

/// `C(n, k)` as a `u128`, saturating on overflow.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}
