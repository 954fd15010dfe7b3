use crate::error::{Error, Result};
use crate::tensor::Float;

/// Bits per storage word.
pub(crate) const WORD_BITS: usize = 64;

pub(crate) fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

/// Ternary vector as two bit planes: `mask` marks nonzeros, `sign` marks
/// `+1` (and is 0 wherever `mask` is 0). Bit `i` of the vector is bit
/// `i % 64` of word `i / 64`; tail bits past `len` are 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitplaneTensor {
    len: usize,
    mask: Vec<u64>,
    sign: Vec<u64>,
}

impl BitplaneTensor {
    pub fn pack(x: &[i8]) -> Result<Self> {
        let mut mask = vec![0u64; words_for(x.len())];
        let mut sign = vec![0u64; mask.len()];
        for (i, &v) in x.iter().enumerate() {
            let bit = 1u64 << (i % WORD_BITS);
            match v {
                0 => {}
                1 => {
                    mask[i / WORD_BITS] |= bit;
                    sign[i / WORD_BITS] |= bit;
                }
                -1 => mask[i / WORD_BITS] |= bit,
                _ => return Err(Error::NotTernary { index: i, value: v as i64 }),
            }
        }
        Ok(BitplaneTensor { len: x.len(), mask, sign })
    }

    /// Pack floats that are exactly `-1`, `0` or `+1`.
    pub fn pack_float<F: Float>(x: &[F]) -> Result<Self> {
        let trits = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v == F::zero() {
                    Ok(0)
                } else if v == F::one() {
                    Ok(1)
                } else if v == -F::one() {
                    Ok(-1)
                } else {
                    Err(Error::NotTernary {
                        index: i,
                        value: v.as_f64().round() as i64,
                    })
                }
            })
            .collect::<Result<Vec<i8>>>()?;
        Self::pack(&trits)
    }

    /// Rebuild from raw planes, checking the layout invariants.
    pub fn from_words(len: usize, mask: Vec<u64>, sign: Vec<u64>) -> Result<Self> {
        let words = words_for(len);
        if mask.len() != words || sign.len() != words {
            return Err(Error::invalid(
                "bitplane",
                format!("{len} elements need {words} words, got {}/{}", mask.len(), sign.len()),
            ));
        }
        let t = BitplaneTensor { len, mask, sign };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        let tail = tail_mask(self.len);
        for (i, (&m, &s)) in self.mask.iter().zip(&self.sign).enumerate() {
            if s & !m != 0 {
                return Err(Error::invalid("bitplane", format!("word {i}: sign bit set where mask is 0")));
            }
            if i + 1 == self.mask.len() && m & !tail != 0 {
                return Err(Error::invalid("bitplane", "nonzero padding bits"));
            }
        }
        Ok(())
    }

    pub fn decode(&self) -> Vec<i8> {
        (0..self.len)
            .map(|i| {
                let bit = 1u64 << (i % WORD_BITS);
                let w = i / WORD_BITS;
                if self.mask[w] & bit == 0 {
                    0
                } else if self.sign[w] & bit != 0 {
                    1
                } else {
                    -1
                }
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn mask(&self) -> &[u64] {
        &self.mask
    }

    pub fn sign(&self) -> &[u64] {
        &self.sign
    }

    pub fn nonzeros(&self) -> usize {
        self.mask.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// Valid-bit mask of the last word for a vector of `len` elements.
pub(crate) fn tail_mask(len: usize) -> u64 {
    match len % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// `sum a_i b_i` over packed planes of equal word count.
#[inline]
pub(crate) fn dot_words(ma: &[u64], sa: &[u64], mb: &[u64], sb: &[u64]) -> i32 {
    let mut both = 0u32;
    let mut agree = 0u32;
    for i in 0..ma.len() {
        let m = ma[i] & mb[i];
        both += m.count_ones();
        agree += (m & !(sa[i] ^ sb[i])).count_ones();
    }
    2 * agree as i32 - both as i32
}

/// Integer inner product of two ternary vectors via mask/sign popcounts.
pub fn ternary_dot(a: &BitplaneTensor, b: &BitplaneTensor) -> Result<i64> {
    if a.len != b.len {
        return Err(Error::shape("ternary_dot", format!("lengths {} and {}", a.len, b.len)));
    }
    Ok(dot_words(&a.mask, &a.sign, &b.mask, &b.sign) as i64)
}
