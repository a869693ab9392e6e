//! Bit-packed ±1 tensors and the XNOR/popcount primitives.
//!
//! A [`PackedBitTensor`] stores one bit per logical element in row-major
//! order: element `i` lives in word `i / 64`, bit `i % 64`. A set bit encodes
//! `+1`, a clear bit `-1`. Bits past the logical length are always zero.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};

/// Bits per storage word.
pub const WORD_BITS: usize = u64::BITS as usize;

static SIGN_ZERO_NEGATIVE: AtomicBool = AtomicBool::new(false);

/// Mutation hook for the verification ledger: when enabled, `sign(0.0)`
/// returns `-1`. Never enable outside fault-injection runs.
#[doc(hidden)]
pub fn inject_sign_zero_fault(enabled: bool) {
    SIGN_ZERO_NEGATIVE.store(enabled, Ordering::SeqCst);
}

/// The binarizer: `+1` for `x >= 0`, `-1` otherwise.
#[inline]
pub fn sign(x: f64) -> f64 {
    if sign_bit(x) {
        1.0
    } else {
        -1.0
    }
}

/// `true` when `x` binarizes to `+1`.
#[inline]
pub fn sign_bit(x: f64) -> bool {
    if x == 0.0 && SIGN_ZERO_NEGATIVE.load(Ordering::Relaxed) {
        return false;
    }
    x >= 0.0
}

pub(crate) fn words_for(n: usize) -> usize {
    n.div_ceil(WORD_BITS)
}

/// Mask selecting the valid bits of the final word of an `n`-element tensor.
#[inline]
pub(crate) fn tail_mask(n: usize) -> u64 {
    match n % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Dense real-valued tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl FloatTensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::InvalidInput(format!(
                "{what}: element {i} is {}",
                self.data[i]
            ))),
        }
    }

    /// Interprets the tensor as `[c, h, w]`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Dimension(format!(
                "expected a [c, h, w] tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub(crate) fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Dimension(format!(
                "{what}: expected shape {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &FloatTensor) -> Result<Self> {
        other.expect_shape(&self.shape, "elementwise add")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &FloatTensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &FloatTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// ±1 values, one bit per element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBitTensor {
    shape: Vec<usize>,
    len: usize,
    words: Vec<u64>,
}

impl PackedBitTensor {
    /// Builds a tensor from raw words; padding bits are cleared.
    pub fn from_words(shape: &[usize], mut words: Vec<u64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if words.len() != words_for(len) {
            return Err(Error::Dimension(format!(
                "{len} elements need {} words, got {}",
                words_for(len),
                words.len()
            )));
        }
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(len);
        }
        Ok(Self {
            shape: shape.to_vec(),
            len,
            words,
        })
    }

    pub(crate) fn from_bits(shape: &[usize], bits: impl IntoIterator<Item = bool>) -> Self {
        let len: usize = shape.iter().product();
        let mut words = vec![0u64; words_for(len)];
        let mut count = 0;
        for (i, bit) in bits.into_iter().enumerate().take(len) {
            if bit {
                words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
            }
            count = i + 1;
        }
        debug_assert_eq!(count, len);
        Self {
            shape: shape.to_vec(),
            len,
            words,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    /// Value of element `i` as `±1`.
    #[inline]
    pub fn value(&self, i: usize) -> i8 {
        if self.bit(i) {
            1
        } else {
            -1
        }
    }

    pub fn to_float(&self) -> FloatTensor {
        FloatTensor {
            shape: self.shape.clone(),
            data: (0..self.len).map(|i| f64::from(self.value(i))).collect(),
        }
    }
}

/// Binarizes every element with [`sign`].
pub fn sign_quantize(x: &FloatTensor) -> Result<PackedBitTensor> {
    x.ensure_finite("sign_quantize")?;
    Ok(PackedBitTensor::from_bits(
        x.shape(),
        x.data().iter().map(|&v| sign_bit(v)),
    ))
}

/// Signed ±1 dot product `Σ a[i]·w[i]`, computed as `2·popcount(xnor) − n`.
pub fn xnor_dot(a: &PackedBitTensor, w: &PackedBitTensor) -> Result<i64> {
    if a.shape != w.shape {
        return Err(Error::Dimension(format!(
            "xnor_dot shape mismatch: {:?} vs {:?}",
            a.shape, w.shape
        )));
    }
    Ok(xnor_dot_words(&a.words, &w.words, a.len))
}

/// XNOR-popcount over the first `n` bits of two word slices.
#[inline]
pub(crate) fn xnor_dot_words(a: &[u64], w: &[u64], n: usize) -> i64 {
    if n == 0 {
        return 0;
    }
    let full = n / WORD_BITS;
    let mut agree: u32 = 0;
    for i in 0..full {
        agree += (!(a[i] ^ w[i])).count_ones();
    }
    if n % WORD_BITS != 0 {
        agree += (!(a[full] ^ w[full]) & tail_mask(n)).count_ones();
    }
    2 * i64::from(agree) - n as i64
}

/// Packs a flat list of ±1 values.
pub fn pack_bits(values: &[i8]) -> Result<PackedBitTensor> {
    if let Some(i) = values.iter().position(|&v| v != 1 && v != -1) {
        return Err(Error::InvalidInput(format!(
            "pack_bits: element {i} is {}, expected ±1",
            values[i]
        )));
    }
    Ok(PackedBitTensor::from_bits(
        &[values.len()],
        values.iter().map(|&v| v == 1),
    ))
}

pub fn unpack_bits(t: &PackedBitTensor) -> Vec<i8> {
    (0..t.len()).map(|i| t.value(i)).collect()
}
