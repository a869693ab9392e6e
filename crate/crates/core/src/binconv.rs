//! 2-D binary convolution over packed activations and weights, plus the
//! direct full-precision cross-correlation used as its oracle.
//!
//! Zero padding contributes nothing to a window sum: the packed kernel counts
//! only in-bounds taps, so each output is `2·popcount − n_valid` where
//! `n_valid = c · (number of in-bounds taps)`. This matches a literal float
//! convolution with zero-valued padding.

use crate::bitcore::{tail_mask, FloatTensor, PackedBitTensor, WORD_BITS};
use crate::error::{Error, Result};

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::InvalidParameter(format!(
                "conv spec needs positive c, n, k, s (got c={in_channels} n={out_channels} k={kernel} s={stride})"
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// Shape-preserving `k×k` convolution (stride 1, padding `k/2`).
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel, 1, kernel / 2)
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::Dimension(format!(
                "kernel {} does not fit a padded {ph}x{pw} input",
                self.kernel
            )));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Multiply-accumulates for one output map of `h'×w'`.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (self.out_channels * self.in_channels * self.taps() * out_h * out_w) as u64
    }

    fn check_input(&self, shape: &[usize], what: &str) -> Result<(usize, usize)> {
        match *shape {
            [c, h, w] if c == self.in_channels => Ok((h, w)),
            _ => Err(Error::Dimension(format!(
                "{what}: expected [{}, h, w], got {shape:?}",
                self.in_channels
            ))),
        }
    }

    fn check_weight(&self, shape: &[usize], what: &str) -> Result<()> {
        if shape != self.weight_shape() {
            return Err(Error::Dimension(format!(
                "{what}: expected weight {:?}, got {shape:?}",
                self.weight_shape()
            )));
        }
        Ok(())
    }
}

/// Channel-packed activations: one run of `chunks` words per pixel.
struct PixelWords {
    chunks: usize,
    words: Vec<u64>,
}

impl PixelWords {
    fn from_chw(a: &PackedBitTensor, c: usize, h: usize, w: usize) -> Self {
        let chunks = c.div_ceil(WORD_BITS);
        let mut words = vec![0u64; h * w * chunks];
        for ch in 0..c {
            let (word, bit) = (ch / WORD_BITS, ch % WORD_BITS);
            for pix in 0..h * w {
                if a.bit(ch * h * w + pix) {
                    words[pix * chunks + word] |= 1 << bit;
                }
            }
        }
        Self { chunks, words }
    }

    #[inline]
    fn at(&self, pix: usize) -> &[u64] {
        &self.words[pix * self.chunks..(pix + 1) * self.chunks]
    }
}

/// Filters laid out as `[n][tap][chunk]`.
fn pack_filters(w: &PackedBitTensor, spec: &ConvSpec) -> Vec<u64> {
    let c = spec.in_channels;
    let taps = spec.taps();
    let chunks = c.div_ceil(WORD_BITS);
    let mut out = vec![0u64; spec.out_channels * taps * chunks];
    for o in 0..spec.out_channels {
        for ch in 0..c {
            for t in 0..taps {
                if w.bit((o * c + ch) * taps + t) {
                    out[(o * taps + t) * chunks + ch / WORD_BITS] |= 1 << (ch % WORD_BITS);
                }
            }
        }
    }
    out
}

/// Binary cross-correlation `y = BitCount(a_b XNOR w_b)` with zero padding.
///
/// `a` is `[c, h, w]`, `w` is `[n, c, k, k]`; the result is `[n, h', w']`
/// holding exact integers.
pub fn binary_conv2d(
    a: &PackedBitTensor,
    w: &PackedBitTensor,
    spec: &ConvSpec,
) -> Result<FloatTensor> {
    let (h, wd) = spec.check_input(a.shape(), "binary_conv2d input")?;
    spec.check_weight(w.shape(), "binary_conv2d")?;
    let (oh, ow) = spec.output_extent(h, wd)?;

    let c = spec.in_channels;
    let k = spec.kernel;
    let taps = spec.taps();
    let act = PixelWords::from_chw(a, c, h, wd);
    let filters = pack_filters(w, spec);
    let chunks = act.chunks;
    let masks: Vec<u64> = (0..chunks)
        .map(|j| {
            if j + 1 == chunks {
                tail_mask(c)
            } else {
                u64::MAX
            }
        })
        .collect();

    let mut out = vec![0.0; spec.out_channels * oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let y0 = (oy * spec.stride) as isize - spec.padding as isize;
            let x0 = (ox * spec.stride) as isize - spec.padding as isize;
            for o in 0..spec.out_channels {
                let filter = &filters[o * taps * chunks..(o + 1) * taps * chunks];
                let mut agree: u32 = 0;
                let mut valid: usize = 0;
                for ky in 0..k {
                    let iy = y0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = x0 + kx as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let aw = act.at(iy as usize * wd + ix as usize);
                        let fw = &filter[(ky * k + kx) * chunks..(ky * k + kx + 1) * chunks];
                        for j in 0..chunks {
                            agree += (!(aw[j] ^ fw[j]) & masks[j]).count_ones();
                        }
                        valid += c;
                    }
                }
                out[(o * oh + oy) * ow + ox] = (2 * i64::from(agree) - valid as i64) as f64;
            }
        }
    }
    FloatTensor::new(&[spec.out_channels, oh, ow], out)
}

/// Direct cross-correlation of arbitrary reals with zero padding.
pub fn float_pm1_conv2d_oracle(
    a: &FloatTensor,
    w: &FloatTensor,
    spec: &ConvSpec,
) -> Result<FloatTensor> {
    let (h, wd) = spec.check_input(a.shape(), "conv oracle input")?;
    spec.check_weight(w.shape(), "conv oracle")?;
    let (oh, ow) = spec.output_extent(h, wd)?;
    let (c, k) = (spec.in_channels, spec.kernel);
    let (ad, wdat) = (a.data(), w.data());

    let mut out = vec![0.0; spec.out_channels * oh * ow];
    for o in 0..spec.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ch in 0..c {
                    for ky in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += ad[(ch * h + iy as usize) * wd + ix as usize]
                                * wdat[((o * c + ch) * k + ky) * k + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    FloatTensor::new(&[spec.out_channels, oh, ow], out)
}
