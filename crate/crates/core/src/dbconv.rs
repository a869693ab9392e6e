//! Dot Binary Convolution: a 1×1 depthwise binarized multiply that keeps the
//! full-precision activation in the flow.
//!
//! With `W = α·W_b + β`, `β = mean(w)` and `α = ‖w − β‖₂`, the depthwise
//! product factors as
//!
//! ```text
//! Y = α · |a| * (Sign(a) ⊙ W_b) + β · a
//! ```
//!
//! where the bracketed binary core is evaluated with packed XNOR words.

use crate::bitcore::{sign_bit, sign_quantize, FloatTensor, PackedBitTensor, WORD_BITS};
use crate::error::{Error, Result};

/// Per-layer scalars derived from the latent channel weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DbScalars {
    pub alpha: f64,
    pub beta: f64,
}

/// `β = mean(w)`, `α = sqrt(Σ (w_m − β)²)`.
pub fn compute_scalars(latent_w: &FloatTensor) -> Result<DbScalars> {
    let w = latent_w.data();
    if w.is_empty() {
        return Err(Error::Dimension("DB Conv needs at least one channel weight".into()));
    }
    latent_w.ensure_finite("DB Conv weights")?;
    let beta = w.iter().sum::<f64>() / w.len() as f64;
    let alpha = w.iter().map(|v| (v - beta) * (v - beta)).sum::<f64>().sqrt();
    Ok(DbScalars { alpha, beta })
}

/// Trainable state of a DB Conv: one latent weight per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct DbConvParams {
    pub latent_w: FloatTensor,
}

impl DbConvParams {
    pub fn new(latent_w: FloatTensor) -> Result<Self> {
        if latent_w.shape().len() != 1 || latent_w.is_empty() {
            return Err(Error::Dimension(format!(
                "DB Conv weights must be a non-empty vector, got {:?}",
                latent_w.shape()
            )));
        }
        Ok(Self { latent_w })
    }

    pub fn channels(&self) -> usize {
        self.latent_w.len()
    }

    /// Binary weights and scalars for one forward pass.
    pub fn derive(&self) -> Result<(PackedBitTensor, DbScalars)> {
        Ok((sign_quantize(&self.latent_w)?, compute_scalars(&self.latent_w)?))
    }

    /// Dense equivalent weight `α·W_b + β` per channel.
    pub fn dense_weight(&self) -> Result<FloatTensor> {
        let (wb, s) = self.derive()?;
        Ok(FloatTensor::from_fn(&[self.channels()], |m| {
            s.alpha * f64::from(wb.value(m)) + s.beta
        }))
    }
}

/// Binary core `Y_b[m, i, j] = Sign(a[m, i, j]) XNOR W_b[m]` as `±1`,
/// evaluated one packed channel-row at a time.
pub(crate) fn binary_core(a: &FloatTensor, w_b: &PackedBitTensor) -> Result<Vec<f64>> {
    let (c, h, w) = a.chw()?;
    if w_b.len() != c {
        return Err(Error::Dimension(format!(
            "DB Conv has {} channel weights but the input has {c} channels",
            w_b.len()
        )));
    }
    let data = a.data();
    let mut out = vec![0.0; c * h * w];
    let mut row_words = vec![0u64; w.div_ceil(WORD_BITS)];
    for m in 0..c {
        let weight_word = if w_b.bit(m) { u64::MAX } else { 0 };
        for i in 0..h {
            let row = &data[(m * h + i) * w..(m * h + i + 1) * w];
            row_words.iter_mut().for_each(|x| *x = 0);
            for (j, &v) in row.iter().enumerate() {
                if sign_bit(v) {
                    row_words[j / WORD_BITS] |= 1 << (j % WORD_BITS);
                }
            }
            let dst = &mut out[(m * h + i) * w..(m * h + i + 1) * w];
            for (wi, word) in row_words.iter().enumerate() {
                let agree = !(word ^ weight_word);
                let lo = wi * WORD_BITS;
                for (j, d) in dst[lo..(lo + WORD_BITS).min(w)].iter_mut().enumerate() {
                    *d = if (agree >> j) & 1 == 1 { 1.0 } else { -1.0 };
                }
            }
        }
    }
    Ok(out)
}

/// `α·|a|·Y_b + β·a`, elementwise.
#[inline]
pub(crate) fn combine(s: DbScalars, a: f64, yb: f64) -> f64 {
    s.alpha * a.abs() * yb + s.beta * a
}

/// Applies DB Conv with precomputed binary weights and scalars.
pub fn db_conv_with(a: &FloatTensor, w_b: &PackedBitTensor, s: DbScalars) -> Result<FloatTensor> {
    a.ensure_finite("db_conv input")?;
    let yb = binary_core(a, w_b)?;
    FloatTensor::new(
        a.shape(),
        a.data()
            .iter()
            .zip(&yb)
            .map(|(&x, &y)| combine(s, x, y))
            .collect(),
    )
}

/// DB Conv on a `[c, h, w]` activation.
pub fn db_conv(a: &FloatTensor, p: &DbConvParams) -> Result<FloatTensor> {
    let (w_b, s) = p.derive()?;
    db_conv_with(a, &w_b, s)
}

/// Dense 1×1 depthwise multiply `Y[m] = a[m] · W[m]`.
pub fn db_conv_direct_oracle(a: &FloatTensor, weight: &FloatTensor) -> Result<FloatTensor> {
    let (c, h, w) = a.chw()?;
    if weight.len() != c {
        return Err(Error::Dimension(format!(
            "oracle weight has {} channels, input has {c}",
            weight.len()
        )));
    }
    Ok(FloatTensor::from_fn(a.shape(), |i| {
        a.data()[i] * weight.data()[i / (h * w)]
    }))
}

/// Convolution unit compared by the storage-cost formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Binary `n×c×k×k` kernel with two 32-bit scalars per input channel.
    AdaBinConv,
    /// Depthwise DB Conv: `c` binary weights plus two 32-bit scalars.
    DbConv,
}

/// Weight storage in bits.
pub fn param_bits(kind: ConvKind, n: usize, c: usize, k: usize) -> Result<u64> {
    let positive = match kind {
        ConvKind::AdaBinConv => n > 0 && c > 0 && k > 0,
        ConvKind::DbConv => c > 0,
    };
    if !positive {
        return Err(Error::InvalidInput(format!(
            "param_bits needs positive dimensions (n={n}, c={c}, k={k})"
        )));
    }
    let (n, c, k) = (n as u64, c as u64, k as u64);
    Ok(match kind {
        ConvKind::AdaBinConv => 64 * c + n * c * k * k,
        ConvKind::DbConv => 64 + c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec1(v: &[f64]) -> FloatTensor {
        FloatTensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    fn rel_close(a: &FloatTensor, b: &FloatTensor, tol: f64) -> bool {
        a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1e-12))
    }

    #[test]
    fn scalar_cases() {
        let s = compute_scalars(&vec1(&[1.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!((s.alpha, s.beta), (0.0, 1.0));
        let s = compute_scalars(&vec1(&[1.0, -1.0])).unwrap();
        assert_eq!(s.beta, 0.0);
        assert!((s.alpha - 2f64.sqrt()).abs() < 1e-15);
        // Direct evaluation: deviations 0.1, -0.5, 0.5, -0.1.
        let s = compute_scalars(&vec1(&[0.2, -0.4, 0.6, 0.0])).unwrap();
        assert!((s.beta - 0.1).abs() < 1e-15);
        let want = (0.01f64 + 0.25 + 0.25 + 0.01).sqrt();
        assert!((s.alpha - want).abs() <= 1e-7 * want);
        assert!(matches!(
            compute_scalars(&FloatTensor::zeros(&[0])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn constant_weights_reduce_to_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = FloatTensor::from_fn(&[3, 4, 5], |_| rng.gen_range(-2.0..2.0));
        let p = DbConvParams::new(vec1(&[0.7, 0.7, 0.7])).unwrap();
        let y = db_conv(&a, &p).unwrap();
        assert!(y.max_abs_diff(&a.map(|v| 0.7 * v)) < 1e-12);

        let single = FloatTensor::new(&[1, 1, 1], vec![2.0]).unwrap();
        let p = DbConvParams::new(vec1(&[-3.0])).unwrap();
        assert_eq!(db_conv(&single, &p).unwrap().data(), &[-6.0]);
    }

    #[test]
    fn oracle_cases() {
        let a = FloatTensor::new(&[1, 1, 2], vec![1.0, -1.0]).unwrap();
        assert_eq!(db_conv_direct_oracle(&a, &vec1(&[1.0])).unwrap(), a);
        assert_eq!(
            db_conv_direct_oracle(&a, &vec1(&[2.0])).unwrap().data(),
            &[2.0, -2.0]
        );
        assert!(db_conv_direct_oracle(&a, &vec1(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn decomposition_matches_dense_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..500 {
            let c = rng.gen_range(1..=8);
            let h = rng.gen_range(1..=6);
            let w = rng.gen_range(1..=6);
            let a = FloatTensor::from_fn(&[c, h, w], |_| {
                if rng.gen_bool(0.05) {
                    0.0
                } else {
                    rng.gen_range(-3.0..3.0)
                }
            });
            let p = DbConvParams::new(FloatTensor::from_fn(&[c], |_| rng.gen_range(-1.0..1.0)))
                .unwrap();
            let got = db_conv(&a, &p).unwrap();
            let want = db_conv_direct_oracle(&a, &p.dense_weight().unwrap()).unwrap();
            assert!(rel_close(&got, &want, 1e-6));
        }
    }

    #[test]
    fn wide_rows_cross_word_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a = FloatTensor::from_fn(&[2, 3, 130], |_| rng.gen_range(-1.0..1.0));
        let p = DbConvParams::new(vec1(&[0.4, -0.9])).unwrap();
        let got = db_conv(&a, &p).unwrap();
        let want = db_conv_direct_oracle(&a, &p.dense_weight().unwrap()).unwrap();
        assert!(rel_close(&got, &want, 1e-12));
    }

    #[test]
    fn zero_inputs_give_zero_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let p = DbConvParams::new(FloatTensor::from_fn(&[4], |_| rng.gen_range(-2.0..2.0))).unwrap();
        let y = db_conv(&FloatTensor::zeros(&[4, 3, 3]), &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaling_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let a = FloatTensor::from_fn(&[5, 4, 4], |_| rng.gen_range(-2.0..2.0));
        let w = FloatTensor::from_fn(&[5], |_| rng.gen_range(-1.0..1.0));
        let lambda = 3.5;
        let base = compute_scalars(&w).unwrap();
        let scaled = compute_scalars(&w.map(|v| lambda * v)).unwrap();
        assert!((scaled.alpha - lambda * base.alpha).abs() < 1e-12);
        assert!((scaled.beta - lambda * base.beta).abs() < 1e-12);
        let y = db_conv(&a, &DbConvParams::new(w.clone()).unwrap()).unwrap();
        let ys = db_conv(&a, &DbConvParams::new(w.map(|v| lambda * v)).unwrap()).unwrap();
        assert!(rel_close(&ys, &y.map(|v| lambda * v), 1e-12));
    }

    #[test]
    fn channel_mismatch() {
        let p = DbConvParams::new(vec1(&[1.0, 2.0])).unwrap();
        assert!(matches!(
            db_conv(&FloatTensor::zeros(&[3, 2, 2]), &p),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn storage_comparison() {
        let adabin = param_bits(ConvKind::AdaBinConv, 64, 64, 3).unwrap();
        let db = param_bits(ConvKind::DbConv, 64, 64, 3).unwrap();
        assert_eq!(adabin, 40960);
        assert_eq!(db, 128);
        assert_eq!(adabin / db, 320);
        assert_eq!(param_bits(ConvKind::DbConv, 0, 64, 0).unwrap(), 128);
        assert!(matches!(
            param_bits(ConvKind::AdaBinConv, 0, 64, 3),
            Err(Error::InvalidInput(_))
        ));
        assert!(param_bits(ConvKind::DbConv, 1, 0, 1).is_err());
    }
}
