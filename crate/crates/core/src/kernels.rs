//! im2col/GEMM convolution used by the training path and the full-precision
//! stem and head. The direct oracle in `binconv` stays independent of this.

use ndarray::{Array2, ArrayView2};

use crate::binconv::ConvSpec;
use crate::bitcore::FloatTensor;
use crate::error::{Error, Result};

/// Unfolds `[c, h, w]` into a `(c·k·k) × (h'·w')` column matrix.
pub(crate) fn im2col(x: &FloatTensor, spec: &ConvSpec) -> Result<(Array2<f64>, usize, usize)> {
    let (c, h, w) = x.chw()?;
    if c != spec.in_channels {
        return Err(Error::Dimension(format!(
            "im2col: expected {} channels, got {c}",
            spec.in_channels
        )));
    }
    let (oh, ow) = spec.output_extent(h, w)?;
    let k = spec.kernel;
    let p = spec.padding as isize;
    let s = spec.stride;
    let data = x.data();
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    let cols_slice = cols.as_slice_mut().expect("contiguous");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols_slice[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &data[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok((cols, oh, ow))
}

/// Folds a column matrix back to `[c, h, w]`, summing overlapping taps.
pub(crate) fn col2im(
    cols: &Array2<f64>,
    spec: &ConvSpec,
    h: usize,
    w: usize,
) -> Result<FloatTensor> {
    let (oh, ow) = spec.output_extent(h, w)?;
    let (c, k) = (spec.in_channels, spec.kernel);
    let p = spec.padding as isize;
    let s = spec.stride;
    let mut out = vec![0.0; c * h * w];
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cs[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut out[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    FloatTensor::new(&[c, h, w], out)
}

fn weight_view<'a>(weights: &'a [f64], spec: &ConvSpec) -> Result<ArrayView2<'a, f64>> {
    let cols = spec.in_channels * spec.taps();
    ArrayView2::from_shape((spec.out_channels, cols), weights)
        .map_err(|e| Error::Dimension(format!("conv weight: {e}")))
}

/// `[n, h', w']` output from precomputed columns.
pub(crate) fn conv_from_cols(
    cols: &Array2<f64>,
    weights: &[f64],
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Result<FloatTensor> {
    let y = weight_view(weights, spec)?.dot(cols);
    FloatTensor::new(&[spec.out_channels, oh, ow], y.into_raw_vec_and_offset().0)
}

/// Gradients of a convolution given cached input columns.
/// Returns `(d_input, d_weight)`.
pub(crate) fn conv_backward(
    cols: &Array2<f64>,
    weights: &[f64],
    spec: &ConvSpec,
    dy: &FloatTensor,
    h: usize,
    w: usize,
) -> Result<(FloatTensor, Vec<f64>)> {
    let (n, oh, ow) = dy.chw()?;
    if n != spec.out_channels {
        return Err(Error::Dimension(format!(
            "conv backward: upstream has {n} channels, expected {}",
            spec.out_channels
        )));
    }
    let dy2 = ArrayView2::from_shape((n, oh * ow), dy.data())
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let dw = dy2.dot(&cols.t());
    let dcols = weight_view(weights, spec)?.t().dot(&dy2);
    let dx = col2im(&dcols, spec, h, w)?;
    Ok((dx, dw.as_standard_layout().iter().copied().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binconv::float_pm1_conv2d_oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gemm_conv_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let c = rng.gen_range(1..=4);
            let n = rng.gen_range(1..=4);
            let k = [1, 3][rng.gen_range(0..2)];
            let spec = ConvSpec::new(c, n, k, rng.gen_range(1..=2), rng.gen_range(0..=1)).unwrap();
            let h = rng.gen_range(3..=8);
            let w = rng.gen_range(3..=8);
            let x = FloatTensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0));
            let wt = FloatTensor::from_fn(&[n, c, k, k], |_| rng.gen_range(-1.0..1.0));
            let (cols, oh, ow) = im2col(&x, &spec).unwrap();
            let fast = conv_from_cols(&cols, wt.data(), &spec, oh, ow).unwrap();
            let slow = float_pm1_conv2d_oracle(&x, &wt, &spec).unwrap();
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), dy> == <x, dx> and == <w, dw> for a bilinear map.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = ConvSpec::new(3, 2, 3, 2, 1).unwrap();
        let x = FloatTensor::from_fn(&[3, 7, 6], |_| rng.gen_range(-1.0..1.0));
        let wt: Vec<f64> = (0..2 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (cols, oh, ow) = im2col(&x, &spec).unwrap();
        let y = conv_from_cols(&cols, &wt, &spec, oh, ow).unwrap();
        let dy = FloatTensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0));
        let (dx, dw) = conv_backward(&cols, &wt, &spec, &dy, 7, 6).unwrap();
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = wt.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }
}
