//! Straight-through estimation for the Sign binarizer.
//!
//! The forward pass always emits `Sign(x)`; the backward pass substitutes the
//! derivative of a smooth surrogate. Dynamic SoftSign `kx / (1 + |kx|)` carries
//! a trainable sharpness `k` per Sign site.

use std::fmt;
use std::str::FromStr;

use crate::bitcore::{sign, FloatTensor};
use crate::error::{Error, Result};

/// Lower bound applied to every trainable sharpness after an optimizer step.
pub const K_MIN: f64 = 1e-6;

/// Initial sharpness of a Dynamic SoftSign site.
pub const K_INIT: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surrogate {
    Clip,
    Quad,
    ScaledTanh,
    DySoftSign,
}

impl FromStr for Surrogate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(Self::Clip),
            "quad" => Ok(Self::Quad),
            "scaled_tanh" | "tanh" => Ok(Self::ScaledTanh),
            "dysoftsign" => Ok(Self::DySoftSign),
            other => Err(Error::Config(format!(
                "unknown surrogate `{other}` (expected clip, quad, scaled_tanh or dysoftsign)"
            ))),
        }
    }
}

impl fmt::Display for Surrogate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Clip => "clip",
            Self::Quad => "quad",
            Self::ScaledTanh => "scaled_tanh",
            Self::DySoftSign => "dysoftsign",
        })
    }
}

/// Configuration of one Sign site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SteConfig {
    pub surrogate: Surrogate,
    pub k: f64,
    /// Test-only: the forward pass evaluates the surrogate instead of Sign,
    /// making the whole network differentiable for finite-difference checks.
    pub smooth_test_mode: bool,
}

impl SteConfig {
    pub fn new(surrogate: Surrogate, k: f64) -> Result<Self> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::InvalidParameter(format!("sharpness k must be > 0, got {k}")));
        }
        Ok(Self {
            surrogate,
            k,
            smooth_test_mode: false,
        })
    }

    pub fn dysoftsign(k: f64) -> Result<Self> {
        Self::new(Surrogate::DySoftSign, k)
    }

    /// Forward value at this site: Sign, or the surrogate in smooth mode.
    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        if self.smooth_test_mode {
            surrogate_value(x, self)
        } else {
            sign(x)
        }
    }

    /// `∂ quantize / ∂x` as used by the backward pass.
    #[inline]
    pub fn dx(&self, x: f64) -> f64 {
        surrogate_grad(x, self)
    }

    /// `∂ quantize / ∂k`; zero for surrogates without a trainable sharpness.
    #[inline]
    pub fn dk(&self, x: f64) -> f64 {
        match self.surrogate {
            Surrogate::DySoftSign => {
                let d = 1.0 + (self.k * x).abs();
                x / (d * d)
            }
            _ => 0.0,
        }
    }

    pub fn k_trainable(&self) -> bool {
        self.surrogate == Surrogate::DySoftSign
    }
}

fn check_k(k: f64) -> Result<()> {
    if k > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("sharpness k must be > 0, got {k}")))
    }
}

/// `kx / (1 + |kx|)`.
pub fn dysoftsign(x: f64, k: f64) -> Result<f64> {
    check_k(k)?;
    let kx = k * x;
    Ok(kx / (1.0 + kx.abs()))
}

/// `k / (1 + |kx|)²`.
pub fn dysoftsign_grad(x: f64, k: f64) -> Result<f64> {
    check_k(k)?;
    let d = 1.0 + (k * x).abs();
    Ok(k / (d * d))
}

/// Value of the configured surrogate.
pub fn surrogate_value(x: f64, cfg: &SteConfig) -> f64 {
    match cfg.surrogate {
        Surrogate::Clip => x.clamp(-1.0, 1.0),
        Surrogate::Quad => {
            if x < -1.0 {
                -1.0
            } else if x < 0.0 {
                2.0 * x + x * x
            } else if x <= 1.0 {
                2.0 * x - x * x
            } else {
                1.0
            }
        }
        Surrogate::ScaledTanh => (cfg.k * x).tanh(),
        Surrogate::DySoftSign => {
            let kx = cfg.k * x;
            kx / (1.0 + kx.abs())
        }
    }
}

/// Derivative of the configured surrogate in `x`.
pub fn surrogate_grad(x: f64, cfg: &SteConfig) -> f64 {
    match cfg.surrogate {
        Surrogate::Clip => {
            if x.abs() <= 1.0 {
                1.0
            } else {
                0.0
            }
        }
        Surrogate::Quad => {
            if (-1.0..0.0).contains(&x) {
                2.0 + 2.0 * x
            } else if (0.0..=1.0).contains(&x) {
                2.0 - 2.0 * x
            } else {
                0.0
            }
        }
        Surrogate::ScaledTanh => {
            let t = (cfg.k * x).tanh();
            cfg.k * (1.0 - t * t)
        }
        Surrogate::DySoftSign => {
            let d = 1.0 + (cfg.k * x).abs();
            cfg.k / (d * d)
        }
    }
}

pub fn ste_forward(x: &FloatTensor, cfg: &SteConfig) -> Result<FloatTensor> {
    x.ensure_finite("ste_forward")?;
    Ok(x.map(|v| cfg.quantize(v)))
}

/// Returns `(upstream · f'(x), Σ upstream · ∂f/∂k)`.
pub fn ste_backward(
    x: &FloatTensor,
    upstream: &FloatTensor,
    cfg: &SteConfig,
) -> Result<(FloatTensor, f64)> {
    upstream.expect_shape(x.shape(), "ste_backward upstream")?;
    let grad = FloatTensor::new(
        x.shape(),
        x.data()
            .iter()
            .zip(upstream.data())
            .map(|(&xi, &gi)| gi * cfg.dx(xi))
            .collect(),
    )?;
    let grad_k = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&xi, &gi)| gi * cfg.dk(xi))
        .sum();
    Ok((grad, grad_k))
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    (fa, fm, fb): (f64, f64, f64),
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive_simpson(f, a, m, (fa, flm, fm), left, tol / 2.0, depth - 1)
        + adaptive_simpson(f, m, b, (fm, frm, fb), right, tol / 2.0, depth - 1)
}

fn integrate(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive_simpson(f, a, b, (fa, fm, fb), whole, tol, 40)
}

/// Quadrature estimate of `∫_{-R}^{R} (Sign(x) − DySoftSign(x, k))² dx`
/// with `R = range_mult / k`.
///
/// The integrand jumps at 0 and decays like `1/(kx)²`, so each half-line is
/// split into geometrically growing panels before adaptive Simpson runs.
pub fn approx_error_sq(k: f64, range_mult: f64) -> Result<f64> {
    check_k(k)?;
    if !(range_mult > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "range multiplier must be > 0, got {range_mult}"
        )));
    }
    let r = range_mult / k;
    let integrand = |x: f64| {
        let e = sign(x) - x * k / (1.0 + (x * k).abs());
        e * e
    };
    let mut edges = vec![0.0];
    let mut e = 1e-3 / k;
    while e < r {
        edges.push(e);
        e *= 2.0;
    }
    edges.push(r);
    let mut total = 0.0;
    for pair in edges.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        total += integrate(&integrand, lo, hi, 1e-12 / k);
        total += integrate(&integrand, -hi, -lo, 1e-12 / k);
    }
    Ok(total)
}
