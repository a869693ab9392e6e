//! The Binary Block and its sub-layers, plus the Down-Sample, Up-Sample and
//! Fusion units of the U-shaped network.
//!
//! Every layer has an inference `forward`, a `forward_cached` that records
//! what the backward pass needs, and a `backward` that accumulates parameter
//! gradients and returns the gradient with respect to its input. Sign sites
//! follow the straight-through rule of [`crate::grad`]: the forward pass uses
//! Sign, the backward pass the surrogate derivative.
//!
//! Shape conventions are `[c, h, w]` throughout.

use std::ops::Add;

use ndarray::Array2;

use crate::binconv::{binary_conv2d, ConvSpec};
use crate::bitcore::{sign, sign_quantize, FloatTensor, PackedBitTensor};
use crate::dbconv::{binary_core, combine, compute_scalars, DbScalars};
use crate::error::{Error, Result};
use crate::grad::{SteConfig, Surrogate};
use crate::kernels::{conv_backward, conv_from_cols, im2col};
use crate::param::{Gradients, Param, ParamRegistry, ParamRole};

/// Inference cost of a layer.
///
/// `flops_f` counts 2 per real multiply-accumulate against a parameter;
/// `bops_b` counts 2 per XNOR-accumulate pair. Elementwise activations,
/// residual adds and resampling are not counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params_f: u64,
    pub params_b: u64,
    pub flops_f: u64,
    pub bops_b: u64,
}

impl Add for Cost {
    type Output = Cost;

    fn add(self, o: Cost) -> Cost {
        Cost {
            params_f: self.params_f + o.params_f,
            params_b: self.params_b + o.params_b,
            flops_f: self.flops_f + o.flops_f,
            bops_b: self.bops_b + o.bops_b,
        }
    }
}

/// Visiting hooks shared by every layer.
pub trait Parameterized {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));
    fn visit_sites_mut(&mut self, f: &mut dyn FnMut(&mut SteSite));
    /// Every DB Conv unit; used to pin `(α, β)` for finite-difference checks.
    fn visit_db_mut(&mut self, _f: &mut dyn FnMut(&mut DbConvUnit)) {}
}

/// How Sign sites are created.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiteInit {
    pub surrogate: Surrogate,
    pub k_init: f64,
}

impl Default for SiteInit {
    fn default() -> Self {
        Self {
            surrogate: Surrogate::DySoftSign,
            k_init: crate::grad::K_INIT,
        }
    }
}

/// One Sign site with its own sharpness.
#[derive(Clone, Debug)]
pub struct SteSite {
    pub surrogate: Surrogate,
    pub k: Param,
    pub smooth_test_mode: bool,
}

impl SteSite {
    pub fn new(reg: &mut ParamRegistry, name: String, init: SiteInit) -> Self {
        Self {
            surrogate: init.surrogate,
            k: reg.constant(name, ParamRole::Sharpness, &[1], init.k_init),
            smooth_test_mode: false,
        }
    }

    pub fn config(&self) -> SteConfig {
        SteConfig {
            surrogate: self.surrogate,
            k: self.k.scalar(),
            smooth_test_mode: self.smooth_test_mode,
        }
    }

    /// Applies the straight-through rule to `dq`, the gradient arriving at the
    /// quantized values of `x`: returns `dq · f'(x)` and adds `Σ dq · ∂f/∂k`
    /// to the sharpness gradient.
    fn backward(&self, x: &[f64], dq: &[f64], grads: &mut Gradients) -> Vec<f64> {
        let cfg = self.config();
        let mut dk = 0.0;
        let dx = x
            .iter()
            .zip(dq)
            .map(|(&xi, &g)| {
                dk += g * cfg.dk(xi);
                g * cfg.dx(xi)
            })
            .collect();
        grads.accumulate_scalar(&self.k, dk);
        dx
    }
}

fn check_channels(x: &FloatTensor, c: usize, what: &str) -> Result<(usize, usize)> {
    let (xc, h, w) = x.chw()?;
    if xc != c {
        return Err(Error::Dimension(format!(
            "{what}: expected {c} channels, got {xc}"
        )));
    }
    Ok((h, w))
}

/// Calls `f(channel, flat_index)` for every element of a `[c, h, w]` buffer.
fn for_each_channel(c: usize, plane: usize, mut f: impl FnMut(usize, usize)) {
    for m in 0..c {
        for i in m * plane..(m + 1) * plane {
            f(m, i);
        }
    }
}

// ---------------------------------------------------------------------------
// RPRReLU

/// Per-channel shifted leaky rectifier.
#[derive(Clone, Debug)]
pub struct RprReluParams {
    pub shift_in: Param,
    pub shift_out: Param,
    pub neg_slope: Param,
}

impl RprReluParams {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, c: usize) -> Self {
        Self {
            shift_in: reg.constant(format!("{prefix}.shift_in"), ParamRole::Float, &[c], 0.0),
            shift_out: reg.constant(format!("{prefix}.shift_out"), ParamRole::Float, &[c], 0.0),
            neg_slope: reg.constant(format!("{prefix}.neg_slope"), ParamRole::Float, &[c], 0.25),
        }
    }

    pub fn channels(&self) -> usize {
        self.shift_in.value.len()
    }

    pub fn forward(&self, y: &FloatTensor) -> Result<FloatTensor> {
        let (h, w) = check_channels(y, self.channels(), "rprrelu")?;
        let (a, b, c) = (
            self.shift_in.value.data(),
            self.shift_out.value.data(),
            self.neg_slope.value.data(),
        );
        let yd = y.data();
        let mut out = vec![0.0; yd.len()];
        for_each_channel(self.channels(), h * w, |m, i| {
            let t = yd[i] - a[m];
            out[i] = if yd[i] > a[m] { t + b[m] } else { c[m] * t + b[m] };
        });
        FloatTensor::new(y.shape(), out)
    }

    /// `y` is the forward input.
    pub fn backward(&self, y: &FloatTensor, g: &FloatTensor, grads: &mut Gradients) -> FloatTensor {
        let c = self.channels();
        let plane = y.len() / c;
        let (a, slope) = (self.shift_in.value.data(), self.neg_slope.value.data());
        let (yd, gd) = (y.data(), g.data());
        let mut dy = vec![0.0; yd.len()];
        let (mut da, mut db, mut dc) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
        for_each_channel(c, plane, |m, i| {
            let s = if yd[i] > a[m] {
                1.0
            } else {
                dc[m] += gd[i] * (yd[i] - a[m]);
                slope[m]
            };
            dy[i] = gd[i] * s;
            da[m] -= gd[i] * s;
            db[m] += gd[i];
        });
        grads.accumulate(&self.shift_in, &da);
        grads.accumulate(&self.shift_out, &db);
        grads.accumulate(&self.neg_slope, &dc);
        FloatTensor::new(y.shape(), dy).expect("shape preserved")
    }
}

pub fn rprrelu(y: &FloatTensor, p: &RprReluParams) -> Result<FloatTensor> {
    p.forward(y)
}

// ---------------------------------------------------------------------------
// ReDistribution

/// Per-channel affine map `α·x + β`.
#[derive(Clone, Debug)]
pub struct RedistributionParams {
    pub scale: Param,
    pub bias: Param,
}

impl RedistributionParams {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, c: usize) -> Self {
        Self {
            scale: reg.constant(format!("{prefix}.scale"), ParamRole::Float, &[c], 1.0),
            bias: reg.constant(format!("{prefix}.bias"), ParamRole::Float, &[c], 0.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.value.len()
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        let (h, w) = check_channels(x, self.channels(), "redistribution")?;
        let (s, b) = (self.scale.value.data(), self.bias.value.data());
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for_each_channel(self.channels(), h * w, |m, i| out[i] = s[m] * xd[i] + b[m]);
        FloatTensor::new(x.shape(), out)
    }

    pub fn backward(&self, x: &FloatTensor, g: &FloatTensor, grads: &mut Gradients) -> FloatTensor {
        let c = self.channels();
        let plane = x.len() / c;
        let s = self.scale.value.data();
        let (xd, gd) = (x.data(), g.data());
        let mut dx = vec![0.0; xd.len()];
        let (mut ds, mut dbias) = (vec![0.0; c], vec![0.0; c]);
        for_each_channel(c, plane, |m, i| {
            dx[i] = gd[i] * s[m];
            ds[m] += gd[i] * xd[i];
            dbias[m] += gd[i];
        });
        grads.accumulate(&self.scale, &ds);
        grads.accumulate(&self.bias, &dbias);
        FloatTensor::new(x.shape(), dx).expect("shape preserved")
    }
}

pub fn redistribution(x: &FloatTensor, p: &RedistributionParams) -> Result<FloatTensor> {
    p.forward(x)
}

// ---------------------------------------------------------------------------
// MaxOut

/// Per-channel `max(λ¹·y, λ²·y)`.
#[derive(Clone, Debug)]
pub struct MaxoutParams {
    pub slope_a: Param,
    pub slope_b: Param,
}

impl MaxoutParams {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, c: usize) -> Self {
        Self {
            slope_a: reg.constant(format!("{prefix}.slope_a"), ParamRole::Float, &[c], 1.0),
            slope_b: reg.constant(format!("{prefix}.slope_b"), ParamRole::Float, &[c], 0.25),
        }
    }

    pub fn channels(&self) -> usize {
        self.slope_a.value.len()
    }

    pub fn forward(&self, y: &FloatTensor) -> Result<FloatTensor> {
        let (h, w) = check_channels(y, self.channels(), "maxout")?;
        let (l1, l2) = (self.slope_a.value.data(), self.slope_b.value.data());
        let yd = y.data();
        let mut out = vec![0.0; yd.len()];
        for_each_channel(self.channels(), h * w, |m, i| {
            out[i] = (l1[m] * yd[i]).max(l2[m] * yd[i]);
        });
        FloatTensor::new(y.shape(), out)
    }

    pub fn backward(&self, y: &FloatTensor, g: &FloatTensor, grads: &mut Gradients) -> FloatTensor {
        let c = self.channels();
        let plane = y.len() / c;
        let (l1, l2) = (self.slope_a.value.data(), self.slope_b.value.data());
        let (yd, gd) = (y.data(), g.data());
        let mut dy = vec![0.0; yd.len()];
        let (mut d1, mut d2) = (vec![0.0; c], vec![0.0; c]);
        for_each_channel(c, plane, |m, i| {
            if l1[m] * yd[i] >= l2[m] * yd[i] {
                dy[i] = gd[i] * l1[m];
                d1[m] += gd[i] * yd[i];
            } else {
                dy[i] = gd[i] * l2[m];
                d2[m] += gd[i] * yd[i];
            }
        });
        grads.accumulate(&self.slope_a, &d1);
        grads.accumulate(&self.slope_b, &d2);
        FloatTensor::new(y.shape(), dy).expect("shape preserved")
    }
}

pub fn maxout(y: &FloatTensor, p: &MaxoutParams) -> Result<FloatTensor> {
    p.forward(y)
}

// ---------------------------------------------------------------------------
// DB Conv unit (depthwise 1×1 with two Sign sites)

/// Trainable DB Conv with its weight and activation Sign sites.
#[derive(Clone, Debug)]
pub struct DbConvUnit {
    pub latent: Param,
    pub weight_site: SteSite,
    pub act_site: SteSite,
    /// Pins `(α, β)` instead of deriving them from the latent weights. Used by
    /// finite-difference checks, where the scalars must stay detached.
    pub frozen_scalars: Option<DbScalars>,
}

#[derive(Clone, Debug)]
pub struct DbConvCache {
    input: FloatTensor,
    q_act: Vec<f64>,
    q_weight: Vec<f64>,
    yb: Vec<f64>,
    scalars: DbScalars,
}

impl DbConvUnit {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, c: usize, init: SiteInit) -> Self {
        // std 1/sqrt(c) keeps α = ‖w − β‖₂ near 1 at initialization.
        let bound = (3.0 / c as f64).sqrt();
        Self {
            latent: reg.uniform(format!("{prefix}.weight"), ParamRole::BinaryLatent, &[c], bound),
            weight_site: SteSite::new(reg, format!("{prefix}.weight_k"), init),
            act_site: SteSite::new(reg, format!("{prefix}.act_k"), init),
            frozen_scalars: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.latent.value.len()
    }

    pub fn scalars(&self) -> Result<DbScalars> {
        match self.frozen_scalars {
            Some(s) => Ok(s),
            None => compute_scalars(&self.latent.value),
        }
    }

    fn run(&self, x: &FloatTensor, keep: bool) -> Result<(FloatTensor, Option<DbConvCache>)> {
        check_channels(x, self.channels(), "db_conv")?;
        x.ensure_finite("db_conv input")?;
        let s = self.scalars()?;
        let (wcfg, acfg) = (self.weight_site.config(), self.act_site.config());
        let plane = x.len() / self.channels();
        let q_weight: Vec<f64> = self.latent.value.data().iter().map(|&v| wcfg.quantize(v)).collect();

        let (yb, q_act) = if acfg.smooth_test_mode || wcfg.smooth_test_mode {
            let q_act: Vec<f64> = x.data().iter().map(|&v| acfg.quantize(v)).collect();
            let yb = q_act
                .iter()
                .enumerate()
                .map(|(i, q)| q * q_weight[i / plane])
                .collect();
            (yb, q_act)
        } else {
            let w_b: PackedBitTensor = sign_quantize(&self.latent.value)?;
            let yb = binary_core(x, &w_b)?;
            let q_act = if keep { x.data().iter().map(|&v| sign(v)).collect() } else { Vec::new() };
            (yb, q_act)
        };
        let out = FloatTensor::new(
            x.shape(),
            x.data().iter().zip(&yb).map(|(&a, &y)| combine(s, a, y)).collect(),
        )?;
        let cache = keep.then(|| DbConvCache {
            input: x.clone(),
            q_act,
            q_weight,
            yb,
            scalars: s,
        });
        Ok((out, cache))
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        Ok(self.run(x, false)?.0)
    }

    pub fn forward_cached(&self, x: &FloatTensor) -> Result<(FloatTensor, DbConvCache)> {
        let (y, c) = self.run(x, true)?;
        Ok((y, c.expect("cache requested")))
    }

    /// Gradient reaches the input through Sign (STE), |a| (derivative Sign(a))
    /// and the β·a term; α and β are treated as constants.
    pub fn backward(&self, cache: &DbConvCache, g: &FloatTensor, grads: &mut Gradients) -> FloatTensor {
        let DbScalars { alpha, beta } = cache.scalars;
        let c = self.channels();
        let a = cache.input.data();
        let plane = a.len() / c;
        let gd = g.data();

        let mut dq_act = vec![0.0; a.len()];
        let mut dq_w = vec![0.0; c];
        let mut dx = vec![0.0; a.len()];
        for_each_channel(c, plane, |m, i| {
            let common = gd[i] * alpha * a[i].abs();
            dq_act[i] = common * cache.q_weight[m];
            dq_w[m] += common * cache.q_act[i];
            dx[i] = gd[i] * (alpha * cache.yb[i] * sign(a[i]) + beta);
        });
        let through_sign = self.act_site.backward(a, &dq_act, grads);
        for (d, s) in dx.iter_mut().zip(&through_sign) {
            *d += s;
        }
        let dlatent = self.weight_site.backward(self.latent.value.data(), &dq_w, grads);
        grads.accumulate(&self.latent, &dlatent);
        FloatTensor::new(cache.input.shape(), dx).expect("shape preserved")
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let elems = (self.channels() * h * w) as u64;
        Cost {
            params_f: 2,
            params_b: self.channels() as u64,
            flops_f: 4 * elems,
            bops_b: 2 * elems,
        }
    }
}

impl Parameterized for DbConvUnit {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.latent);
        f(&self.weight_site.k);
        f(&self.act_site.k);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.latent);
        f(&mut self.weight_site.k);
        f(&mut self.act_site.k);
    }

    fn visit_sites_mut(&mut self, f: &mut dyn FnMut(&mut SteSite)) {
        f(&mut self.weight_site);
        f(&mut self.act_site);
    }

    fn visit_db_mut(&mut self, f: &mut dyn FnMut(&mut DbConvUnit)) {
        f(self);
    }
}

// ---------------------------------------------------------------------------
// Binary Convolution Layer

/// `X' = RPRReLU(BinConv(Sign(X))) + X` with a shape-preserving kernel.
#[derive(Clone, Debug)]
pub struct BinaryConvLayer {
    pub spec: ConvSpec,
    pub latent: Param,
    pub weight_site: SteSite,
    pub act_site: SteSite,
    pub rprrelu: RprReluParams,
}

#[derive(Clone, Debug)]
pub struct BinaryConvCache {
    input: FloatTensor,
    cols: Array2<f64>,
    q_weight: Vec<f64>,
    conv_out: FloatTensor,
}

impl BinaryConvLayer {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, c: usize, kernel: usize, init: SiteInit) -> Result<Self> {
        let spec = ConvSpec::same(c, c, kernel)?;
        let fan_in = (c * kernel * kernel) as f64;
        Ok(Self {
            latent: reg.uniform(
                format!("{prefix}.weight"),
                ParamRole::BinaryLatent,
                &spec.weight_shape(),
                (3.0 / fan_in).sqrt(),
            ),
            weight_site: SteSite::new(reg, format!("{prefix}.weight_k"), init),
            act_site: SteSite::new(reg, format!("{prefix}.act_k"), init),
            rprrelu: RprReluParams::new(reg, &format!("{prefix}.rprrelu"), c),
            spec,
        })
    }

    pub fn channels(&self) -> usize {
        self.spec.in_channels
    }

    /// Fixed `1 / (c·k²)` applied to the integer XNOR sum so the branch stays
    /// on the scale of the residual. It folds into the RPRReLU shifts at
    /// inference time.
    pub fn output_scale(&self) -> f64 {
        let k = self.spec.kernel;
        1.0 / (self.spec.in_channels * k * k) as f64
    }

    fn smooth(&self) -> bool {
        self.weight_site.smooth_test_mode || self.act_site.smooth_test_mode
    }

    fn run(&self, x: &FloatTensor, keep: bool) -> Result<(FloatTensor, Option<BinaryConvCache>)> {
        let (h, w) = check_channels(x, self.channels(), "binary_conv_layer")?;
        x.ensure_finite("binary_conv_layer input")?;
        let (wcfg, acfg) = (self.weight_site.config(), self.act_site.config());
        let needs_cols = keep || self.smooth();

        let (conv_out, cols, q_weight) = if needs_cols {
            let q_weight: Vec<f64> = self.latent.value.data().iter().map(|&v| wcfg.quantize(v)).collect();
            let q_x = x.map(|v| acfg.quantize(v));
            let (cols, oh, ow) = im2col(&q_x, &self.spec)?;
            let y = if self.smooth() {
                conv_from_cols(&cols, &q_weight, &self.spec, oh, ow)?
            } else {
                binary_conv2d(&sign_quantize(x)?, &sign_quantize(&self.latent.value)?, &self.spec)?
            };
            (y, Some(cols), q_weight)
        } else {
            let y = binary_conv2d(&sign_quantize(x)?, &sign_quantize(&self.latent.value)?, &self.spec)?;
            (y, None, Vec::new())
        };
        debug_assert_eq!(conv_out.shape(), &[self.channels(), h, w]);
        let scale = self.output_scale();
        let conv_out = conv_out.map(|v| v * scale);

        let out = self.rprrelu.forward(&conv_out)?.add(x)?;
        let cache = match (keep, cols) {
            (true, Some(cols)) => Some(BinaryConvCache {
                input: x.clone(),
                cols,
                q_weight,
                conv_out,
            }),
            _ => None,
        };
        Ok((out, cache))
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        Ok(self.run(x, false)?.0)
    }

    pub fn forward_cached(&self, x: &FloatTensor) -> Result<(FloatTensor, BinaryConvCache)> {
        let (y, c) = self.run(x, true)?;
        Ok((y, c.expect("cache requested")))
    }

    pub fn backward(&self, cache: &BinaryConvCache, g: &FloatTensor, grads: &mut Gradients) -> Result<FloatTensor> {
        let (_, h, w) = cache.input.chw()?;
        let scale = self.output_scale();
        let dconv = self.rprrelu.backward(&cache.conv_out, g, grads).map(|v| v * scale);
        let (dq_x, dq_w) = conv_backward(&cache.cols, &cache.q_weight, &self.spec, &dconv, h, w)?;
        let through_sign = self.act_site.backward(cache.input.data(), dq_x.data(), grads);
        let dlatent = self.weight_site.backward(self.latent.value.data(), &dq_w, grads);
        grads.accumulate(&self.latent, &dlatent);
        let dx = g
            .data()
            .iter()
            .zip(&through_sign)
            .map(|(a, b)| a + b)
            .collect();
        FloatTensor::new(cache.input.shape(), dx)
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let c = self.channels() as u64;
        Cost {
            params_f: 3 * c,
            params_b: self.latent.value.len() as u64,
            flops_f: 0,
            bops_b: 2 * self.spec.macs(h, w),
        }
    }
}

impl Parameterized for BinaryConvLayer {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.latent);
        f(&self.weight_site.k);
        f(&self.act_site.k);
        f(&self.rprrelu.shift_in);
        f(&self.rprrelu.shift_out);
        f(&self.rprrelu.neg_slope);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.latent);
        f(&mut self.weight_site.k);
        f(&mut self.act_site.k);
        f(&mut self.rprrelu.shift_in);
        f(&mut self.rprrelu.shift_out);
        f(&mut self.rprrelu.neg_slope);
    }

    fn visit_sites_mut(&mut self, f: &mut dyn FnMut(&mut SteSite)) {
        f(&mut self.weight_site);
        f(&mut self.act_site);
    }
}

pub fn binary_conv_layer(x: &FloatTensor, layer: &BinaryConvLayer) -> Result<FloatTensor> {
    layer.forward(x)
}

// ---------------------------------------------------------------------------
// DB Conv Layer

/// `X_o = MaxOut(DBConv(X_r)) + X_r`.
#[derive(Clone, Debug)]
pub struct DbConvLayer {
    pub db: DbConvUnit,
    pub maxout: MaxoutParams,
}

#[derive(Clone, Debug)]
pub struct DbConvLayerCache {
    db: DbConvCache,
    db_out: FloatTensor,
}

impl DbConvLayer {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, c: usize, init: SiteInit) -> Self {
        Self {
            db: DbConvUnit::new(reg, prefix, c, init),
            maxout: MaxoutParams::new(reg, &format!("{prefix}.maxout"), c),
        }
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        self.maxout.forward(&self.db.forward(x)?)?.add(x)
    }

    pub fn forward_cached(&self, x: &FloatTensor) -> Result<(FloatTensor, DbConvLayerCache)> {
        let (db_out, db) = self.db.forward_cached(x)?;
        let out = self.maxout.forward(&db_out)?.add(x)?;
        Ok((out, DbConvLayerCache { db, db_out }))
    }

    pub fn backward(&self, cache: &DbConvLayerCache, g: &FloatTensor, grads: &mut Gradients) -> FloatTensor {
        let dm = self.maxout.backward(&cache.db_out, g, grads);
        let mut dx = self.db.backward(&cache.db, &dm, grads);
        dx.add_assign(g);
        dx
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        self.db.cost(h, w)
            + Cost {
                params_f: 2 * self.db.channels() as u64,
                ..Cost::default()
            }
    }
}

impl Parameterized for DbConvLayer {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.db.visit(f);
        f(&self.maxout.slope_a);
        f(&self.maxout.slope_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.db.visit_mut(f);
        f(&mut self.maxout.slope_a);
        f(&mut self.maxout.slope_b);
    }

    fn visit_sites_mut(&mut self, f: &mut dyn FnMut(&mut SteSite)) {
        self.db.visit_sites_mut(f);
    }

    fn visit_db_mut(&mut self, f: &mut dyn FnMut(&mut DbConvUnit)) {
        f(&mut self.db);
    }
}

pub fn db_conv_layer(x: &FloatTensor, layer: &DbConvLayer) -> Result<FloatTensor> {
    layer.forward(x)
}

// ---------------------------------------------------------------------------
// Binary Block

/// Binary Convolution Layer → ReDistribution → DB Conv Layer.
#[derive(Clone, Debug)]
pub struct BinaryBlock {
    pub conv: BinaryConvLayer,
    pub redist: RedistributionParams,
    pub db: DbConvLayer,
}

#[derive(Clone, Debug)]
pub struct BinaryBlockCache {
    conv: BinaryConvCache,
    conv_out: FloatTensor,
    db: DbConvLayerCache,
}

impl BinaryBlock {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, c: usize, init: SiteInit) -> Result<Self> {
        Ok(Self {
            conv: BinaryConvLayer::new(reg, &format!("{prefix}.bconv"), c, 3, init)?,
            redist: RedistributionParams::new(reg, &format!("{prefix}.redist"), c),
            db: DbConvLayer::new(reg, &format!("{prefix}.dbconv"), c, init),
        })
    }

    pub fn channels(&self) -> usize {
        self.conv.channels()
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        let y = self.conv.forward(x)?;
        self.db.forward(&self.redist.forward(&y)?)
    }

    pub fn forward_cached(&self, x: &FloatTensor) -> Result<(FloatTensor, BinaryBlockCache)> {
        let (conv_out, conv) = self.conv.forward_cached(x)?;
        let r = self.redist.forward(&conv_out)?;
        let (out, db) = self.db.forward_cached(&r)?;
        Ok((out, BinaryBlockCache { conv, conv_out, db }))
    }

    pub fn backward(&self, cache: &BinaryBlockCache, g: &FloatTensor, grads: &mut Gradients) -> Result<FloatTensor> {
        let dr = self.db.backward(&cache.db, g, grads);
        let dy = self.redist.backward(&cache.conv_out, &dr, grads);
        self.conv.backward(&cache.conv, &dy, grads)
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        self.conv.cost(h, w)
            + Cost {
                params_f: 2 * self.channels() as u64,
                ..Cost::default()
            }
            + self.db.cost(h, w)
    }
}

impl Parameterized for BinaryBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv.visit(f);
        f(&self.redist.scale);
        f(&self.redist.bias);
        self.db.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_mut(f);
        f(&mut self.redist.scale);
        f(&mut self.redist.bias);
        self.db.visit_mut(f);
    }

    fn visit_sites_mut(&mut self, f: &mut dyn FnMut(&mut SteSite)) {
        self.conv.visit_sites_mut(f);
        self.db.visit_sites_mut(f);
    }

    fn visit_db_mut(&mut self, f: &mut dyn FnMut(&mut DbConvUnit)) {
        self.db.visit_db_mut(f);
    }
}

pub fn binary_block(x: &FloatTensor, block: &BinaryBlock) -> Result<FloatTensor> {
    block.forward(x)
}

// ---------------------------------------------------------------------------
// Down-Sample / Up-Sample / Fusion

/// 2×2 max-pool, channel duplication, DB Conv over `2c` channels.
#[derive(Clone, Debug)]
pub struct DownSample {
    pub db: DbConvUnit,
}

#[derive(Clone, Debug)]
pub struct DownSampleCache {
    in_shape: [usize; 3],
    argmax: Vec<usize>,
    db: DbConvCache,
}

fn max_pool2(x: &FloatTensor) -> Result<(FloatTensor, Vec<usize>)> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "down-sample needs even extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for m in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = (m * h + 2 * y) * w + 2 * xx;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((FloatTensor::new(&[c, oh, ow], out)?, argmax))
}

/// `[c, h, w] → [2c, h, w]`, output channels `2i` and `2i+1` copy channel `i`.
fn duplicate_channels(x: &FloatTensor) -> Result<FloatTensor> {
    let (c, h, w) = x.chw()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(2 * x.len());
    for m in 0..c {
        let src = &x.data()[m * plane..(m + 1) * plane];
        out.extend_from_slice(src);
        out.extend_from_slice(src);
    }
    FloatTensor::new(&[2 * c, h, w], out)
}

/// `[2c, h, w] → [c, h, w]`, averaging channel pairs.
fn halve_channels(x: &FloatTensor) -> Result<FloatTensor> {
    let (c2, h, w) = x.chw()?;
    if c2 % 2 != 0 {
        return Err(Error::Dimension(format!(
            "channel halving needs an even channel count, got {c2}"
        )));
    }
    let plane = h * w;
    let d = x.data();
    let out = (0..c2 / 2 * plane)
        .map(|i| {
            let (m, p) = (i / plane, i % plane);
            0.5 * (d[2 * m * plane + p] + d[(2 * m + 1) * plane + p])
        })
        .collect();
    FloatTensor::new(&[c2 / 2, h, w], out)
}

fn upsample_nearest2(x: &FloatTensor) -> Result<FloatTensor> {
    let (c, h, w) = x.chw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let d = x.data();
    let out = (0..c * oh * ow)
        .map(|i| {
            let m = i / (oh * ow);
            let y = (i / ow) % oh;
            let xx = i % ow;
            d[(m * h + y / 2) * w + xx / 2]
        })
        .collect();
    FloatTensor::new(&[c, oh, ow], out)
}

impl DownSample {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, in_channels: usize, init: SiteInit) -> Self {
        Self {
            db: DbConvUnit::new(reg, &format!("{prefix}.dbconv"), 2 * in_channels, init),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.db.channels() / 2
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        check_channels(x, self.in_channels(), "downsample")?;
        let (p, _) = max_pool2(x)?;
        self.db.forward(&duplicate_channels(&p)?)
    }

    pub fn forward_cached(&self, x: &FloatTensor) -> Result<(FloatTensor, DownSampleCache)> {
        let (c, h, w) = x.chw()?;
        check_channels(x, self.in_channels(), "downsample")?;
        let (p, argmax) = max_pool2(x)?;
        let (out, db) = self.db.forward_cached(&duplicate_channels(&p)?)?;
        Ok((
            out,
            DownSampleCache {
                in_shape: [c, h, w],
                argmax,
                db,
            },
        ))
    }

    pub fn backward(&self, cache: &DownSampleCache, g: &FloatTensor, grads: &mut Gradients) -> Result<FloatTensor> {
        let gd = self.db.backward(&cache.db, g, grads);
        let [c, h, w] = cache.in_shape;
        let plane = (h / 2) * (w / 2);
        let d = gd.data();
        let mut dx = vec![0.0; c * h * w];
        for m in 0..c {
            for p in 0..plane {
                let gp = d[2 * m * plane + p] + d[(2 * m + 1) * plane + p];
                dx[cache.argmax[m * plane + p]] += gp;
            }
        }
        FloatTensor::new(&cache.in_shape, dx)
    }

    /// `h, w` are the input extents.
    pub fn cost(&self, h: usize, w: usize) -> Cost {
        self.db.cost(h / 2, w / 2)
    }
}

/// Nearest 2× up-sampling, DB Conv over `c` channels, pairwise channel
/// averaging down to `c/2`.
#[derive(Clone, Debug)]
pub struct UpSample {
    pub db: DbConvUnit,
}

#[derive(Clone, Debug)]
pub struct UpSampleCache {
    in_shape: [usize; 3],
    db: DbConvCache,
}

impl UpSample {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, in_channels: usize, init: SiteInit) -> Result<Self> {
        if in_channels % 2 != 0 {
            return Err(Error::Dimension(format!(
                "up-sample needs an even channel count, got {in_channels}"
            )));
        }
        Ok(Self {
            db: DbConvUnit::new(reg, &format!("{prefix}.dbconv"), in_channels, init),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.db.channels()
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        check_channels(x, self.in_channels(), "upsample")?;
        halve_channels(&self.db.forward(&upsample_nearest2(x)?)?)
    }

    pub fn forward_cached(&self, x: &FloatTensor) -> Result<(FloatTensor, UpSampleCache)> {
        let (c, h, w) = x.chw()?;
        check_channels(x, self.in_channels(), "upsample")?;
        let (v, db) = self.db.forward_cached(&upsample_nearest2(x)?)?;
        Ok((
            halve_channels(&v)?,
            UpSampleCache {
                in_shape: [c, h, w],
                db,
            },
        ))
    }

    pub fn backward(&self, cache: &UpSampleCache, g: &FloatTensor, grads: &mut Gradients) -> Result<FloatTensor> {
        let [c, h, w] = cache.in_shape;
        let (oh, ow) = (2 * h, 2 * w);
        let plane = oh * ow;
        let gdat = g.data();
        let gv: Vec<f64> = (0..c * plane)
            .map(|i| 0.5 * gdat[(i / plane) / 2 * plane + i % plane])
            .collect();
        let gv = FloatTensor::new(&[c, oh, ow], gv)?;
        let gu = self.db.backward(&cache.db, &gv, grads);
        let gu = gu.data();
        let mut dx = vec![0.0; c * h * w];
        for m in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    dx[(m * h + y / 2) * w + xx / 2] += gu[(m * oh + y) * ow + xx];
                }
            }
        }
        FloatTensor::new(&cache.in_shape, dx)
    }

    /// `h, w` are the input extents.
    pub fn cost(&self, h: usize, w: usize) -> Cost {
        self.db.cost(2 * h, 2 * w)
    }
}

/// Elementwise add of the skip and up-sampled features, then DB Conv.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub db: DbConvUnit,
}

impl Fusion {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, c: usize, init: SiteInit) -> Self {
        Self {
            db: DbConvUnit::new(reg, &format!("{prefix}.dbconv"), c, init),
        }
    }

    pub fn forward(&self, skip: &FloatTensor, up: &FloatTensor) -> Result<FloatTensor> {
        self.db.forward(&skip.add(up)?)
    }

    pub fn forward_cached(&self, skip: &FloatTensor, up: &FloatTensor) -> Result<(FloatTensor, DbConvCache)> {
        self.db.forward_cached(&skip.add(up)?)
    }

    /// Returns the gradient shared by both inputs.
    pub fn backward(&self, cache: &DbConvCache, g: &FloatTensor, grads: &mut Gradients) -> FloatTensor {
        self.db.backward(cache, g, grads)
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        self.db.cost(h, w)
    }
}

macro_rules! db_wrapper_params {
    ($t:ty) => {
        impl Parameterized for $t {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
                self.db.visit(f);
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
                self.db.visit_mut(f);
            }
            fn visit_sites_mut(&mut self, f: &mut dyn FnMut(&mut SteSite)) {
                self.db.visit_sites_mut(f);
            }
            fn visit_db_mut(&mut self, f: &mut dyn FnMut(&mut DbConvUnit)) {
                f(&mut self.db);
            }
        }
    };
}

db_wrapper_params!(DownSample);
db_wrapper_params!(UpSample);
db_wrapper_params!(Fusion);

pub fn downsample(x: &FloatTensor, layer: &DownSample) -> Result<FloatTensor> {
    layer.forward(x)
}

pub fn upsample(x: &FloatTensor, layer: &UpSample) -> Result<FloatTensor> {
    layer.forward(x)
}

pub fn fuse(skip: &FloatTensor, up: &FloatTensor, layer: &Fusion) -> Result<FloatTensor> {
    layer.forward(skip, up)
}

// ---------------------------------------------------------------------------
// Full-precision convolution (stem and head)

#[derive(Clone, Debug)]
pub struct FpConv {
    pub spec: ConvSpec,
    pub weight: Param,
    pub bias: Param,
}

#[derive(Clone, Debug)]
pub struct FpConvCache {
    cols: Array2<f64>,
    h: usize,
    w: usize,
}

impl FpConv {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        spec: ConvSpec,
        weight_bound: f64,
        bias_init: f64,
    ) -> Self {
        Self {
            weight: reg.uniform(
                format!("{prefix}.weight"),
                ParamRole::Float,
                &spec.weight_shape(),
                weight_bound,
            ),
            bias: reg.constant(format!("{prefix}.bias"), ParamRole::Float, &[spec.out_channels], bias_init),
            spec,
        }
    }

    fn run(&self, x: &FloatTensor) -> Result<(FloatTensor, Array2<f64>)> {
        let (cols, oh, ow) = im2col(x, &self.spec)?;
        let mut y = conv_from_cols(&cols, self.weight.value.data(), &self.spec, oh, ow)?;
        let plane = oh * ow;
        let b = self.bias.value.data();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b[i / plane];
        }
        Ok((y, cols))
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        Ok(self.run(x)?.0)
    }

    pub fn forward_cached(&self, x: &FloatTensor) -> Result<(FloatTensor, FpConvCache)> {
        let (_, h, w) = x.chw()?;
        let (y, cols) = self.run(x)?;
        Ok((y, FpConvCache { cols, h, w }))
    }

    pub fn backward(&self, cache: &FpConvCache, g: &FloatTensor, grads: &mut Gradients) -> Result<FloatTensor> {
        let (dx, dw) = conv_backward(&cache.cols, self.weight.value.data(), &self.spec, g, cache.h, cache.w)?;
        grads.accumulate(&self.weight, &dw);
        let (n, oh, ow) = g.chw()?;
        let db: Vec<f64> = (0..n)
            .map(|m| g.data()[m * oh * ow..(m + 1) * oh * ow].iter().sum())
            .collect();
        grads.accumulate(&self.bias, &db);
        Ok(dx)
    }

    /// Bias adds count one flop per output element.
    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let (oh, ow) = self.spec.output_extent(h, w).unwrap_or((0, 0));
        Cost {
            params_f: (self.weight.value.len() + self.bias.value.len()) as u64,
            params_b: 0,
            flops_f: 2 * self.spec.macs(oh, ow) + (self.spec.out_channels * oh * ow) as u64,
            bops_b: 0,
        }
    }
}

impl Parameterized for FpConv {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn visit_sites_mut(&mut self, _f: &mut dyn FnMut(&mut SteSite)) {}
}
