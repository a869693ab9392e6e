//! Self-verification: finite-difference gradient checks, closed-form STE
//! checks and the named suites run by `bitsird check`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binconv::{binary_conv2d, float_pm1_conv2d_oracle, ConvSpec};
use crate::bitcore::{sign_quantize, FloatTensor};
use crate::dbconv::{db_conv, db_conv_direct_oracle, param_bits, ConvKind, DbConvParams};
use crate::error::{Error, Result};
use crate::grad::{approx_error_sq, dysoftsign, dysoftsign_grad, Surrogate};
use crate::layers::{
    BinaryBlock, BinaryBlockCache, BinaryConvCache, BinaryConvLayer, DbConvCache, DbConvLayer,
    DbConvLayerCache, DbConvUnit, DownSample, DownSampleCache, FpConv, FpConvCache, Fusion,
    MaxoutParams, Parameterized, RedistributionParams, RprReluParams, SiteInit, SteSite, UpSample,
    UpSampleCache,
};
use crate::network::{Model, NetConfig};
use crate::param::{Gradients, Param, ParamRegistry, ParamRole};

/// A single-input layer with an explicit backward pass.
pub trait Differentiable: Parameterized {
    type Cache;
    fn eval(&self, x: &FloatTensor) -> Result<FloatTensor>;
    fn eval_cached(&self, x: &FloatTensor) -> Result<(FloatTensor, Self::Cache)>;
    fn grad(&self, cache: &Self::Cache, g: &FloatTensor, grads: &mut Gradients) -> Result<FloatTensor>;
}

macro_rules! elementwise_params {
    ($t:ty, $($field:ident),+) => {
        impl Parameterized for $t {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
                $(f(&self.$field);)+
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
                $(f(&mut self.$field);)+
            }
            fn visit_sites_mut(&mut self, _f: &mut dyn FnMut(&mut SteSite)) {}
        }

        impl Differentiable for $t {
            type Cache = FloatTensor;
            fn eval(&self, x: &FloatTensor) -> Result<FloatTensor> {
                self.forward(x)
            }
            fn eval_cached(&self, x: &FloatTensor) -> Result<(FloatTensor, FloatTensor)> {
                Ok((self.forward(x)?, x.clone()))
            }
            fn grad(&self, x: &FloatTensor, g: &FloatTensor, grads: &mut Gradients) -> Result<FloatTensor> {
                Ok(self.backward(x, g, grads))
            }
        }
    };
}

elementwise_params!(RprReluParams, shift_in, shift_out, neg_slope);
elementwise_params!(RedistributionParams, scale, bias);
elementwise_params!(MaxoutParams, slope_a, slope_b);

macro_rules! layer_differentiable {
    ($t:ty, $cache:ty, infallible) => {
        impl Differentiable for $t {
            type Cache = $cache;
            fn eval(&self, x: &FloatTensor) -> Result<FloatTensor> {
                self.forward(x)
            }
            fn eval_cached(&self, x: &FloatTensor) -> Result<(FloatTensor, $cache)> {
                self.forward_cached(x)
            }
            fn grad(&self, c: &$cache, g: &FloatTensor, grads: &mut Gradients) -> Result<FloatTensor> {
                Ok(self.backward(c, g, grads))
            }
        }
    };
    ($t:ty, $cache:ty) => {
        impl Differentiable for $t {
            type Cache = $cache;
            fn eval(&self, x: &FloatTensor) -> Result<FloatTensor> {
                self.forward(x)
            }
            fn eval_cached(&self, x: &FloatTensor) -> Result<(FloatTensor, $cache)> {
                self.forward_cached(x)
            }
            fn grad(&self, c: &$cache, g: &FloatTensor, grads: &mut Gradients) -> Result<FloatTensor> {
                self.backward(c, g, grads)
            }
        }
    };
}

layer_differentiable!(DbConvUnit, DbConvCache, infallible);
layer_differentiable!(DbConvLayer, DbConvLayerCache, infallible);
layer_differentiable!(BinaryConvLayer, BinaryConvCache);
layer_differentiable!(BinaryBlock, BinaryBlockCache);
layer_differentiable!(DownSample, DownSampleCache);
layer_differentiable!(UpSample, UpSampleCache);
layer_differentiable!(FpConv, FpConvCache);

/// Fusion viewed as a single-input layer over `[skip; up]` stacked on channels.
#[derive(Clone, Debug)]
pub struct StackedFusion(pub Fusion);

impl StackedFusion {
    fn split(&self, x: &FloatTensor) -> Result<(FloatTensor, FloatTensor)> {
        let (c2, h, w) = x.chw()?;
        if c2 % 2 != 0 {
            return Err(Error::Dimension("stacked fusion input needs an even channel count".into()));
        }
        let half = c2 / 2 * h * w;
        let skip = FloatTensor::new(&[c2 / 2, h, w], x.data()[..half].to_vec())?;
        let up = FloatTensor::new(&[c2 / 2, h, w], x.data()[half..].to_vec())?;
        Ok((skip, up))
    }
}

impl Parameterized for StackedFusion {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.0.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.0.visit_mut(f)
    }
    fn visit_sites_mut(&mut self, f: &mut dyn FnMut(&mut SteSite)) {
        self.0.visit_sites_mut(f)
    }
    fn visit_db_mut(&mut self, f: &mut dyn FnMut(&mut DbConvUnit)) {
        self.0.visit_db_mut(f)
    }
}

impl Differentiable for StackedFusion {
    type Cache = DbConvCache;
    fn eval(&self, x: &FloatTensor) -> Result<FloatTensor> {
        let (s, u) = self.split(x)?;
        self.0.forward(&s, &u)
    }
    fn eval_cached(&self, x: &FloatTensor) -> Result<(FloatTensor, DbConvCache)> {
        let (s, u) = self.split(x)?;
        self.0.forward_cached(&s, &u)
    }
    fn grad(&self, c: &DbConvCache, g: &FloatTensor, grads: &mut Gradients) -> Result<FloatTensor> {
        let shared = self.0.backward(c, g, grads);
        let (ch, h, w) = shared.chw()?;
        let mut data = shared.data().to_vec();
        data.extend_from_slice(shared.data());
        FloatTensor::new(&[2 * ch, h, w], data)
    }
}

/// Pins every DB Conv `(α, β)` at its current value.
pub fn freeze_db_scalars(layer: &mut impl Parameterized) -> Result<()> {
    let mut err = None;
    layer.visit_db_mut(&mut |u| match u.scalars() {
        Ok(s) => u.frozen_scalars = Some(s),
        Err(e) => err = Some(e),
    });
    err.map_or(Ok(()), Err)
}

/// Moves parameters away from their structured initial values so every
/// branch is exercised, and sets sharpness into `[0.5, 2]` where the
/// surrogate is visibly curved.
pub fn perturb_params(layer: &mut impl Parameterized, rng: &mut ChaCha8Rng) {
    layer.visit_mut(&mut |p| {
        let sharp = p.role == ParamRole::Sharpness;
        for v in p.value.data_mut() {
            if sharp {
                *v = rng.gen_range(0.5..2.0);
            } else {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    });
}

/// Worst norm-relative gradient error for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorError {
    pub name: String,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorError>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorError> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |t| t.rel_error)
    }
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-6)
}

fn weighted_sum(y: &FloatTensor, r: &FloatTensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn nudge(layer: &mut impl Parameterized, id: usize, j: usize, delta: f64) {
    layer.visit_mut(&mut |p| {
        if p.id == id {
            p.value.data_mut()[j] += delta;
        }
    });
}

/// Compares the analytic backward pass with central differences of
/// `L = Σ r ⊙ layer(x)` for a fixed random `r`, over the input and every
/// parameter tensor. `with_sharpness` includes the k parameters, which only
/// affect the forward pass in smooth mode.
pub fn check_gradients<D: Differentiable>(
    layer: &mut D,
    x: &FloatTensor,
    seed: u64,
    with_sharpness: bool,
) -> Result<GradCheckReport> {
    const STEP: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (y, cache) = layer.eval_cached(x)?;
    let r = FloatTensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0));
    let mut grads = Gradients::zeros(collect_params(layer).iter().copied());
    let dx = layer.grad(&cache, &r, &mut grads)?;

    let mut tensors = Vec::new();
    let mut numeric = vec![0.0; x.len()];
    let mut xp = x.clone();
    for (i, n) in numeric.iter_mut().enumerate() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + STEP;
        let lp = weighted_sum(&layer.eval(&xp)?, &r);
        xp.data_mut()[i] = orig - STEP;
        let lm = weighted_sum(&layer.eval(&xp)?, &r);
        xp.data_mut()[i] = orig;
        *n = (lp - lm) / (2.0 * STEP);
    }
    tensors.push(TensorError {
        name: "input".into(),
        rel_error: rel_error(dx.data(), &numeric),
    });

    let meta: Vec<(usize, String, ParamRole, usize)> = collect_params(layer)
        .iter()
        .map(|p| (p.id, p.name.clone(), p.role, p.value.len()))
        .collect();
    for (id, name, role, len) in meta {
        if role == ParamRole::Sharpness && !with_sharpness {
            continue;
        }
        let mut numeric = vec![0.0; len];
        for (j, n) in numeric.iter_mut().enumerate() {
            nudge(layer, id, j, STEP);
            let lp = weighted_sum(&layer.eval(x)?, &r);
            nudge(layer, id, j, -2.0 * STEP);
            let lm = weighted_sum(&layer.eval(x)?, &r);
            nudge(layer, id, j, STEP);
            *n = (lp - lm) / (2.0 * STEP);
        }
        tensors.push(TensorError {
            name,
            rel_error: rel_error(grads.by_id(id), &numeric),
        });
    }
    Ok(GradCheckReport { tensors })
}

fn collect_params<L: Parameterized>(layer: &L) -> Vec<&Param> {
    let mut out = Vec::new();
    layer.visit(&mut |p| out.push(p));
    out
}

/// Random input in `[-1.5, 1.5]`, kept away from 0 so `|a|` and the
/// rectifier kinks are not straddled by the finite-difference step.
pub fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> FloatTensor {
    FloatTensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.5);
        if rng.gen() {
            m
        } else {
            -m
        }
    })
}

/// Prepares a layer for a smooth-mode finite-difference check.
pub fn prepare_smooth(layer: &mut impl Parameterized, rng: &mut ChaCha8Rng) -> Result<()> {
    perturb_params(layer, rng);
    layer.visit_sites_mut(&mut |s| s.smooth_test_mode = true);
    freeze_db_scalars(layer)
}

/// Smooth-mode checks on every layer kind and the composed Binary Block,
/// one entry per layer with its worst tensor error.
pub fn smooth_mode_layer_checks(seed: u64, cases: usize) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let c = rng.gen_range(1..=4);
        let h = rng.gen_range(2..=4) * 2;
        let w = rng.gen_range(2..=4) * 2;
        let init = SiteInit {
            surrogate: Surrogate::DySoftSign,
            k_init: 1.0,
        };
        let reg = &mut ParamRegistry::new(ChaCha8Rng::seed_from_u64(seed ^ case as u64));
        let x = random_input(&mut rng, &[c, h, w]);
        let s = rng.gen();

        macro_rules! run {
            ($name:expr, $layer:expr, $x:expr) => {{
                let mut layer = $layer;
                prepare_smooth(&mut layer, &mut rng)?;
                let report = check_gradients(&mut layer, &$x, s, true)?;
                out.push((format!("{} (case {case})", $name), report));
            }};
        }

        run!("rprrelu", RprReluParams::new(reg, "r", c), x);
        run!("redistribution", RedistributionParams::new(reg, "d", c), x);
        run!("maxout", MaxoutParams::new(reg, "m", c), x);
        run!("db_conv", DbConvUnit::new(reg, "u", c, init), x);
        run!("db_conv_layer", DbConvLayer::new(reg, "l", c, init), x);
        run!("binary_conv_layer", BinaryConvLayer::new(reg, "b", c, 3, init)?, x);
        run!("binary_block", BinaryBlock::new(reg, "blk", c, init)?, x);
        run!("downsample", DownSample::new(reg, "ds", c, init), x);
        let up_in = random_input(&mut rng, &[2 * c, h / 2, w / 2]);
        run!("upsample", UpSample::new(reg, "us", 2 * c, init)?, up_in);
        let stacked = random_input(&mut rng, &[2 * c, h, w]);
        run!("fusion", StackedFusion(Fusion::new(reg, "fu", c, init)), stacked);
    }
    Ok(out)
}

/// Normal-mode check: every Sign site's backward must equal
/// `upstream · k / (1 + |k·x|)²`. The upstream gradient at the quantized
/// values is rebuilt with direct loops, independent of the layer code.
/// Returns the largest absolute deviation.
pub fn normal_mode_ste_check(seed: u64, cases: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let deriv = |k: f64, x: f64| k / (1.0 + (k * x).abs()).powi(2);
    for case in 0..cases {
        let c = rng.gen_range(1..=4);
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let reg = &mut ParamRegistry::new(ChaCha8Rng::seed_from_u64(seed.wrapping_add(case as u64)));
        let init = SiteInit::default();
        let x = random_input(&mut rng, &[c, h, w]);
        let g = FloatTensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0));
        let plane = h * w;

        // DB Conv unit.
        let mut unit = DbConvUnit::new(reg, "u", c, init);
        perturb_params(&mut unit, &mut rng);
        let (_, cache) = unit.forward_cached(&x)?;
        let mut grads = Gradients::zeros(collect_params(&unit).iter().copied());
        let dx = unit.backward(&cache, &g, &mut grads);
        let s = unit.scalars()?;
        let (ka, kw) = (unit.act_site.k.scalar(), unit.weight_site.k.scalar());
        let lat = unit.latent.value.data();
        let sgn = |v: f64| if v >= 0.0 { 1.0 } else { -1.0 };
        let mut want_dw = vec![0.0; c];
        for m in 0..c {
            for i in m * plane..(m + 1) * plane {
                let a = x.data()[i];
                let yb = sgn(a) * sgn(lat[m]);
                let dq_act = g.data()[i] * s.alpha * a.abs() * sgn(lat[m]);
                let want = g.data()[i] * (s.alpha * yb * sgn(a) + s.beta) + dq_act * deriv(ka, a);
                worst = worst.max((dx.data()[i] - want).abs());
                want_dw[m] += g.data()[i] * s.alpha * a.abs() * sgn(a);
            }
            want_dw[m] *= deriv(kw, lat[m]);
        }
        for (got, want) in grads.get(&unit.latent).iter().zip(&want_dw) {
            worst = worst.max((got - want).abs());
        }

        // Binary convolution layer; RPRReLU slope applied to the upstream.
        let mut layer = BinaryConvLayer::new(reg, "b", c, 3, init)?;
        perturb_params(&mut layer, &mut rng);
        let (_, cache) = layer.forward_cached(&x)?;
        let mut grads = Gradients::zeros(collect_params(&layer).iter().copied());
        let dx = layer.backward(&cache, &g, &mut grads)?;
        let wt = layer.latent.value.data();
        let scale = layer.output_scale();
        let conv = float_pm1_conv2d_oracle(&x.map(sgn), &layer.latent.value.map(sgn), &layer.spec)?.map(|v| v * scale);
        let (a_in, slope) = (layer.rprrelu.shift_in.value.data(), layer.rprrelu.neg_slope.value.data());
        let dconv: Vec<f64> = (0..c * plane)
            .map(|i| {
                let m = i / plane;
                scale * g.data()[i] * if conv.data()[i] > a_in[m] { 1.0 } else { slope[m] }
            })
            .collect();
        let (ka, kw) = (layer.act_site.k.scalar(), layer.weight_site.k.scalar());
        let mut dq_x = vec![0.0; c * plane];
        let mut dq_w = vec![0.0; wt.len()];
        for o in 0..c {
            for oy in 0..h {
                for ox in 0..w {
                    let go = dconv[(o * h + oy) * w + ox];
                    for ch in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = (ch * h + iy as usize) * w + ix as usize;
                                let wi = ((o * c + ch) * 3 + ky) * 3 + kx;
                                dq_x[xi] += go * sgn(wt[wi]);
                                dq_w[wi] += go * sgn(x.data()[xi]);
                            }
                        }
                    }
                }
            }
        }
        for i in 0..c * plane {
            let want = g.data()[i] + dq_x[i] * deriv(ka, x.data()[i]);
            worst = worst.max((dx.data()[i] - want).abs());
        }
        for (i, got) in grads.get(&layer.latent).iter().enumerate() {
            worst = worst.max((got - dq_w[i] * deriv(kw, wt[i])).abs());
        }
    }
    Ok(worst)
}

/// Worst relative error of `dysoftsign_grad` against central differences.
pub fn dysoftsign_fd_check() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in [0.001f64, 0.1, 1.0, 10.0, 100.0] {
        for i in -40..=40 {
            let x = i as f64 * 0.137 + 0.01;
            let h = 1e-6 / k.max(1.0);
            let num = (dysoftsign(x + h, k)? - dysoftsign(x - h, k)?) / (2.0 * h);
            let ana = dysoftsign_grad(x, k)?;
            worst = worst.max((num - ana).abs() / ana.abs().max(1e-12));
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Suites

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Xnor,
    DbConv,
    Grad,
    Quadrature,
    Accounting,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Xnor,
        Suite::DbConv,
        Suite::Grad,
        Suite::Quadrature,
        Suite::Accounting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Xnor => "xnor",
            Suite::DbConv => "dbconv",
            Suite::Grad => "grad",
            Suite::Quadrature => "quadrature",
            Suite::Accounting => "accounting",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown suite '{s}' (expected one of xnor, dbconv, grad, quadrature, accounting)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub passed: bool,
    /// Summary on success, first counterexample on failure.
    pub detail: String,
}

pub fn run_suite(suite: Suite) -> SuiteOutcome {
    let result = match suite {
        Suite::Xnor => xnor_suite(),
        Suite::DbConv => dbconv_suite(),
        Suite::Grad => grad_suite(),
        Suite::Quadrature => quadrature_suite(),
        Suite::Accounting => accounting_suite(),
    };
    let (passed, detail) = match result {
        Ok(Ok(summary)) => (true, summary),
        Ok(Err(counterexample)) => (false, counterexample),
        Err(e) => (false, format!("error: {e}")),
    };
    SuiteOutcome {
        suite,
        passed,
        detail,
    }
}

type SuiteResult = Result<std::result::Result<String, String>>;

/// Binarizes with its own comparison so a fault in the packed path shows up.
fn reference_sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn xnor_suite() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    // Integer-valued inputs make exact zeros common.
    let draw = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        FloatTensor::from_fn(shape, |_| rng.gen_range(-2i32..=2) as f64)
    };
    for case in 0..500 {
        let c = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=4);
        let k = if rng.gen() { 1 } else { 3 };
        let s = rng.gen_range(1..=2);
        let p = rng.gen_range(0..=1);
        let h = rng.gen_range(k..=9);
        let w = rng.gen_range(k..=9);
        let spec = ConvSpec::new(c, n, k, s, p)?;
        let a = draw(&mut rng, &[c, h, w]);
        let wt = draw(&mut rng, &[n, c, k, k]);
        let fast = binary_conv2d(&sign_quantize(&a)?, &sign_quantize(&wt)?, &spec)?;
        let slow = float_pm1_conv2d_oracle(&a.map(reference_sign), &wt.map(reference_sign), &spec)?;
        if let Some(i) = (0..fast.len()).find(|&i| fast.data()[i] != slow.data()[i]) {
            return Ok(Err(format!(
                "case {case}: c={c} n={n} k={k} s={s} p={p} h={h} w={w}: output[{i}] packed {} vs oracle {}",
                fast.data()[i],
                slow.data()[i]
            )));
        }
    }
    Ok(Ok("500 random configurations bit-exact".into()))
}

fn dbconv_suite() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdb);
    let mut worst: f64 = 0.0;
    for case in 0..500 {
        let c = rng.gen_range(1..=8);
        let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let a = FloatTensor::from_fn(&[c, h, w], |_| rng.gen_range(-3.0..3.0));
        let lw = FloatTensor::from_fn(&[c], |_| rng.gen_range(-2.0..2.0));
        let p = DbConvParams::new(lw)?;
        let fast = db_conv(&a, &p)?;
        let slow = db_conv_direct_oracle(&a, &p.dense_weight()?)?;
        for (x, y) in fast.data().iter().zip(slow.data()) {
            let rel = (x - y).abs() / y.abs().max(1e-12);
            worst = worst.max(rel.min((x - y).abs()));
            if rel > 1e-6 && (x - y).abs() > 1e-12 {
                return Ok(Err(format!("case {case}: decomposed {x} vs direct {y}")));
            }
        }
    }
    let (dense, packed) = (param_bits(ConvKind::AdaBinConv, 64, 64, 3)?, param_bits(ConvKind::DbConv, 64, 64, 3)?);
    if (dense, packed) != (40960, 128) {
        return Ok(Err(format!("parameter bits {dense} vs {packed}, expected 40960 vs 128")));
    }
    Ok(Ok(format!(
        "500 cases within 1e-6 (worst {worst:.2e}); parameter bits 40960/128 = 320"
    )))
}

fn grad_suite() -> SuiteResult {
    let mut worst_layer = (String::new(), 0.0f64);
    for (name, report) in smooth_mode_layer_checks(17, 3)? {
        let err = report.max_rel_error();
        if err > 1e-3 {
            let t = report.worst().expect("nonempty");
            return Ok(Err(format!(
                "{name}: tensor {} relative error {:.3e} > 1e-3",
                t.name, t.rel_error
            )));
        }
        if err >= worst_layer.1 {
            worst_layer = (name, err);
        }
    }
    let ste = normal_mode_ste_check(23, 20)?;
    if ste > 1e-7 {
        return Ok(Err(format!("normal-mode STE deviates by {ste:.3e} > 1e-7")));
    }
    let ds = dysoftsign_fd_check()?;
    if ds > 1e-4 {
        return Ok(Err(format!("dysoftsign_grad relative error {ds:.3e} > 1e-4")));
    }
    let mut model_err = 0.0;
    if let Some(msg) = model_grad_check(&mut model_err)? {
        return Ok(Err(msg));
    }
    Ok(Ok(format!(
        "layers worst {:.2e} ({}); model sampled {model_err:.2e}; STE closed form {ste:.1e}; dysoftsign {ds:.1e}",
        worst_layer.1, worst_layer.0
    )))
}

/// Samples parameters of a tiny full network in smooth mode and compares
/// their gradients with central differences.
fn model_grad_check(worst: &mut f64) -> Result<Option<String>> {
    let cfg = NetConfig {
        stage_channels: [2, 4, 8],
        encoder_blocks: [1, 1],
        bottleneck_blocks: 1,
        decoder_blocks: [1, 1],
        input_size: (8, 8),
        k_init: 1.0,
        seed: 5,
        ..NetConfig::default()
    };
    let mut model = Model::build(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    prepare_smooth(&mut model, &mut rng)?;
    let x = random_input(&mut rng, &[1, 8, 8]);
    let (y, tape) = model.forward_cached(&x)?;
    let r = FloatTensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0));
    let grads = model.backward(&tape, &r)?;
    let ids: Vec<(usize, String, usize)> = model
        .params()
        .iter()
        .map(|p| (p.id, p.name.clone(), p.value.len()))
        .collect();
    const STEP: f64 = 1e-5;
    for (id, name, len) in ids {
        let j = rng.gen_range(0..len);
        nudge(&mut model, id, j, STEP);
        let lp = weighted_sum(&model.forward(&x)?, &r);
        nudge(&mut model, id, j, -2.0 * STEP);
        let lm = weighted_sum(&model.forward(&x)?, &r);
        nudge(&mut model, id, j, STEP);
        let num = (lp - lm) / (2.0 * STEP);
        let ana = grads.by_id(id)[j];
        let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-4);
        *worst = worst.max(err);
        if err > 1e-3 {
            return Ok(Some(format!(
                "model parameter {name}[{j}]: analytic {ana:.6e} vs numeric {num:.6e}"
            )));
        }
    }
    Ok(None)
}

fn quadrature_suite() -> SuiteResult {
    let mut lines = Vec::new();
    for &k in &[0.1, 1.0, 10.0, 100.0] {
        let scaled = approx_error_sq(k, 10_000.0)? * k;
        if !(1.96..=2.04).contains(&scaled) {
            return Ok(Err(format!("k={k}: k·Err = {scaled:.6}, outside [1.96, 2.04]")));
        }
        lines.push(format!("k={k}: {scaled:.5}"));
    }
    Ok(Ok(format!("k·Err(k) {}", lines.join(", "))))
}

fn accounting_suite() -> SuiteResult {
    let mut reg = ParamRegistry::new(ChaCha8Rng::seed_from_u64(0));
    let init = SiteInit::default();
    let conv = BinaryConvLayer::new(&mut reg, "b", 16, 3, init)?;
    let c = conv.cost(32, 32);
    let want_bops = 2 * 16 * 16 * 9 * 32 * 32;
    if c.bops_b != want_bops || c.params_b != 16 * 16 * 9 {
        return Ok(Err(format!("binary conv cost {c:?}, expected bops {want_bops}")));
    }
    let fp = FpConv::new(&mut reg, "f", ConvSpec::same(1, 8, 3)?, 0.1, 0.0);
    let f = fp.cost(32, 32);
    let want_flops = 2 * 8 * 9 * 32 * 32 + 8 * 32 * 32;
    if f.flops_f != want_flops || f.params_f != 8 * 9 + 8 {
        return Ok(Err(format!("fp conv cost {f:?}, expected flops {want_flops}")));
    }
    let model = Model::build(&NetConfig::default())?;
    let report = model.account((512, 512))?;
    let (params, ops) = (report.params(), report.ops());
    if !(8e3..=12e3).contains(&params) || !(0.2e9..=0.5e9).contains(&ops) {
        return Ok(Err(format!(
            "default model at 512x512: Params {:.3}K, OPs {:.4}G outside [8K,12K] / [0.2G,0.5G]",
            params / 1e3,
            ops / 1e9
        )));
    }
    let quarter = model.account((256, 256))?;
    if quarter.total().bops_b * 4 != report.total().bops_b {
        return Ok(Err("binary ops do not scale with input area".into()));
    }
    Ok(Ok(format!(
        "layer oracles exact; default model {:.3}K params, {:.4}G OPs at 512x512",
        params / 1e3,
        ops / 1e9
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn every_suite_passes() {
        for s in Suite::ALL {
            let o = run_suite(s);
            assert!(o.passed, "{s}: {}", o.detail);
        }
    }

    #[test]
    fn rel_error_edge_cases() {
        assert_eq!(rel_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((rel_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // Scale the redistribution gradient by 2 via a mis-specified layer.
        struct Doubled(RedistributionParams);
        impl Parameterized for Doubled {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
                self.0.visit(f)
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
                self.0.visit_mut(f)
            }
            fn visit_sites_mut(&mut self, _f: &mut dyn FnMut(&mut SteSite)) {}
        }
        impl Differentiable for Doubled {
            type Cache = FloatTensor;
            fn eval(&self, x: &FloatTensor) -> Result<FloatTensor> {
                self.0.forward(x)
            }
            fn eval_cached(&self, x: &FloatTensor) -> Result<(FloatTensor, FloatTensor)> {
                Ok((self.0.forward(x)?, x.clone()))
            }
            fn grad(&self, x: &FloatTensor, g: &FloatTensor, grads: &mut Gradients) -> Result<FloatTensor> {
                Ok(self.0.backward(x, g, grads).map(|v| 2.0 * v))
            }
        }
        let mut reg = ParamRegistry::new(ChaCha8Rng::seed_from_u64(0));
        let mut layer = Doubled(RedistributionParams::new(&mut reg, "r", 2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_input(&mut rng, &[2, 3, 3]);
        let report = check_gradients(&mut layer, &x, 3, false).unwrap();
        assert!(report.tensors[0].rel_error > 0.3);
    }
}
