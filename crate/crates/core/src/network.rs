//! The 3-stage U-shaped network and its Params/OPs accounting.
//!
//! ```text
//! stem (fp 3×3, 1→c0)
//!   enc0 blocks ─────────────────────────────┐ skip0
//!   down0 → enc1 blocks ──────────────┐ skip1 │
//!   down1 → bottleneck blocks         │       │
//!   up1 → fuse1(skip1) → dec1 blocks ◄┘       │
//!   up0 → fuse0(skip0) → dec0 blocks ◄────────┘
//! head (fp 1×1, c0→1 logit)
//! ```

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binconv::ConvSpec;
use crate::bitcore::{FloatTensor, WORD_BITS};
use crate::error::{Error, Result};
use crate::grad::{Surrogate, K_INIT};
use crate::layers::{
    BinaryBlock, BinaryBlockCache, Cost, DbConvCache, DownSample, DownSampleCache, FpConv,
    FpConvCache, Fusion, Parameterized, SiteInit, SteSite, UpSample, UpSampleCache,
};
use crate::param::{Gradients, Param, ParamRegistry, ParamRole};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Channels at full, half and quarter resolution.
    pub stage_channels: [usize; 3],
    /// Binary Blocks at stage 0 and stage 1 of the encoder.
    pub encoder_blocks: [usize; 2],
    pub bottleneck_blocks: usize,
    /// Binary Blocks at stage 1 and stage 0 of the decoder, in execution order.
    pub decoder_blocks: [usize; 2],
    /// Training/evaluation input extents `(h, w)`.
    pub input_size: (usize, usize),
    pub surrogate: Surrogate,
    pub k_init: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64],
            encoder_blocks: [1, 1],
            bottleneck_blocks: 5,
            decoder_blocks: [1, 1],
            input_size: (64, 64),
            surrogate: Surrogate::DySoftSign,
            k_init: K_INIT,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let [c0, c1, c2] = self.stage_channels;
        if c0 == 0 || c1 != 2 * c0 || c2 != 2 * c1 {
            return Err(Error::Config(format!(
                "stage channels must double per stage, got {:?}",
                self.stage_channels
            )));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be positive and divisible by 4"
            )));
        }
        if !(self.k_init > 0.0) {
            return Err(Error::Config(format!("k_init must be > 0, got {}", self.k_init)));
        }
        Ok(())
    }

    /// Block counts as `[enc0, enc1, bottleneck, dec1, dec0]`.
    pub fn blocks(&self) -> [usize; 5] {
        [
            self.encoder_blocks[0],
            self.encoder_blocks[1],
            self.bottleneck_blocks,
            self.decoder_blocks[0],
            self.decoder_blocks[1],
        ]
    }

    pub fn set_blocks(&mut self, b: [usize; 5]) {
        self.encoder_blocks = [b[0], b[1]];
        self.bottleneck_blocks = b[2];
        self.decoder_blocks = [b[3], b[4]];
    }
}

/// The assembled network. Parameter ids follow execution order.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetConfig,
    pub stem: FpConv,
    pub enc0: Vec<BinaryBlock>,
    pub down0: DownSample,
    pub enc1: Vec<BinaryBlock>,
    pub down1: DownSample,
    pub bottleneck: Vec<BinaryBlock>,
    pub up1: UpSample,
    pub fuse1: Fusion,
    pub dec1: Vec<BinaryBlock>,
    pub up0: UpSample,
    pub fuse0: Fusion,
    pub dec0: Vec<BinaryBlock>,
    pub head: FpConv,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape {
    stem: FpConvCache,
    enc0: Vec<BinaryBlockCache>,
    down0: DownSampleCache,
    enc1: Vec<BinaryBlockCache>,
    down1: DownSampleCache,
    bottleneck: Vec<BinaryBlockCache>,
    up1: UpSampleCache,
    fuse1: DbConvCache,
    dec1: Vec<BinaryBlockCache>,
    up0: UpSampleCache,
    fuse0: DbConvCache,
    dec0: Vec<BinaryBlockCache>,
    head: FpConvCache,
}

fn blocks(
    reg: &mut ParamRegistry,
    prefix: &str,
    n: usize,
    c: usize,
    init: SiteInit,
) -> Result<Vec<BinaryBlock>> {
    (0..n)
        .map(|i| BinaryBlock::new(reg, &format!("{prefix}.{i}"), c, init))
        .collect()
}

fn run_blocks(blocks: &[BinaryBlock], mut x: FloatTensor, trace: &mut Trace<'_>, prefix: &str) -> Result<FloatTensor> {
    for (i, b) in blocks.iter().enumerate() {
        x = b.forward(&x)?;
        trace(&format!("{prefix}.{i}"), &x)?;
    }
    Ok(x)
}

fn run_blocks_cached(
    blocks: &[BinaryBlock],
    mut x: FloatTensor,
) -> Result<(FloatTensor, Vec<BinaryBlockCache>)> {
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (y, c) = b.forward_cached(&x)?;
        caches.push(c);
        x = y;
    }
    Ok((x, caches))
}

fn back_blocks(
    blocks: &[BinaryBlock],
    caches: &[BinaryBlockCache],
    mut g: FloatTensor,
    grads: &mut Gradients,
) -> Result<FloatTensor> {
    for (b, c) in blocks.iter().zip(caches).rev() {
        g = b.backward(c, &g, grads)?;
    }
    Ok(g)
}

type Trace<'a> = dyn FnMut(&str, &FloatTensor) -> Result<()> + 'a;

impl Model {
    /// Builds the network with deterministic initialization from `cfg.seed`.
    pub fn build(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let [c0, c1, c2] = cfg.stage_channels;
        let init = SiteInit {
            surrogate: cfg.surrogate,
            k_init: cfg.k_init,
        };
        let reg = &mut ParamRegistry::new(ChaCha8Rng::seed_from_u64(cfg.seed));

        let stem_spec = ConvSpec::same(1, c0, 3)?;
        let stem = FpConv::new(reg, "stem", stem_spec, (6.0f64 / 9.0).sqrt(), 0.0);
        let enc0 = blocks(reg, "enc0", cfg.encoder_blocks[0], c0, init)?;
        let down0 = DownSample::new(reg, "down0", c0, init);
        let enc1 = blocks(reg, "enc1", cfg.encoder_blocks[1], c1, init)?;
        let down1 = DownSample::new(reg, "down1", c1, init);
        let bottleneck = blocks(reg, "bottleneck", cfg.bottleneck_blocks, c2, init)?;
        let up1 = UpSample::new(reg, "up1", c2, init)?;
        let fuse1 = Fusion::new(reg, "fuse1", c1, init);
        let dec1 = blocks(reg, "dec1", cfg.decoder_blocks[0], c1, init)?;
        let up0 = UpSample::new(reg, "up0", c1, init)?;
        let fuse0 = Fusion::new(reg, "fuse0", c0, init);
        let dec0 = blocks(reg, "dec0", cfg.decoder_blocks[1], c0, init)?;
        // A negative bias starts predictions near the (rare) target prior.
        let head_spec = ConvSpec::same(c0, 1, 1)?;
        let head = FpConv::new(reg, "head", head_spec, 0.1 / (c0 as f64).sqrt(), -3.0);

        Ok(Self {
            config: cfg.clone(),
            stem,
            enc0,
            down0,
            enc1,
            down1,
            bottleneck,
            up1,
            fuse1,
            dec1,
            up0,
            fuse0,
            dec0,
            head,
        })
    }

    fn check_image(&self, image: &FloatTensor) -> Result<()> {
        let (c, h, w) = image.chw()?;
        if c != 1 || h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Dimension(format!(
                "expected a [1, h, w] image with h, w divisible by 4, got {:?}",
                image.shape()
            )));
        }
        image.ensure_finite("input image")
    }

    fn run(&self, image: &FloatTensor, trace: &mut Trace<'_>) -> Result<FloatTensor> {
        self.check_image(image)?;
        let x = self.stem.forward(image)?;
        trace("stem", &x)?;
        let skip0 = run_blocks(&self.enc0, x, trace, "enc0")?;
        let x = self.down0.forward(&skip0)?;
        trace("down0", &x)?;
        let skip1 = run_blocks(&self.enc1, x, trace, "enc1")?;
        let x = self.down1.forward(&skip1)?;
        trace("down1", &x)?;
        let x = run_blocks(&self.bottleneck, x, trace, "bottleneck")?;
        let u = self.up1.forward(&x)?;
        trace("up1", &u)?;
        let x = self.fuse1.forward(&skip1, &u)?;
        trace("fuse1", &x)?;
        let x = run_blocks(&self.dec1, x, trace, "dec1")?;
        let u = self.up0.forward(&x)?;
        trace("up0", &u)?;
        let x = self.fuse0.forward(&skip0, &u)?;
        trace("fuse0", &x)?;
        let x = run_blocks(&self.dec0, x, trace, "dec0")?;
        let y = self.head.forward(&x)?;
        trace("head", &y)?;
        Ok(y)
    }

    /// Logit map `[1, h, w]`; callers apply the sigmoid.
    pub fn forward(&self, image: &FloatTensor) -> Result<FloatTensor> {
        self.run(image, &mut |_, _| Ok(()))
    }

    /// Name of the first layer whose output contains a non-finite value.
    pub fn first_non_finite_layer(&self, image: &FloatTensor) -> Option<String> {
        let mut found = None;
        let result = self.run(image, &mut |name, t| {
            if t.is_finite() {
                Ok(())
            } else {
                found = Some(name.to_string());
                Err(Error::NonFinite {
                    layer: name.to_string(),
                    detail: "output".into(),
                })
            }
        });
        match (found, result) {
            (Some(name), _) => Some(name),
            (None, Err(e)) => Some(format!("input ({e})")),
            (None, Ok(_)) => None,
        }
    }

    pub fn forward_cached(&self, image: &FloatTensor) -> Result<(FloatTensor, Tape)> {
        self.check_image(image)?;
        let (x, stem) = self.stem.forward_cached(image)?;
        let (skip0, enc0) = run_blocks_cached(&self.enc0, x)?;
        let (x, down0) = self.down0.forward_cached(&skip0)?;
        let (skip1, enc1) = run_blocks_cached(&self.enc1, x)?;
        let (x, down1) = self.down1.forward_cached(&skip1)?;
        let (x, bottleneck) = run_blocks_cached(&self.bottleneck, x)?;
        let (u, up1) = self.up1.forward_cached(&x)?;
        let (x, fuse1) = self.fuse1.forward_cached(&skip1, &u)?;
        let (x, dec1) = run_blocks_cached(&self.dec1, x)?;
        let (u, up0) = self.up0.forward_cached(&x)?;
        let (x, fuse0) = self.fuse0.forward_cached(&skip0, &u)?;
        let (x, dec0) = run_blocks_cached(&self.dec0, x)?;
        let (y, head) = self.head.forward_cached(&x)?;
        Ok((
            y,
            Tape {
                stem,
                enc0,
                down0,
                enc1,
                down1,
                bottleneck,
                up1,
                fuse1,
                dec1,
                up0,
                fuse0,
                dec0,
                head,
            },
        ))
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients::zeros(self.params())
    }

    /// Gradients of all parameters given `∂L/∂logits`.
    pub fn backward(&self, tape: &Tape, dlogits: &FloatTensor) -> Result<Gradients> {
        let mut grads = self.zero_grads();
        let g = &mut grads;
        let x = self.head.backward(&tape.head, dlogits, g)?;
        let x = back_blocks(&self.dec0, &tape.dec0, x, g)?;
        let shared0 = self.fuse0.backward(&tape.fuse0, &x, g);
        let x = self.up0.backward(&tape.up0, &shared0, g)?;
        let x = back_blocks(&self.dec1, &tape.dec1, x, g)?;
        let shared1 = self.fuse1.backward(&tape.fuse1, &x, g);
        let x = self.up1.backward(&tape.up1, &shared1, g)?;
        let x = back_blocks(&self.bottleneck, &tape.bottleneck, x, g)?;
        let mut x = self.down1.backward(&tape.down1, &x, g)?;
        x.add_assign(&shared1);
        let x = back_blocks(&self.enc1, &tape.enc1, x, g)?;
        let mut x = self.down0.backward(&tape.down0, &x, g)?;
        x.add_assign(&shared0);
        let x = back_blocks(&self.enc0, &tape.enc0, x, g)?;
        self.stem.backward(&tape.stem, &x, g)?;
        Ok(grads)
    }

    /// Parameters in id order.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out.sort_by_key(|p| p.id);
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|p| p.name.clone()).collect()
    }

    /// Parameter values in id order.
    pub fn snapshot(&self) -> Vec<FloatTensor> {
        self.params().into_iter().map(|p| p.value.clone()).collect()
    }

    /// Restores values captured by [`Model::snapshot`].
    pub fn restore(&mut self, values: &[FloatTensor]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::ArchitectureMismatch(format!(
                "{} tensors for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        if let Some(p) = self.params().iter().find(|p| p.value.shape() != values[p.id].shape()) {
            return Err(Error::ArchitectureMismatch(format!(
                "{}: shape {:?} vs {:?}",
                p.name,
                p.value.shape(),
                values[p.id].shape()
            )));
        }
        self.visit_mut(&mut |p| p.value = values[p.id].clone());
        Ok(())
    }

    /// Switches every Sign site into (or out of) the test-only smooth mode.
    pub fn set_smooth_test_mode(&mut self, on: bool) {
        self.visit_sites_mut(&mut |s| s.smooth_test_mode = on);
    }

    /// Sharpness of every Sign site, in id order.
    pub fn sharpness(&self) -> Vec<(String, f64)> {
        self.params()
            .into_iter()
            .filter(|p| p.role == ParamRole::Sharpness)
            .map(|p| (p.name.clone(), p.scalar()))
            .collect()
    }

    /// Inference cost at `(h, w)`, itemized per layer.
    pub fn account(&self, input_size: (usize, usize)) -> Result<AccountingReport> {
        let (h, w) = input_size;
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Dimension(format!(
                "accounting input {h}x{w} must be divisible by 4"
            )));
        }
        let mut rows = Vec::new();
        let mut push = |name: String, cost: Cost| rows.push(LayerAccount { name, cost });
        let block_rows = |push: &mut dyn FnMut(String, Cost), prefix: &str, bs: &[BinaryBlock], h: usize, w: usize| {
            for (i, b) in bs.iter().enumerate() {
                push(format!("{prefix}.{i}.bconv"), b.conv.cost(h, w));
                push(
                    format!("{prefix}.{i}.redist"),
                    Cost {
                        params_f: 2 * b.channels() as u64,
                        ..Cost::default()
                    },
                );
                push(format!("{prefix}.{i}.dbconv"), b.db.cost(h, w));
            }
        };
        let (h1, w1, h2, w2) = (h / 2, w / 2, h / 4, w / 4);
        push("stem".into(), self.stem.cost(h, w));
        block_rows(&mut push, "enc0", &self.enc0, h, w);
        push("down0".into(), self.down0.cost(h, w));
        block_rows(&mut push, "enc1", &self.enc1, h1, w1);
        push("down1".into(), self.down1.cost(h1, w1));
        block_rows(&mut push, "bottleneck", &self.bottleneck, h2, w2);
        push("up1".into(), self.up1.cost(h2, w2));
        push("fuse1".into(), self.fuse1.cost(h1, w1));
        block_rows(&mut push, "dec1", &self.dec1, h1, w1);
        push("up0".into(), self.up0.cost(h1, w1));
        push("fuse0".into(), self.fuse0.cost(h, w));
        block_rows(&mut push, "dec0", &self.dec0, h, w);
        push("head".into(), self.head.cost(h, w));
        Ok(AccountingReport {
            input_size,
            rows,
        })
    }
}

impl Parameterized for Model {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.stem.visit(f);
        self.enc0.iter().for_each(|b| b.visit(f));
        self.down0.visit(f);
        self.enc1.iter().for_each(|b| b.visit(f));
        self.down1.visit(f);
        self.bottleneck.iter().for_each(|b| b.visit(f));
        self.up1.visit(f);
        self.fuse1.visit(f);
        self.dec1.iter().for_each(|b| b.visit(f));
        self.up0.visit(f);
        self.fuse0.visit(f);
        self.dec0.iter().for_each(|b| b.visit(f));
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_mut(f);
        self.enc0.iter_mut().for_each(|b| b.visit_mut(f));
        self.down0.visit_mut(f);
        self.enc1.iter_mut().for_each(|b| b.visit_mut(f));
        self.down1.visit_mut(f);
        self.bottleneck.iter_mut().for_each(|b| b.visit_mut(f));
        self.up1.visit_mut(f);
        self.fuse1.visit_mut(f);
        self.dec1.iter_mut().for_each(|b| b.visit_mut(f));
        self.up0.visit_mut(f);
        self.fuse0.visit_mut(f);
        self.dec0.iter_mut().for_each(|b| b.visit_mut(f));
        self.head.visit_mut(f);
    }

    fn visit_sites_mut(&mut self, f: &mut dyn FnMut(&mut SteSite)) {
        self.enc0.iter_mut().for_each(|b| b.visit_sites_mut(f));
        self.down0.visit_sites_mut(f);
        self.enc1.iter_mut().for_each(|b| b.visit_sites_mut(f));
        self.down1.visit_sites_mut(f);
        self.bottleneck.iter_mut().for_each(|b| b.visit_sites_mut(f));
        self.up1.visit_sites_mut(f);
        self.fuse1.visit_sites_mut(f);
        self.dec1.iter_mut().for_each(|b| b.visit_sites_mut(f));
        self.up0.visit_sites_mut(f);
        self.fuse0.visit_sites_mut(f);
        self.dec0.iter_mut().for_each(|b| b.visit_sites_mut(f));
    }

    fn visit_db_mut(&mut self, f: &mut dyn FnMut(&mut crate::layers::DbConvUnit)) {
        self.enc0.iter_mut().for_each(|b| b.visit_db_mut(f));
        self.down0.visit_db_mut(f);
        self.enc1.iter_mut().for_each(|b| b.visit_db_mut(f));
        self.down1.visit_db_mut(f);
        self.bottleneck.iter_mut().for_each(|b| b.visit_db_mut(f));
        self.up1.visit_db_mut(f);
        self.fuse1.visit_db_mut(f);
        self.dec1.iter_mut().for_each(|b| b.visit_db_mut(f));
        self.up0.visit_db_mut(f);
        self.fuse0.visit_db_mut(f);
        self.dec0.iter_mut().for_each(|b| b.visit_db_mut(f));
    }
}

pub fn build(cfg: &NetConfig) -> Result<Model> {
    Model::build(cfg)
}

pub fn forward(model: &Model, image: &FloatTensor) -> Result<FloatTensor> {
    model.forward(image)
}

pub fn account(model: &Model, input_size: (usize, usize)) -> Result<AccountingReport> {
    model.account(input_size)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAccount {
    pub name: String,
    pub cost: Cost,
}

/// Divisor turning binary parameters into full-precision equivalents.
pub const PARAM_BITS_DIVISOR: u64 = 32;
/// Divisor turning binary operations into full-precision equivalents.
pub const OPS_BITS_DIVISOR: u64 = 64;

/// Per-layer and total inference cost.
///
/// `Params = params_f + params_b / 32` and `OPs = flops_f + bops_b / 64`.
#[derive(Clone, Debug, PartialEq)]
pub struct AccountingReport {
    pub input_size: (usize, usize),
    pub rows: Vec<LayerAccount>,
}

impl AccountingReport {
    pub fn total(&self) -> Cost {
        self.rows.iter().fold(Cost::default(), |acc, r| acc + r.cost)
    }

    pub fn params(&self) -> f64 {
        let t = self.total();
        t.params_f as f64 + t.params_b as f64 / PARAM_BITS_DIVISOR as f64
    }

    pub fn ops(&self) -> f64 {
        let t = self.total();
        t.flops_f as f64 + t.bops_b as f64 / OPS_BITS_DIVISOR as f64
    }

    /// Storage of the binary weights when packed, in bytes.
    pub fn binary_weight_bytes(&self) -> u64 {
        self.total().params_b.div_ceil(8)
    }

    /// Storage of the same weights as 32-bit floats, in bytes.
    pub fn binary_weight_float_bytes(&self) -> u64 {
        4 * self.total().params_b
    }

    pub fn header(&self) -> String {
        format!(
            "# accounting at {}x{}: Params = params_f + params_b/{PARAM_BITS_DIVISOR}; \
             OPs = flops_f + bops_b/{OPS_BITS_DIVISOR}; 2 flops per real MAC, 2 bops per \
             XNOR-accumulate; elementwise activations, residual adds and resampling not counted; \
             word size {WORD_BITS} bits",
            self.input_size.0, self.input_size.1
        )
    }

    pub fn to_table(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        let _ = writeln!(
            s,
            "{:<22} {:>10} {:>10} {:>16} {:>16}",
            "layer", "params_f", "params_b", "flops_f", "bops_b"
        );
        for r in &self.rows {
            let c = r.cost;
            let _ = writeln!(
                s,
                "{:<22} {:>10} {:>10} {:>16} {:>16}",
                r.name, c.params_f, c.params_b, c.flops_f, c.bops_b
            );
        }
        let t = self.total();
        let _ = writeln!(
            s,
            "{:<22} {:>10} {:>10} {:>16} {:>16}",
            "total", t.params_f, t.params_b, t.flops_f, t.bops_b
        );
        let _ = writeln!(
            s,
            "Params {:.3} K (fp {} + binary {}/{PARAM_BITS_DIVISOR}) | OPs {:.4} G (fp {:.4} G + binary {:.4} G/{OPS_BITS_DIVISOR})",
            self.params() / 1e3,
            t.params_f,
            t.params_b,
            self.ops() / 1e9,
            t.flops_f as f64 / 1e9,
            t.bops_b as f64 / 1e9,
        );
        s
    }

    pub fn to_key_values(&self) -> String {
        let t = self.total();
        let mut s = String::new();
        let _ = writeln!(s, "accounting.input = {}x{}", self.input_size.0, self.input_size.1);
        let _ = writeln!(s, "accounting.word_bits = {WORD_BITS}");
        let _ = writeln!(s, "accounting.params_f = {}", t.params_f);
        let _ = writeln!(s, "accounting.params_b = {}", t.params_b);
        let _ = writeln!(s, "accounting.flops_f = {}", t.flops_f);
        let _ = writeln!(s, "accounting.bops_b = {}", t.bops_b);
        let _ = writeln!(s, "accounting.params_k = {:.6}", self.params() / 1e3);
        let _ = writeln!(s, "accounting.ops_g = {:.6}", self.ops() / 1e9);
        let _ = writeln!(s, "accounting.binary_weight_bytes = {}", self.binary_weight_bytes());
        let _ = writeln!(
            s,
            "accounting.binary_weight_float_bytes = {}",
            self.binary_weight_float_bytes()
        );
        for r in &self.rows {
            let c = r.cost;
            let _ = writeln!(
                s,
                "layer.{} = params_f:{} params_b:{} flops_f:{} bops_b:{}",
                r.name, c.params_f, c.params_b, c.flops_f, c.bops_b
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamRegistry;

    fn small() -> NetConfig {
        NetConfig {
            stage_channels: [4, 8, 16],
            encoder_blocks: [1, 1],
            bottleneck_blocks: 1,
            decoder_blocks: [1, 1],
            input_size: (16, 16),
            ..NetConfig::default()
        }
    }

    #[test]
    fn default_builds_and_runs() {
        let m = Model::build(&NetConfig::default()).unwrap();
        let y = m.forward(&FloatTensor::zeros(&[1, 64, 64])).unwrap();
        assert_eq!(y.shape(), &[1, 64, 64]);
        assert!(y.is_finite());
    }

    #[test]
    fn shapes_across_sizes() {
        let m = Model::build(&small()).unwrap();
        for s in [64, 128, 256] {
            let y = m.forward(&FloatTensor::full(&[1, s, s], 0.3)).unwrap();
            assert_eq!(y.shape(), &[1, s, s]);
        }
        assert!(matches!(
            m.forward(&FloatTensor::zeros(&[1, 18, 16])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::build(&NetConfig::default()).unwrap();
        let b = Model::build(&NetConfig::default()).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
        let c = Model::build(&NetConfig {
            seed: 9,
            ..NetConfig::default()
        })
        .unwrap();
        assert_ne!(a.params()[0].value, c.params()[0].value);
    }

    #[test]
    fn parameter_names_match_manifest() {
        let m = Model::build(&NetConfig::default()).unwrap();
        let manifest = include_str!("../tests/fixtures/param_manifest.txt");
        let want: Vec<&str> = manifest.lines().filter(|l| !l.is_empty()).collect();
        assert_eq!(m.param_names(), want);
        let mut ids: Vec<usize> = m.params().iter().map(|p| p.id).collect();
        ids.dedup();
        assert_eq!(ids, (0..m.param_count()).collect::<Vec<_>>());
    }

    #[test]
    fn constant_input_gives_constant_interior() {
        let m = Model::build(&small()).unwrap();
        let y = m.forward(&FloatTensor::full(&[1, 64, 64], 0.4)).unwrap();
        // Each stage's 3×3 kernels widen the padding halo; stay well inside.
        let halo = 16;
        let mut vals = Vec::new();
        for r in halo..64 - halo {
            for c in halo..64 - halo {
                vals.push(y.data()[r * 64 + c]);
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(var < 1e-6, "interior variance {var}");
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Model::build(&small()).unwrap();
        let img = FloatTensor::from_fn(&[1, 32, 32], |i| ((i * 37) % 11) as f64 / 11.0);
        assert_eq!(m.forward(&img).unwrap(), m.forward(&img).unwrap());
        let (y, _) = m.forward_cached(&img).unwrap();
        assert_eq!(y, m.forward(&img).unwrap());
    }

    #[test]
    fn single_fp_conv_cost() {
        let mut reg = ParamRegistry::new(ChaCha8Rng::seed_from_u64(0));
        let conv = FpConv::new(&mut reg, "c", ConvSpec::same(1, 8, 1).unwrap(), 0.1, 0.0);
        let cost = conv.cost(64, 64);
        // Without the bias: 8 weights and 2·8·64·64 flops.
        assert_eq!(cost.params_f - 8, 8);
        assert_eq!(cost.flops_f - 8 * 64 * 64, 65536);
    }

    #[test]
    fn single_db_conv_cost() {
        let mut reg = ParamRegistry::new(ChaCha8Rng::seed_from_u64(0));
        let unit = crate::layers::DbConvUnit::new(&mut reg, "d", 64, SiteInit::default());
        let c = unit.cost(8, 8);
        assert_eq!((c.params_f, c.params_b), (2, 64));
        assert_eq!(c.params_f as f64 + c.params_b as f64 / 32.0, 4.0);
    }

    #[test]
    fn accounting_is_additive_and_linear_in_area() {
        let m = Model::build(&NetConfig::default()).unwrap();
        let a = m.account((64, 64)).unwrap();
        let sum = a.rows.iter().fold(Cost::default(), |acc, r| acc + r.cost);
        assert_eq!(sum, a.total());
        let b = m.account((64, 128)).unwrap();
        assert_eq!(b.total().bops_b, 2 * a.total().bops_b);
        assert_eq!(b.total().flops_f, 2 * a.total().flops_f);
        assert_eq!(b.total().params_f, a.total().params_f);
    }

    #[test]
    fn removing_a_block_reduces_cost() {
        let full = Model::build(&NetConfig::default()).unwrap().account((512, 512)).unwrap();
        let mut cfg = NetConfig::default();
        cfg.bottleneck_blocks -= 1;
        let less = Model::build(&cfg).unwrap().account((512, 512)).unwrap();
        assert!(less.params() < full.params());
        assert!(less.ops() < full.ops());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = NetConfig::default();
        cfg.stage_channels = [8, 8, 16];
        assert!(matches!(Model::build(&cfg), Err(Error::Config(_))));
        let mut cfg = NetConfig::default();
        cfg.input_size = (30, 32);
        assert!(Model::build(&cfg).is_err());
    }
}
