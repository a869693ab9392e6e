//! Synthetic infrared scenes, binary PGM I/O and the train/validation dataset.
//!
//! A scene is a pure function of `(seed, index)`: the generator is a ChaCha8
//! stream keyed by the seed with the scene index as the stream id.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitcore::FloatTensor;
use crate::error::{Error, Result};

/// Scene generator settings. Ranges are inclusive `(low, high)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub size: (usize, usize),
    pub targets: (usize, usize),
    pub sigma: (f64, f64),
    pub contrast: (f64, f64),
    /// Radius of the box filter applied (twice) to the clutter noise.
    pub clutter_radius: usize,
    pub clutter_amplitude: f64,
    /// Peak-to-peak amplitude of the linear background ramp.
    pub ramp_amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: (64, 64),
            targets: (1, 4),
            sigma: (0.6, 2.5),
            contrast: (0.3, 1.0),
            clutter_radius: 3,
            clutter_amplitude: 0.15,
            ramp_amplitude: 0.1,
            noise_std: 0.02,
            seed: 1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let (h, w) = self.size;
        if h < 16 || w < 16 {
            return bad(format!("scene size {h}x{w} must be at least 16x16"));
        }
        if self.targets.0 == 0 || self.targets.0 > self.targets.1 {
            return bad(format!("target count range {:?} must be nonempty and start at >= 1", self.targets));
        }
        for (name, (lo, hi)) in [("sigma", self.sigma), ("contrast", self.contrast)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} range ({lo}, {hi}) must be positive and nonempty"));
            }
        }
        for (name, v) in [
            ("clutter amplitude", self.clutter_amplitude),
            ("ramp amplitude", self.ramp_amplitude),
            ("noise std", self.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    /// Border kept free of target centers.
    fn margin(&self) -> usize {
        (3.0 * self.sigma.1).ceil() as usize + 1
    }
}

/// One Gaussian target; coordinates are `(row, column)` of pixel centers.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub center: (f64, f64),
    pub sigma: f64,
    pub contrast: f64,
}

/// A binary `h × w` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::Dimension(format!(
                "mask {h}x{w} needs {} values, got {}",
                h * w,
                bits.len()
            )));
        }
        Ok(Self { h, w, bits })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    /// Pixels of `t` strictly above `threshold`.
    pub fn from_threshold(t: &FloatTensor, threshold: f64) -> Result<Self> {
        let (h, w) = plane_extents(t)?;
        Ok(Self {
            h,
            w,
            bits: t.data().iter().map(|&v| v > threshold).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.w + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `[1, h, w]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> FloatTensor {
        FloatTensor::new(
            &[1, self.h, self.w],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("extents match")
    }

    /// Mirror image across the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut bits = Vec::with_capacity(self.bits.len());
        for r in 0..self.h {
            bits.extend(self.bits[r * self.w..(r + 1) * self.w].iter().rev());
        }
        Self { bits, ..*self }
    }
}

/// `(h, w)` of a `[h, w]` or `[1, h, w]` tensor.
pub(crate) fn plane_extents(t: &FloatTensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        _ => Err(Error::Dimension(format!(
            "expected a [h, w] or [1, h, w] plane, got {:?}",
            t.shape()
        ))),
    }
}

/// Mirror image of a `[1, h, w]` plane across the vertical axis.
pub fn flip_horizontal(t: &FloatTensor) -> Result<FloatTensor> {
    let (h, w) = plane_extents(t)?;
    let d = t.data();
    FloatTensor::new(t.shape(), (0..h * w).map(|i| d[(i / w) * w + (w - 1 - i % w)]).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: FloatTensor,
    pub mask: Mask,
    pub targets: Vec<Target>,
}

fn box_blur(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            let s: f64 = src[y * w + lo..=y * w + hi].iter().sum();
            tmp[y * w + x] = s / (hi - lo + 1) as f64;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            let s: f64 = (lo..=hi).map(|yy| tmp[yy * w + x]).sum();
            out[y * w + x] = s / (hi - lo + 1) as f64;
        }
    }
    out
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn background(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = cfg.size;
    let noise: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = cfg.clutter_radius;
    let mut clutter = if r > 0 { box_blur(&box_blur(&noise, h, w, r), h, w, r) } else { noise };
    let peak = clutter.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    clutter.iter_mut().for_each(|v| *v *= cfg.clutter_amplitude / peak);

    let base: f64 = rng.gen_range(0.15..0.35);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (theta.sin(), theta.cos());
    let span = (h.max(w)) as f64;
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let ramp = cfg.ramp_amplitude * ((y - h as f64 / 2.0) * dy + (x - w as f64 / 2.0) * dx) / span;
            base + ramp + clutter[i]
        })
        .collect()
}

fn place_targets(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Target> {
    let (h, w) = cfg.size;
    let m = cfg.margin();
    let wanted = rng.gen_range(cfg.targets.0..=cfg.targets.1);
    let mut targets: Vec<Target> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while targets.len() < wanted && attempts < 200 {
        attempts += 1;
        let sigma = rng.gen_range(cfg.sigma.0..=cfg.sigma.1);
        let contrast = rng.gen_range(cfg.contrast.0..=cfg.contrast.1);
        // Centers sit within a quarter pixel of a pixel center, so the peak
        // pixel is always above half of the target's peak.
        let cy = rng.gen_range(m..h - m) as f64 + rng.gen_range(-0.25..=0.25);
        let cx = rng.gen_range(m..w - m) as f64 + rng.gen_range(-0.25..=0.25);
        let clear = targets.iter().all(|t| {
            let d = ((t.center.0 - cy).powi(2) + (t.center.1 - cx).powi(2)).sqrt();
            d > 3.0 * (t.sigma + sigma) + 2.0
        });
        if clear {
            targets.push(Target {
                center: (cy, cx),
                sigma,
                contrast,
            });
        }
    }
    targets
}

/// Scene `index` of the stream keyed by `cfg.seed`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<Scene> {
    cfg.validate()?;
    let (h, w) = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    let mut pixels = background(cfg, &mut rng);
    let targets = place_targets(cfg, &mut rng);
    let mut mask = Mask::empty(h, w);
    for t in &targets {
        let reach = (3.0 * t.sigma).ceil() as isize + 1;
        let (ry, rx) = (t.center.0.round() as isize, t.center.1.round() as isize);
        for y in (ry - reach).max(0)..=(ry + reach).min(h as isize - 1) {
            for x in (rx - reach).max(0)..=(rx + reach).min(w as isize - 1) {
                let d2 = (y as f64 - t.center.0).powi(2) + (x as f64 - t.center.1).powi(2);
                let g = (-d2 / (2.0 * t.sigma * t.sigma)).exp();
                let i = y as usize * w + x as usize;
                pixels[i] += t.contrast * g;
                if g > 0.5 {
                    mask.bits[i] = true;
                }
            }
        }
    }
    for v in pixels.iter_mut() {
        *v = (*v + cfg.noise_std * gaussian(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(Scene {
        image: FloatTensor::new(&[1, h, w], pixels)?,
        mask,
        targets,
    })
}

// ---------------------------------------------------------------------------
// PGM

/// Sample depth of a written graymap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgmDepth {
    Eight,
    Sixteen,
}

impl PgmDepth {
    fn maxval(self) -> u32 {
        match self {
            PgmDepth::Eight => 255,
            PgmDepth::Sixteen => 65535,
        }
    }
}

/// Encodes a plane with values in `[0, 1]` as a binary (P5) graymap.
pub fn encode_pgm(t: &FloatTensor, depth: PgmDepth) -> Result<Vec<u8>> {
    let (h, w) = plane_extents(t)?;
    t.ensure_finite("PGM image")?;
    let maxval = depth.maxval();
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in t.data() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        match depth {
            PgmDepth::Eight => out.push(q as u8),
            PgmDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    Ok(out)
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Decodes a binary graymap to a `[1, h, w]` plane scaled to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<FloatTensor> {
    let mut r = HeaderReader { bytes, pos: 0 };
    if bytes.get(..2) != Some(b"P5") {
        return Err(r.err("not a binary graymap (magic P5 expected)"));
    }
    r.pos = 2;
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(r.err("expected whitespace after magic"));
    }
    let w = r.number("width")? as usize;
    let h = r.number("height")? as usize;
    let maxval = r.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(r.err("zero image extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(r.err(format!("maxval {maxval} outside 1..=65535")));
    }
    if !bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(r.err("expected a single whitespace before the raster"));
    }
    r.pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = w * h * bps;
    let raster = &bytes[r.pos..];
    if raster.len() < need {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("truncated raster: expected {need} bytes, found {}", raster.len()),
        });
    }
    let scale = 1.0 / maxval as f64;
    let data = (0..w * h)
        .map(|i| {
            let v = if bps == 1 {
                raster[i] as u32
            } else {
                u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as u32
            };
            v.min(maxval) as f64 * scale
        })
        .collect();
    FloatTensor::new(&[1, h, w], data)
}

pub fn save_pgm(path: &Path, t: &FloatTensor, depth: PgmDepth) -> Result<()> {
    fs::write(path, encode_pgm(t, depth)?).map_err(|e| Error::io(path, e))
}

pub fn load_pgm(path: &Path) -> Result<FloatTensor> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Masks are stored as 8-bit `{0, 255}`.
pub fn save_mask_pgm(path: &Path, m: &Mask) -> Result<()> {
    save_pgm(path, &m.to_tensor(), PgmDepth::Eight)
}

/// Any sample above half of full scale is foreground.
pub fn load_mask_pgm(path: &Path) -> Result<Mask> {
    Mask::from_threshold(&load_pgm(path)?, 0.5)
}

// ---------------------------------------------------------------------------
// Dataset

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: FloatTensor,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    /// Scenes `0..train_count` for training and the next `val_count` for
    /// validation.
    pub fn synthetic(cfg: &SceneConfig, train_count: usize, val_count: usize) -> Result<Self> {
        let make = |range: std::ops::Range<usize>| -> Result<Vec<Sample>> {
            range
                .map(|i| {
                    let s = generate_scene(cfg, i as u64)?;
                    Ok(Sample {
                        image: s.image,
                        mask: s.mask,
                    })
                })
                .collect()
        };
        Ok(Self {
            train: make(0..train_count)?,
            val: make(train_count..train_count + val_count)?,
        })
    }

    /// Reads `images/*.pgm` with same-named `masks/*.pgm`, sorted by name; the
    /// last `val_count` pairs form the validation split.
    pub fn from_dir(dir: &Path, val_count: usize) -> Result<Self> {
        let images = dir.join("images");
        let masks = dir.join("masks");
        let mut names: Vec<PathBuf> = fs::read_dir(&images)
            .map_err(|e| Error::io(&images, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
            .collect();
        names.sort();
        if names.len() <= val_count {
            return Err(Error::InvalidInput(format!(
                "{} holds {} images, need more than {val_count} (validation count)",
                images.display(),
                names.len()
            )));
        }
        let mut samples = Vec::with_capacity(names.len());
        for p in names {
            let image = load_pgm(&p)?;
            let mask_path = masks.join(p.file_name().expect("file entry"));
            let mask = load_mask_pgm(&mask_path)?;
            let (h, w) = plane_extents(&image)?;
            if (mask.height(), mask.width()) != (h, w) {
                return Err(Error::Dimension(format!(
                    "{} is {}x{} but its image is {h}x{w}",
                    mask_path.display(),
                    mask.height(),
                    mask.width()
                )));
            }
            samples.push(Sample { image, mask });
        }
        let val = samples.split_off(samples.len() - val_count);
        Ok(Self {
            train: samples,
            val,
        })
    }

    /// Writes every sample (training then validation) as `NNNN.pgm` pairs.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let (images, masks) = (dir.join("images"), dir.join("masks"));
        for d in [&images, &masks] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for (i, s) in self.train.iter().chain(&self.val).enumerate() {
            let name = format!("{i:04}.pgm");
            save_pgm(&images.join(&name), &s.image, PgmDepth::Sixteen)?;
            save_mask_pgm(&masks.join(&name), &s.mask)?;
        }
        Ok(())
    }
}
