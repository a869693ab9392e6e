//! Bit-exact checkpoint format.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "BIIS" version count record*
//! record = name_len name dtype rank extent* payload
//! ```
//!
//! `dtype` 0 is a 32-bit float payload; `dtype` 1 is a packed ±1 payload,
//! one bit per element (bit 1 = +1) in row-major order, LSB first, padded
//! with zero bits to a whole byte. Every binary latent weight is followed by
//! a `<name>.packed` record holding its signs, so the file carries the
//! deployed 1-bit weights in packed form.

use std::fs;
use std::path::Path;

use crate::bitcore::{sign_quantize, FloatTensor, PackedBitTensor};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::param::ParamRole;

pub const MAGIC: &[u8; 4] = b"BIIS";
pub const VERSION: u32 = 1;
pub const PACKED_SUFFIX: &str = ".packed";

const DTYPE_F32: u32 = 0;
const DTYPE_PACKED: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32 { shape: Vec<usize>, values: Vec<f32> },
    Packed(PackedBitTensor),
}

impl Payload {
    pub fn shape(&self) -> &[usize] {
        match self {
            Payload::F32 { shape, .. } => shape,
            Payload::Packed(t) => t.shape(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    /// Every parameter in id order, with a packed record after each binary latent.
    pub fn from_model(model: &Model) -> Self {
        let mut records = Vec::new();
        for p in model.params() {
            records.push(Record {
                name: p.name.clone(),
                payload: Payload::F32 {
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().iter().map(|&v| v as f32).collect(),
                },
            });
            if p.role == ParamRole::BinaryLatent {
                let packed = sign_quantize(&p.value).expect("parameters are finite");
                records.push(Record {
                    name: format!("{}{PACKED_SUFFIX}", p.name),
                    payload: Payload::Packed(packed),
                });
            }
        }
        Self { records }
    }

    /// Loads the weights into `model`. Every record is checked against the
    /// architecture before any value is written.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        let params = model.params();
        let mut values = Vec::with_capacity(params.len());
        let mut records = self.records.iter();
        for p in &params {
            let rec = records.next().ok_or_else(|| {
                Error::ArchitectureMismatch(format!("missing tensor `{}` {:?}", p.name, p.value.shape()))
            })?;
            let Payload::F32 { shape, values: v } = &rec.payload else {
                return Err(mismatch(&p.name, p.value.shape(), rec));
            };
            if rec.name != p.name || shape != p.value.shape() {
                return Err(mismatch(&p.name, p.value.shape(), rec));
            }
            values.push(FloatTensor::new(shape, v.iter().map(|&x| f64::from(x)).collect())?);
            if p.role == ParamRole::BinaryLatent {
                let want = format!("{}{PACKED_SUFFIX}", p.name);
                match records.next() {
                    Some(r) if r.name == want && r.payload.shape() == p.value.shape() => {}
                    Some(r) => return Err(mismatch(&want, p.value.shape(), r)),
                    None => {
                        return Err(Error::ArchitectureMismatch(format!(
                            "missing tensor `{want}` {:?}",
                            p.value.shape()
                        )))
                    }
                }
            }
        }
        if let Some(extra) = records.next() {
            return Err(Error::ArchitectureMismatch(format!(
                "unexpected tensor `{}` {:?}",
                extra.name,
                extra.payload.shape()
            )));
        }
        model.restore(&values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.records.len() as u32);
        for rec in &self.records {
            put_u32(&mut out, rec.name.len() as u32);
            out.extend_from_slice(rec.name.as_bytes());
            let (dtype, shape) = match &rec.payload {
                Payload::F32 { shape, .. } => (DTYPE_F32, shape.as_slice()),
                Payload::Packed(t) => (DTYPE_PACKED, t.shape()),
            };
            put_u32(&mut out, dtype);
            put_u32(&mut out, shape.len() as u32);
            for &e in shape {
                put_u32(&mut out, e as u32);
            }
            match &rec.payload {
                Payload::F32 { values, .. } => {
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Payload::Packed(t) => {
                    let bytes: Vec<u8> = t.words().iter().flat_map(|w| w.to_le_bytes()).collect();
                    out.extend_from_slice(&bytes[..t.len().div_ceil(8)]);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected \"BIIS\"".into(),
            });
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: at,
                msg: format!("unsupported version {version}"),
            });
        }
        let count = r.u32("record count")? as usize;
        let mut records: Vec<Record> = Vec::new();
        for _ in 0..count {
            let start = r.pos;
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format {
                    offset: start + 4,
                    msg: "name is not UTF-8".into(),
                })?
                .to_string();
            let at = r.pos;
            let dtype = r.u32("dtype")?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Format {
                    offset: at,
                    msg: format!("extents {shape:?} overflow"),
                })?;
            let payload_at = r.pos;
            let payload = match dtype {
                DTYPE_F32 => {
                    let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), "float payload")?;
                    let values: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                        return Err(Error::Format {
                            offset: payload_at + 4 * i,
                            msg: format!("non-finite value in `{name}`"),
                        });
                    }
                    Payload::F32 { shape, values }
                }
                DTYPE_PACKED => {
                    let raw = r.take(n.div_ceil(8), "packed payload")?;
                    if n % 8 != 0 && raw[raw.len() - 1] >> (n % 8) != 0 {
                        return Err(Error::Format {
                            offset: payload_at + raw.len() - 1,
                            msg: format!("nonzero padding bits in `{name}`"),
                        });
                    }
                    let mut words = vec![0u64; n.div_ceil(64)];
                    for (i, &b) in raw.iter().enumerate() {
                        words[i / 8] |= u64::from(b) << (8 * (i % 8));
                    }
                    Payload::Packed(PackedBitTensor::from_words(&shape, words)?)
                }
                other => {
                    return Err(Error::Format {
                        offset: at,
                        msg: format!("unknown dtype code {other} in `{name}`"),
                    })
                }
            };
            if let Payload::Packed(bits) = &payload {
                check_packed(&records, &name, bits, start)?;
            }
            records.push(Record { name, payload });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Bytes taken by packed binary weights, and what the same weights
    /// would take as 32-bit floats.
    pub fn binary_weight_bytes(&self) -> (usize, usize) {
        self.records
            .iter()
            .filter_map(|r| match &r.payload {
                Payload::Packed(t) => Some((t.len().div_ceil(8), 4 * t.len())),
                Payload::F32 { .. } => None,
            })
            .fold((0, 0), |(a, b), (x, y)| (a + x, b + y))
    }
}

/// A packed record must directly follow its latent and agree with its signs.
fn check_packed(records: &[Record], name: &str, bits: &PackedBitTensor, offset: usize) -> Result<()> {
    let fail = |msg: String| Err(Error::Format { offset, msg });
    let Some(latent_name) = name.strip_suffix(PACKED_SUFFIX) else {
        return fail(format!("packed record `{name}` lacks the `{PACKED_SUFFIX}` suffix"));
    };
    match records.last() {
        Some(Record {
            name: prev,
            payload: Payload::F32 { shape, values },
        }) if prev == latent_name && shape == bits.shape() => {
            if let Some(i) = values.iter().enumerate().position(|(i, &v)| (v >= 0.0) != bits.bit(i)) {
                return fail(format!("`{name}` element {i} disagrees with the sign of `{latent_name}`"));
            }
            Ok(())
        }
        _ => fail(format!("packed record `{name}` does not follow its latent tensor")),
    }
}

fn mismatch(want: &str, shape: &[usize], got: &Record) -> Error {
    Error::ArchitectureMismatch(format!(
        "expected `{want}` {shape:?}, checkpoint has `{}` {:?}",
        got.name,
        got.payload.shape()
    ))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.bytes.len(),
                msg: format!("truncated {what}: need {n} bytes at {}", self.pos),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
