//! Named trainable tensors and per-pass gradient buffers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::bitcore::FloatTensor;

/// What a parameter is used for; drives optimizer and accounting rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Full-precision weight used as-is at inference.
    Float,
    /// Latent weight whose sign is the deployed binary weight.
    BinaryLatent,
    /// Dynamic SoftSign sharpness of one Sign site (training-only).
    Sharpness,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub id: usize,
    pub role: ParamRole,
    pub value: FloatTensor,
}

/// Parameters are stored at single precision so checkpoints are lossless.
pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl Param {
    pub fn scalar(&self) -> f64 {
        self.value.data()[0]
    }

    pub(crate) fn round_to_storage(&mut self) {
        for v in self.value.data_mut() {
            *v = round_f32(*v);
        }
    }
}

/// Allocates parameter ids in creation order and draws initial values.
pub struct ParamRegistry {
    rng: ChaCha8Rng,
    next_id: usize,
}

impl ParamRegistry {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng, next_id: 0 }
    }

    pub fn count(&self) -> usize {
        self.next_id
    }

    fn make(&mut self, name: String, role: ParamRole, value: FloatTensor) -> Param {
        let mut p = Param {
            name,
            id: self.next_id,
            role,
            value,
        };
        p.round_to_storage();
        self.next_id += 1;
        p
    }

    pub fn constant(&mut self, name: String, role: ParamRole, shape: &[usize], v: f64) -> Param {
        self.make(name, role, FloatTensor::full(shape, v))
    }

    /// Uniform on `[-bound, bound]`.
    pub fn uniform(&mut self, name: String, role: ParamRole, shape: &[usize], bound: f64) -> Param {
        let rng = &mut self.rng;
        let value = FloatTensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.make(name, role, value)
    }
}

/// Gradient buffers aligned with parameter ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros<'a>(params: impl IntoIterator<Item = &'a Param>) -> Self {
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for p in params {
            if grads.len() <= p.id {
                grads.resize(p.id + 1, Vec::new());
            }
            grads[p.id] = vec![0.0; p.value.len()];
        }
        Self { grads }
    }

    pub fn get(&self, p: &Param) -> &[f64] {
        &self.grads[p.id]
    }

    pub fn by_id(&self, id: usize) -> &[f64] {
        &self.grads[id]
    }

    pub(crate) fn accumulate(&mut self, p: &Param, g: &[f64]) {
        let dst = &mut self.grads[p.id];
        debug_assert_eq!(dst.len(), g.len(), "gradient size for {}", p.name);
        for (d, v) in dst.iter_mut().zip(g) {
            *d += v;
        }
    }

    pub(crate) fn accumulate_scalar(&mut self, p: &Param, g: f64) {
        self.grads[p.id][0] += g;
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}
