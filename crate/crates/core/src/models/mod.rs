//! Recognition model, generative models and the VQ codebook.

mod decoder;
mod encoder;
mod vq;

pub use decoder::{Decoder, DecoderConfig, Head, MAX_VARIANCE, MIN_VARIANCE};
pub use encoder::{Encoder, EncoderConfig, Samples};
pub use vq::{vq_quantize, Codebook, Quantized, VqEncoder, VqEncoderConfig};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::truncated_normal;
use crate::tensor::Tensor;

pub(crate) const INIT_STD: f64 = 0.02;

/// A length-`T` sequence of categorical indices in `[0, V)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatentCode(Vec<usize>);

impl LatentCode {
    pub fn new(indices: Vec<usize>, vocab: usize, length: usize) -> Result<Self> {
        let code = Self(indices);
        code.validate(vocab, length)?;
        Ok(code)
    }

    pub(crate) fn from_raw(indices: Vec<usize>) -> Self {
        Self(indices)
    }

    pub fn validate(&self, vocab: usize, length: usize) -> Result<()> {
        if self.0.len() != length {
            return Err(Error::LatentLength { got: self.0.len(), expected: length });
        }
        if let Some((position, &index)) = self.0.iter().enumerate().find(|(_, &i)| i >= vocab) {
            return Err(Error::LatentIndex { index, vocab, position });
        }
        Ok(())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub(crate) fn validate_codes(codes: &[LatentCode], vocab: usize, length: usize) -> Result<()> {
    codes.iter().try_for_each(|c| c.validate(vocab, length))
}

/// Dense layer parameters `x @ w + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_std(store, rng, name, fan_in, fan_out, INIT_STD)
    }

    /// Weights scaled by `1/sqrt(fan_in)`, for layers without normalization.
    pub fn fan_in(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_std(store, rng, name, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }

    fn with_std(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Self {
        let w = store.add(format!("{name}.w"), truncated_normal(rng, &[fan_in, fan_out], std));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self { w: lookup(store, &format!("{name}.w"))?, b: lookup(store, &format!("{name}.b"))? })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let h = g.matmul(x, w)?;
        Ok(g.add(h, b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Norm {
    pub scale: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let scale = store.add(format!("{name}.scale"), Tensor::full(&[dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { scale, bias }
    }

    pub fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self { scale: lookup(store, &format!("{name}.scale"))?, bias: lookup(store, &format!("{name}.bias"))? })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.param(store, self.scale);
        let b = g.param(store, self.bias);
        Ok(g.layer_norm(x, s, b)?)
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
}
