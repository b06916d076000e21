use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lookup, LatentCode, Linear, INIT_STD};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::truncated_normal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqEncoderConfig {
    pub input_dim: usize,
    pub vocab: usize,
    pub length: usize,
    pub embed: usize,
    pub hidden: usize,
    #[serde(default = "default_commitment")]
    pub commitment: f64,
}

fn default_commitment() -> f64 {
    0.25
}

/// Deterministic encoder for the VQ-VAE baseline: an MLP producing `T`
/// continuous vectors of width `E` per input.
#[derive(Debug, Clone, PartialEq)]
pub struct VqEncoder {
    cfg: VqEncoderConfig,
    hidden: Linear,
    out: Linear,
}

impl VqEncoder {
    pub fn new(cfg: VqEncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        if [cfg.input_dim, cfg.vocab, cfg.length, cfg.embed, cfg.hidden].contains(&0) {
            return Err(Error::Config(format!("vq dimensions must be positive: {cfg:?}")));
        }
        let hidden = Linear::new(store, rng, "vq.hidden", cfg.input_dim, cfg.hidden);
        let out = Linear::new(store, rng, "vq.out", cfg.hidden, cfg.length * cfg.embed);
        Ok(Self { cfg, hidden, out })
    }

    pub fn attach(cfg: VqEncoderConfig, store: &ParamStore) -> Result<Self> {
        Ok(Self { hidden: Linear::attach(store, "vq.hidden")?, out: Linear::attach(store, "vq.out")?, cfg })
    }

    pub fn config(&self) -> &VqEncoderConfig {
        &self.cfg
    }

    /// Continuous encodings `[N, T, E]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let h = self.hidden.forward(g, store, x)?;
        let h = g.gelu(h)?;
        let z = self.out.forward(g, store, h)?;
        Ok(g.reshape(z, &[n, self.cfg.length, self.cfg.embed])?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Codebook {
    pub id: ParamId,
}

impl Codebook {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, vocab: usize, embed: usize) -> Self {
        // Wider than the layer init so codes start distinguishable.
        let id = store.add("vq.codebook", truncated_normal(rng, &[vocab, embed], 10.0 * INIT_STD));
        Self { id }
    }

    pub fn attach(store: &ParamStore) -> Result<Self> {
        Ok(Self { id: lookup(store, "vq.codebook")? })
    }
}

/// Result of nearest-neighbour quantization.
#[derive(Debug, Clone)]
pub struct Quantized {
    /// Forward value is the selected codebook vector, gradient flows to `z`.
    pub straight_through: Var,
    /// Selected codebook rows, differentiable with respect to the codebook.
    pub selected: Var,
    pub codes: Vec<LatentCode>,
}

/// Nearest codebook entry per vector of `z[N, T, E]`; ties go to the lowest index.
pub fn vq_quantize(g: &mut Graph, z: Var, codebook: Var) -> Result<Quantized> {
    let zs = g.shape(z).to_vec();
    let cs = g.shape(codebook).to_vec();
    if cs.len() != 2 || cs[0] == 0 {
        return Err(Error::Invalid(format!("codebook must be a non-empty [V, E] matrix, got {cs:?}")));
    }
    if zs.len() != 3 || zs[2] != cs[1] {
        return Err(Error::Invalid(format!("encodings {zs:?} do not match codebook {cs:?}")));
    }
    let (n, t, e) = (zs[0], zs[1], zs[2]);
    let book = g.value(codebook).data();
    let zv = g.value(z).data();
    let mut indices = Vec::with_capacity(n * t);
    for vec in zv.chunks(e) {
        let mut best = (0, f64::INFINITY);
        for (k, row) in book.chunks(e).enumerate() {
            let d: f64 = vec.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        indices.push(best.0);
    }
    let selected = g.embedding(codebook, &indices, &[n, t])?;
    let hard = g.value(selected).clone();
    let straight_through = g.straight_through(z, hard)?;
    let codes = indices.chunks(t).map(|c| LatentCode::from_raw(c.to_vec())).collect();
    Ok(Quantized { straight_through, selected, codes })
}
