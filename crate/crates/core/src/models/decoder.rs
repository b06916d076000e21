use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lookup, validate_codes, LatentCode, Linear};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::truncated_normal;
use crate::tensor::Tensor;

pub const MIN_VARIANCE: f64 = 0.01;
pub const MAX_VARIANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Bernoulli,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub length: usize,
    pub embed: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub head: Head,
}

/// Generative model `p(x | z)`: per-position latent embeddings are
/// concatenated and mapped by a one-hidden-layer MLP to Bernoulli logits or
/// Gaussian means. The Gaussian head has one variance per output dimension,
/// `0.01 + 0.99 * sigmoid(a_d)`, which stays inside `[0.01, 1.0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    cfg: DecoderConfig,
    latents: ParamId,
    hidden: Linear,
    out: Linear,
    variance: Option<ParamId>,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        if [cfg.vocab, cfg.length, cfg.embed, cfg.hidden, cfg.output_dim].contains(&0) {
            return Err(Error::Config(format!("decoder dimensions must be positive: {cfg:?}")));
        }
        // Unit-scale codes and fan-in scaled layers: rewards must depend on
        // the code from the first step or the encoder has nothing to follow.
        let latents = store.add("decoder.latents", truncated_normal(rng, &[cfg.vocab, cfg.embed], 1.0));
        let hidden = Linear::fan_in(store, rng, "decoder.hidden", cfg.length * cfg.embed, cfg.hidden);
        let out = Linear::fan_in(store, rng, "decoder.out", cfg.hidden, cfg.output_dim);
        let variance = (cfg.head == Head::Gaussian)
            .then(|| store.add("decoder.variance", Tensor::zeros(&[cfg.output_dim])));
        Ok(Self { cfg, latents, hidden, out, variance })
    }

    pub fn attach(cfg: DecoderConfig, store: &ParamStore) -> Result<Self> {
        let variance = match cfg.head {
            Head::Gaussian => Some(lookup(store, "decoder.variance")?),
            Head::Bernoulli => None,
        };
        Ok(Self {
            latents: lookup(store, "decoder.latents")?,
            hidden: Linear::attach(store, "decoder.hidden")?,
            out: Linear::attach(store, "decoder.out")?,
            variance,
            cfg,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Latent features `[M, T * E]` from codes.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, codes: &[LatentCode]) -> Result<Var> {
        validate_codes(codes, self.cfg.vocab, self.cfg.length)?;
        let table = g.param(store, self.latents);
        let idx: Vec<usize> = codes.iter().flat_map(|c| c.indices().iter().copied()).collect();
        let e = g.embedding(table, &idx, &[codes.len(), self.cfg.length])?;
        Ok(g.reshape(e, &[codes.len(), self.cfg.length * self.cfg.embed])?)
    }

    /// Latent features from (straight-through) one-hot vectors `[M, T, V]`.
    pub fn features_one_hot(&self, g: &mut Graph, store: &ParamStore, one_hot: Var) -> Result<Var> {
        let m = g.shape(one_hot)[0];
        let table = g.param(store, self.latents);
        let e = g.matmul(one_hot, table)?;
        Ok(g.reshape(e, &[m, self.cfg.length * self.cfg.embed])?)
    }

    /// Latent features from continuous vectors `[M, T, E]` (VQ path).
    pub fn features_vectors(&self, g: &mut Graph, vectors: Var) -> Result<Var> {
        let m = g.shape(vectors)[0];
        Ok(g.reshape(vectors, &[m, self.cfg.length * self.cfg.embed])?)
    }

    /// Bernoulli logits or Gaussian means, `[M, D]`.
    pub fn output(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, features)?;
        let h = g.gelu(h)?;
        self.out.forward(g, store, h)
    }

    /// Per-dimension variance `[D]` of the Gaussian head.
    pub fn variance(&self, g: &mut Graph, store: &ParamStore) -> Result<Option<Var>> {
        let Some(id) = self.variance else { return Ok(None) };
        let pre = g.param(store, id);
        let s = g.sigmoid(pre)?;
        let s = g.scale(s, MAX_VARIANCE - MIN_VARIANCE)?;
        Ok(Some(g.shift(s, MIN_VARIANCE)?))
    }

    /// `log p(x | z)` per row, `[M]`, from latent features and targets `x[M, D]`.
    pub fn log_likelihood(&self, g: &mut Graph, store: &ParamStore, features: Var, x: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.cfg.output_dim {
            return Err(Error::Invalid(format!("decoder target shape {xs:?}, expected [M, {}]", self.cfg.output_dim)));
        }
        let params = self.output(g, store, features)?;
        match self.cfg.head {
            Head::Bernoulli => {
                if let Some(v) = g.value(x).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::Invalid(format!("Bernoulli target {v} outside [0, 1]")));
                }
                // x * l - softplus(l)
                let xl = g.mul(x, params)?;
                let sp = g.softplus(params)?;
                let ll = g.sub(xl, sp)?;
                Ok(g.sum(ll, 1)?)
            }
            Head::Gaussian => {
                let var = self.variance(g, store)?.expect("gaussian head has variance");
                let diff = g.sub(x, params)?;
                let sq = g.square(diff)?;
                let inv = g.recip(var)?;
                let scaled = g.mul(sq, inv)?;
                let quad = g.sum(scaled, 1)?;
                let log_var = g.log(var)?;
                let log_det = g.sum_all(log_var);
                let half_quad = g.scale(quad, -0.5)?;
                let half_det = g.scale(log_det, -0.5)?;
                let ll = g.add(half_quad, half_det)?;
                let d = self.cfg.output_dim as f64;
                Ok(g.shift(ll, -0.5 * d * (2.0 * std::f64::consts::PI).ln())?)
            }
        }
    }

    /// `log p(x_rows[m] | codes[m])`, `[M]`.
    pub fn log_likelihood_codes(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        codes: &[LatentCode],
        x: Var,
    ) -> Result<Var> {
        let f = self.features(g, store, codes)?;
        self.log_likelihood(g, store, f, x)
    }

    /// Mean of `p(x | z)`: sigmoid of the logits or the Gaussian mean, `[M, D]`.
    pub fn mean(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let out = self.output(g, store, features)?;
        match self.cfg.head {
            Head::Bernoulli => Ok(g.sigmoid(out)?),
            Head::Gaussian => Ok(out),
        }
    }
}
