use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lookup, validate_codes, LatentCode, Linear, Norm, INIT_STD};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::truncated_normal;
use crate::tensor::Tensor;

const MASK: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub vocab: usize,
    pub length: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.input_dim, self.vocab, self.length, self.hidden, self.heads, self.mlp_ratio];
        if positive.contains(&0) {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: Norm,
    query: Linear,
    key: Linear,
    value: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// Autoregressive categorical recognition model `q(z | x)`.
///
/// The sequence fed to the causal transformer is `[embed(x), e(z_0), ..,
/// e(z_{T-2})]`; output position `t` gives the logits of `z_t`, so it only
/// sees `x` and `z_{<t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    input: Linear,
    positions: ParamId,
    latents: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
    head: Linear,
}

/// `K` codes per datapoint, stored datapoint-major (`i * K + k`).
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub codes: Vec<LatentCode>,
    pub log_q: Vec<f64>,
    pub rows: Vec<usize>,
    pub per_datapoint: usize,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let input = Linear::new(store, rng, "encoder.input", cfg.input_dim, h);
        let positions = store.add("encoder.positions", truncated_normal(rng, &[cfg.length, h], INIT_STD));
        let latents = store.add("encoder.latents", truncated_normal(rng, &[cfg.vocab, h], INIT_STD));
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("encoder.block{i}");
                Block {
                    ln1: Norm::new(store, &format!("{p}.ln1"), h),
                    query: Linear::new(store, rng, &format!("{p}.query"), h, h),
                    key: Linear::new(store, rng, &format!("{p}.key"), h, h),
                    value: Linear::new(store, rng, &format!("{p}.value"), h, h),
                    proj: Linear::new(store, rng, &format!("{p}.proj"), h, h),
                    ln2: Norm::new(store, &format!("{p}.ln2"), h),
                    fc1: Linear::new(store, rng, &format!("{p}.fc1"), h, h * cfg.mlp_ratio),
                    fc2: Linear::new(store, rng, &format!("{p}.fc2"), h * cfg.mlp_ratio, h),
                }
            })
            .collect();
        let ln_f = Norm::new(store, "encoder.ln_f", h);
        let head = Linear::new(store, rng, "encoder.head", h, cfg.vocab);
        Ok(Self { cfg, input, positions, latents, blocks, ln_f, head })
    }

    /// Rebinds to parameters already present in `store` (e.g. after loading).
    pub fn attach(cfg: EncoderConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("encoder.block{i}");
                Ok(Block {
                    ln1: Norm::attach(store, &format!("{p}.ln1"))?,
                    query: Linear::attach(store, &format!("{p}.query"))?,
                    key: Linear::attach(store, &format!("{p}.key"))?,
                    value: Linear::attach(store, &format!("{p}.value"))?,
                    proj: Linear::attach(store, &format!("{p}.proj"))?,
                    ln2: Norm::attach(store, &format!("{p}.ln2"))?,
                    fc1: Linear::attach(store, &format!("{p}.fc1"))?,
                    fc2: Linear::attach(store, &format!("{p}.fc2"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input: Linear::attach(store, "encoder.input")?,
            positions: lookup(store, "encoder.positions")?,
            latents: lookup(store, "encoder.latents")?,
            blocks,
            ln_f: Norm::attach(store, "encoder.ln_f")?,
            head: Linear::attach(store, "encoder.head")?,
            cfg,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Input conditioning token, `[N, D] -> [N, H]`.
    pub fn embed_inputs(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(Error::Invalid(format!(
                "encoder input has shape {shape:?}, expected [N, {}]",
                self.cfg.input_dim
            )));
        }
        self.input.forward(g, store, x)
    }

    /// Embeddings of latent indices, `[M, L] -> [M, L, H]`.
    pub fn embed_latents(&self, g: &mut Graph, store: &ParamStore, indices: &[usize], m: usize, len: usize) -> Result<Var> {
        let table = g.param(store, self.latents);
        Ok(g.embedding(table, indices, &[m, len])?)
    }

    /// Embeddings of (relaxed) one-hot vectors, `[M, L, V] -> [M, L, H]`.
    pub fn embed_one_hot(&self, g: &mut Graph, store: &ParamStore, one_hot: Var) -> Result<Var> {
        let table = g.param(store, self.latents);
        Ok(g.matmul(one_hot, table)?)
    }

    /// Logits for positions `0..=P` given input tokens and the embedded
    /// prefix `[M, P, H]` (`None` for `P = 0`). `rows[m]` selects the row of
    /// `x_tokens` conditioning sequence `m`. With `last_only` only position
    /// `P` is projected, giving `[M, 1, V]`; otherwise `[M, P + 1, V]`.
    pub fn logits_with_prefix(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_tokens: Var,
        rows: &[usize],
        prefix: Option<Var>,
        last_only: bool,
    ) -> Result<Var> {
        let m = rows.len();
        let h = self.cfg.hidden;
        let first = g.embedding(x_tokens, rows, &[m, 1])?;
        let tokens = match prefix {
            Some(p) => g.concat(&[first, p], 1)?,
            None => first,
        };
        let len = g.shape(tokens)[1];
        if len > self.cfg.length {
            return Err(Error::LatentLength { got: len, expected: self.cfg.length });
        }
        let pos_table = g.param(store, self.positions);
        let idx: Vec<usize> = (0..len).collect();
        let pos = g.embedding(pos_table, &idx, &[len])?;
        let mut x = g.add(tokens, pos)?;

        let mut mask = Tensor::zeros(&[len, len]);
        for i in 0..len {
            for j in i + 1..len {
                mask.data_mut()[i * len + j] = MASK;
            }
        }
        let mask = g.constant(mask);
        let heads = self.cfg.heads;
        let hd = h / heads;
        let split = |g: &mut Graph, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[m, len, heads, hd])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            Ok(g.reshape(v, &[m * heads, len, hd])?)
        };
        for block in &self.blocks {
            let a = block.ln1.forward(g, store, x)?;
            let a = g.reshape(a, &[m * len, h])?;
            let q = block.query.forward(g, store, a)?;
            let q = split(g, q)?;
            let k = block.key.forward(g, store, a)?;
            let k = split(g, k)?;
            let v = block.value.forward(g, store, a)?;
            let v = split(g, v)?;
            let scores = g.bmm(q, k, true)?;
            let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
            let scores = g.add(scores, mask)?;
            let att = g.softmax(scores, 2)?;
            let o = g.bmm(att, v, false)?;
            let o = g.reshape(o, &[m, heads, len, hd])?;
            let o = g.permute(o, &[0, 2, 1, 3])?;
            let o = g.reshape(o, &[m * len, h])?;
            let o = block.proj.forward(g, store, o)?;
            let o = g.reshape(o, &[m, len, h])?;
            x = g.add(x, o)?;

            let b = block.ln2.forward(g, store, x)?;
            let b = block.fc1.forward(g, store, b)?;
            let b = g.gelu(b)?;
            let b = block.fc2.forward(g, store, b)?;
            x = g.add(x, b)?;
        }
        if last_only {
            x = g.slice(x, 1, len - 1, 1)?;
        }
        let x = self.ln_f.forward(g, store, x)?;
        self.head.forward(g, store, x)
    }

    /// Logits `[M, 1, V]` for position `pos` given the embedded token at
    /// `pos` and the per-layer key/value caches of positions `< pos`, which
    /// are extended in place. Same arithmetic as [`Self::logits_with_prefix`]
    /// without recomputing the prefix.
    fn next_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        token: Var,
        pos: usize,
        cache: &mut [Option<(Tensor, Tensor)>],
    ) -> Result<Var> {
        let m = g.shape(token)[0];
        let h = self.cfg.hidden;
        let heads = self.cfg.heads;
        let hd = h / heads;
        let pos_table = g.param(store, self.positions);
        let p = g.embedding(pos_table, &[pos], &[1])?;
        let mut x = g.add(token, p)?;
        let split = |g: &mut Graph, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[m, 1, heads, hd])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            Ok(g.reshape(v, &[m * heads, 1, hd])?)
        };
        for (block, kv) in self.blocks.iter().zip(cache.iter_mut()) {
            let a = block.ln1.forward(g, store, x)?;
            let a = g.reshape(a, &[m, h])?;
            let q = block.query.forward(g, store, a)?;
            let q = split(g, q)?;
            let k = block.key.forward(g, store, a)?;
            let k = split(g, k)?;
            let v = block.value.forward(g, store, a)?;
            let v = split(g, v)?;
            let (k, v) = match kv.take() {
                Some((kc, vc)) => {
                    let kc = g.constant(kc);
                    let vc = g.constant(vc);
                    (g.concat(&[kc, k], 1)?, g.concat(&[vc, v], 1)?)
                }
                None => (k, v),
            };
            *kv = Some((g.value(k).clone(), g.value(v).clone()));
            let scores = g.bmm(q, k, true)?;
            let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
            let att = g.softmax(scores, 2)?;
            let o = g.bmm(att, v, false)?;
            let o = g.reshape(o, &[m, heads, 1, hd])?;
            let o = g.permute(o, &[0, 2, 1, 3])?;
            let o = g.reshape(o, &[m, h])?;
            let o = block.proj.forward(g, store, o)?;
            let o = g.reshape(o, &[m, 1, h])?;
            x = g.add(x, o)?;

            let b = block.ln2.forward(g, store, x)?;
            let b = block.fc1.forward(g, store, b)?;
            let b = g.gelu(b)?;
            let b = block.fc2.forward(g, store, b)?;
            x = g.add(x, b)?;
        }
        let x = self.ln_f.forward(g, store, x)?;
        self.head.forward(g, store, x)
    }

    /// Teacher-forced logits `[M, T, V]` for `codes[m]` conditioned on row
    /// `rows[m]` of `x_tokens`.
    pub fn logits_rows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_tokens: Var,
        rows: &[usize],
        codes: &[LatentCode],
    ) -> Result<Var> {
        validate_codes(codes, self.cfg.vocab, self.cfg.length)?;
        let t = self.cfg.length;
        let m = codes.len();
        let prefix = if t > 1 {
            let idx: Vec<usize> = codes.iter().flat_map(|c| c.indices()[..t - 1].iter().copied()).collect();
            Some(self.embed_latents(g, store, &idx, m, t - 1)?)
        } else {
            None
        };
        self.logits_with_prefix(g, store, x_tokens, rows, prefix, false)
    }

    /// Teacher-forced logits `[N, T, V]`, one code per input row.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var, codes: &[LatentCode]) -> Result<Var> {
        let tokens = self.embed_inputs(g, store, x)?;
        let rows: Vec<usize> = (0..codes.len()).collect();
        self.logits_rows(g, store, tokens, &rows, codes)
    }

    /// `sum_t log softmax(logits_t)[z_t]` per sequence, `[M]`.
    pub fn log_prob_rows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_tokens: Var,
        rows: &[usize],
        codes: &[LatentCode],
    ) -> Result<Var> {
        let logits = self.logits_rows(g, store, x_tokens, rows, codes)?;
        let lsm = g.log_softmax(logits, 2)?;
        let idx: Vec<usize> = codes.iter().flat_map(|c| c.indices().iter().copied()).collect();
        let picked = g.gather(lsm, &idx)?;
        Ok(g.sum(picked, 1)?)
    }

    /// `log q(z | x)` for one code per input row, `[N]`.
    pub fn log_prob(&self, g: &mut Graph, store: &ParamStore, x: Var, codes: &[LatentCode]) -> Result<Var> {
        let tokens = self.embed_inputs(g, store, x)?;
        let rows: Vec<usize> = (0..codes.len()).collect();
        self.log_prob_rows(g, store, tokens, &rows, codes)
    }

    /// Ancestral sampling of `k` codes per row of `x` without recording
    /// gradients. `rng_for(i, k)` supplies the stream for datapoint `i`,
    /// sample `k`.
    pub fn sample(
        &self,
        store: &ParamStore,
        x: &Tensor,
        k: usize,
        mut rng_for: impl FnMut(usize, usize) -> ChaCha8Rng,
    ) -> Result<Samples> {
        if k == 0 {
            return Err(Error::Invalid("sample count must be at least 1".into()));
        }
        let n = x.shape().first().copied().unwrap_or(0);
        let rows: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..n).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| rng_for(i, j)).collect();
        let draw = |lsm: &[f64], rng: &mut ChaCha8Rng| categorical(lsm, rng.random::<f64>());
        self.decode(store, x, &rows, |m, lsm| draw(lsm, &mut rngs[m]), k)
    }

    /// Autoregressive argmax decoding, one code per row of `x`.
    pub fn greedy(&self, store: &ParamStore, x: &Tensor) -> Result<Samples> {
        let n = x.shape().first().copied().unwrap_or(0);
        let rows: Vec<usize> = (0..n).collect();
        self.decode(store, x, &rows, |_, lsm| argmax(lsm), 1)
    }

    fn decode(
        &self,
        store: &ParamStore,
        x: &Tensor,
        rows: &[usize],
        mut choose: impl FnMut(usize, &[f64]) -> usize,
        per_datapoint: usize,
    ) -> Result<Samples> {
        let (v, t) = (self.cfg.vocab, self.cfg.length);
        let m = rows.len();
        let x_tokens = {
            let mut g = Graph::no_grad();
            let xv = g.constant(x.clone());
            let tok = self.embed_inputs(&mut g, store, xv)?;
            g.value(tok).clone()
        };
        let mut codes = vec![Vec::with_capacity(t); m];
        let mut log_q = vec![0.0; m];
        let mut cache = vec![None; self.blocks.len()];
        for pos in 0..t {
            let mut g = Graph::no_grad();
            let token = if pos == 0 {
                let xt = g.constant(x_tokens.clone());
                g.embedding(xt, rows, &[m, 1])?
            } else {
                let idx: Vec<usize> = codes.iter().map(|c: &Vec<usize>| c[pos - 1]).collect();
                self.embed_latents(&mut g, store, &idx, m, 1)?
            };
            let logits = self.next_logits(&mut g, store, token, pos, &mut cache)?;
            let lsm = g.log_softmax(logits, 2)?;
            let lsm = g.value(lsm);
            for (i, code) in codes.iter_mut().enumerate() {
                let lane = &lsm.data()[i * v..(i + 1) * v];
                let z = choose(i, lane);
                log_q[i] += lane[z];
                code.push(z);
            }
        }
        Ok(Samples { codes: codes.into_iter().map(LatentCode::from_raw).collect(), log_q, rows: rows.to_vec(), per_datapoint })
    }
}

/// Inverse-CDF draw from log-probabilities with uniform `u`.
pub(crate) fn categorical(log_probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
