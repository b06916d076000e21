//! Training loop: alternating encoder, decoder and trust-region updates for
//! the policy-search method, single-loss steps for the baselines, held-out
//! evaluation, metrics and checkpoints.

pub mod checkpoint;
pub mod metrics;
pub mod optim;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParamStore};
use crate::config::{Config, Method};
use crate::data::{select_rows, Dataset};
use crate::engine::{
    decoder_loss, encoder_loss, gumbel_encode, reinforce_loss, uniforms, vq_vae_loss, DapsBatchResult, EtaController,
    GumbelConfig,
};
use crate::error::{Error, Result};
use crate::models::{
    vq_quantize, Codebook, Decoder, DecoderConfig, Encoder, EncoderConfig, Head, LatentCode, VqEncoder, VqEncoderConfig,
};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

use checkpoint::{ArraySpec, Checkpoint, Header, TrainerScalars};
use metrics::{MetricsRecord, MetricsWriter};
use optim::Adam;

/// Guard threshold on the batch ESS ratio and the streak length that trips it.
pub const GUARD_RATIO: f64 = 0.02;
pub const GUARD_STEPS: u64 = 50;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone)]
enum Model {
    Policy { encoder: Encoder, decoder: Decoder },
    Vq { encoder: VqEncoder, codebook: Codebook, decoder: Decoder },
}

impl Model {
    fn decoder(&self) -> &Decoder {
        match self {
            Model::Policy { decoder, .. } | Model::Vq { decoder, .. } => decoder,
        }
    }
}

/// Running sums of training statistics since the last metrics record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub steps: u64,
    pub reward: f64,
    pub encoder_loss: f64,
    pub decoder_loss: f64,
    pub eta_loss: f64,
    pub ess_ratio: f64,
}

impl Window {
    fn add(&mut self, r: &StepReport) {
        self.steps += 1;
        self.reward += r.reward;
        self.encoder_loss += r.encoder_loss;
        self.decoder_loss += r.decoder_loss;
        self.eta_loss += r.eta_loss.unwrap_or(0.0);
        self.ess_ratio += r.ess_ratio.unwrap_or(0.0);
    }

    fn mean(&self, v: f64) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            v / self.steps as f64
        }
    }
}

/// Parameter names that received a gradient from each of the three losses.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GradientKeys {
    pub encoder: BTreeSet<String>,
    pub decoder: BTreeSet<String>,
    pub eta: BTreeSet<String>,
}

impl GradientKeys {
    pub fn disjoint(&self) -> bool {
        self.encoder.is_disjoint(&self.decoder) && self.encoder.is_disjoint(&self.eta) && self.decoder.is_disjoint(&self.eta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Index of the step just taken, counting from 0.
    pub step: u64,
    pub beta: f64,
    pub lr: f64,
    pub eta: Option<f64>,
    pub tau: Option<f64>,
    pub reward: f64,
    pub encoder_loss: f64,
    pub decoder_loss: f64,
    pub eta_loss: Option<f64>,
    pub ess_ratio: Option<f64>,
    pub keys: Option<GradientKeys>,
}

/// Monte Carlo estimates on a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub rows: usize,
    pub reward: f64,
    pub kl: f64,
    pub entropy: f64,
    pub elbo: f64,
    /// Standard errors over samples of the per-sample terms.
    pub elbo_se: f64,
    pub entropy_se: f64,
    pub l2: f64,
    pub nll_per_dim: f64,
    pub accuracy: Option<f64>,
}

pub struct Trainer {
    cfg: Config,
    data: Dataset,
    store: ParamStore,
    model: Model,
    eta: Option<EtaController>,
    encoder_opt: Adam,
    decoder_opt: Adam,
    step: u64,
    encoder_lr_scale: f64,
    low_ess_streak: u64,
    guard_step: Option<u64>,
    window: Window,
    epoch_order: Option<(u64, Vec<usize>)>,
    started: Instant,
}

impl Trainer {
    /// Loads the configured dataset and initializes fresh parameters.
    pub fn new(cfg: Config) -> Result<Self> {
        let data = cfg.data.load(Path::new(""))?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: Config, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let n = data.train.shape()[0];
        if cfg.run.batch_size > n {
            return Err(Error::Config(format!("batch_size {} exceeds {n} training rows", cfg.run.batch_size)));
        }
        if data.val.shape()[0] == 0 {
            return Err(Error::Config("validation split is empty".into()));
        }
        let m = &cfg.model;
        let d = data.dim();
        let seed = cfg.run.seed;
        let mut store = ParamStore::new();
        let decoder_cfg = DecoderConfig {
            vocab: m.vocab,
            length: m.length,
            embed: m.decoder_embed,
            hidden: m.decoder_hidden,
            output_dim: d,
            head: data.head,
        };
        let model = if cfg.run.method == Method::VqVae {
            let vq_cfg = VqEncoderConfig {
                input_dim: d,
                vocab: m.vocab,
                length: m.length,
                embed: m.decoder_embed,
                hidden: m.decoder_hidden,
                commitment: cfg.vq.commitment,
            };
            let encoder = VqEncoder::new(vq_cfg, &mut store, &mut stream(seed, 0, Purpose::Init, 0, 0))?;
            let codebook = Codebook::new(&mut store, &mut stream(seed, 0, Purpose::Init, 2, 0), m.vocab, m.decoder_embed);
            let decoder = Decoder::new(decoder_cfg, &mut store, &mut stream(seed, 0, Purpose::Init, 1, 0))?;
            Model::Vq { encoder, codebook, decoder }
        } else {
            let enc_cfg = EncoderConfig {
                input_dim: d,
                vocab: m.vocab,
                length: m.length,
                hidden: m.hidden,
                layers: m.layers,
                heads: m.heads,
                mlp_ratio: m.mlp_ratio,
            };
            let encoder = Encoder::new(enc_cfg, &mut store, &mut stream(seed, 0, Purpose::Init, 0, 0))?;
            let decoder = Decoder::new(decoder_cfg, &mut store, &mut stream(seed, 0, Purpose::Init, 1, 0))?;
            Model::Policy { encoder, decoder }
        };
        let eta = if cfg.run.method == Method::Daps {
            Some(EtaController::new(&mut store, cfg.optim.eta_init, cfg.daps.rho_target, cfg.optim.eta_lr)?)
        } else {
            None
        };
        let mut enc_ids = store.group("encoder.");
        enc_ids.extend(store.group("vq."));
        let encoder_opt = Adam::new(&store, enc_ids, cfg.optim.weight_decay);
        let decoder_opt = Adam::new(&store, store.group("decoder."), cfg.optim.weight_decay);
        Ok(Self {
            cfg,
            data,
            store,
            model,
            eta,
            encoder_opt,
            decoder_opt,
            step: 0,
            encoder_lr_scale: 1.0,
            low_ess_streak: 0,
            guard_step: None,
            window: Window::default(),
            epoch_order: None,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn eta(&self) -> Option<f64> {
        self.eta.map(|c| c.eta(&self.store))
    }

    /// Step at which the divergence guard halved the encoder learning rate.
    pub fn guard_step(&self) -> Option<u64> {
        self.guard_step
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        match &self.model {
            Model::Policy { encoder, .. } => Some(encoder),
            Model::Vq { .. } => None,
        }
    }

    pub fn decoder(&self) -> &Decoder {
        self.model.decoder()
    }

    pub fn beta_at(&self, step: u64) -> f64 {
        self.cfg.beta.at(step, self.cfg.run.steps)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let lr = self.cfg.optim.lr;
        if self.cfg.optim.cosine_decay && self.cfg.run.steps > 0 {
            let frac = (step as f64 / self.cfg.run.steps as f64).min(1.0);
            lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        } else {
            lr
        }
    }

    /// Training rows for `step`: consecutive slices of a per-epoch
    /// permutation, so the batch depends only on (seed, step).
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.data.train.shape()[0] as u64;
        let b = self.cfg.run.batch_size as u64;
        (0..b)
            .map(|j| {
                let global = step * b + j;
                let (epoch, pos) = (global / n, (global % n) as usize);
                if self.epoch_order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut order: Vec<usize> = (0..n as usize).collect();
                    order.shuffle(&mut stream(self.cfg.run.seed, epoch, Purpose::Batch, 0, 0));
                    self.epoch_order = Some((epoch, order));
                }
                self.epoch_order.as_ref().expect("filled above").1[pos]
            })
            .collect()
    }

    /// One optimization step on the next batch.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let s = self.step;
        let rows = self.batch_indices(s);
        let x = select_rows(&self.data.train, &rows);
        let beta = self.beta_at(s);
        let lr = self.lr_at(s);
        let report = match self.cfg.run.method {
            Method::Daps => self.daps_step(&x, beta, lr)?,
            Method::Reinforce => self.reinforce_step(&x, beta, lr)?,
            Method::GumbelSt => self.gumbel_step(&x, beta, lr)?,
            Method::VqVae => self.vq_step(&x, beta, lr)?,
        };
        self.step += 1;
        self.window.add(&report);
        Ok(report)
    }

    fn fail(&self, what: &str, detail: String) -> Error {
        Error::NonFinite { what: what.into(), step: self.step, detail }
    }

    fn check_grads(&self, what: &str, grads: &Gradients, stats: &str) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(self.fail(what, format!("gradient of {}; {stats}", self.store.name(id))));
            }
        }
        Ok(())
    }

    fn daps_step(&mut self, x: &Tensor, beta: f64, lr: f64) -> Result<StepReport> {
        let Model::Policy { encoder, decoder } = &self.model else { unreachable!("policy model") };
        let ctrl = self.eta.expect("daps has an eta controller");
        let (k, seed, s) = (self.cfg.run.k, self.cfg.run.seed, self.step);
        let samples = encoder.sample(&self.store, x, k, |i, j| stream(seed, s, Purpose::Latent, i as u64, j as u64))?;
        let xr = repeat_rows(x, k);

        let mut g = Graph::new();
        let xv = g.constant(xr);
        let ll = decoder.log_likelihood_codes(&mut g, &self.store, &samples.codes, xv)?;
        let rewards = g.value(ll).data().to_vec();
        let dl = decoder_loss(&mut g, ll)?;
        let eta = ctrl.eta(&self.store);
        let stats = batch_stats(&rewards, &samples.log_q, eta, beta);
        if !rewards.iter().chain(&samples.log_q).all(|v| v.is_finite()) || !eta.is_finite() {
            return Err(self.fail("rewards or log-probabilities", stats));
        }
        let decoder_grads = g.backward(dl)?;

        let batch = DapsBatchResult::compute(&rewards, &samples.log_q, k, eta, beta, self.cfg.daps.rho_target)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let tokens = encoder.embed_inputs(&mut g, &self.store, xv)?;
        let lq = encoder.log_prob_rows(&mut g, &self.store, tokens, &samples.rows, &samples.codes)?;
        let el = encoder_loss(&mut g, &batch.weights, lq)?;
        let encoder_grads = g.backward(el)?;

        let mut g = Graph::new();
        let hl = ctrl.loss(&mut g, &self.store, &batch.advantages, &samples.log_q, k, beta)?;
        let eta_grads = g.backward(hl)?;

        for (what, v) in [("encoder loss", batch.encoder_loss), ("decoder loss", batch.decoder_loss), ("eta loss", batch.eta_loss)] {
            if !v.is_finite() {
                return Err(self.fail(what, stats));
            }
        }
        self.check_grads("encoder gradient", &encoder_grads, &stats)?;
        self.check_grads("decoder gradient", &decoder_grads, &stats)?;
        self.check_grads("eta gradient", &eta_grads, &stats)?;

        let names = |gr: &Gradients| gr.keys().map(|id| self.store.name(id).to_string()).collect::<BTreeSet<_>>();
        let keys = GradientKeys { encoder: names(&encoder_grads), decoder: names(&decoder_grads), eta: names(&eta_grads) };

        self.encoder_opt.step(&mut self.store, &encoder_grads, lr * self.encoder_lr_scale);
        self.decoder_opt.step(&mut self.store, &decoder_grads, lr);
        let zero = Tensor::scalar(0.0);
        ctrl.step(&mut self.store, eta_grads.get(ctrl.param).unwrap_or(&zero));
        self.guard(batch.ess_ratio);

        Ok(StepReport {
            step: s,
            beta,
            lr,
            eta: Some(ctrl.eta(&self.store)),
            tau: None,
            reward: -batch.decoder_loss,
            encoder_loss: batch.encoder_loss,
            decoder_loss: batch.decoder_loss,
            eta_loss: Some(batch.eta_loss),
            ess_ratio: Some(batch.ess_ratio),
            keys: Some(keys),
        })
    }

    fn guard(&mut self, ess_ratio: f64) {
        if ess_ratio < GUARD_RATIO {
            self.low_ess_streak += 1;
        } else {
            self.low_ess_streak = 0;
        }
        if self.low_ess_streak >= GUARD_STEPS && self.guard_step.is_none() {
            self.encoder_lr_scale = 0.5;
            self.guard_step = Some(self.step);
            eprintln!(
                "warning: ESS ratio below {GUARD_RATIO} for {GUARD_STEPS} steps at step {}; halving encoder learning rate",
                self.step
            );
        }
    }

    fn reinforce_step(&mut self, x: &Tensor, beta: f64, lr: f64) -> Result<StepReport> {
        let Model::Policy { encoder, decoder } = &self.model else { unreachable!("policy model") };
        let (k, seed, s) = (self.cfg.run.k, self.cfg.run.seed, self.step);
        let samples = encoder.sample(&self.store, x, k, |i, j| stream(seed, s, Purpose::Latent, i as u64, j as u64))?;

        let mut g = Graph::new();
        let xv = g.constant(repeat_rows(x, k));
        let ll = decoder.log_likelihood_codes(&mut g, &self.store, &samples.codes, xv)?;
        let rewards = g.value(ll).data().to_vec();
        let dl = decoder_loss(&mut g, ll)?;
        let decoder_loss_value = g.value(dl).data()[0];
        let decoder_grads = g.backward(dl)?;

        let signals: Vec<f64> = rewards.iter().zip(&samples.log_q).map(|(r, lq)| r - beta * lq).collect();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let tokens = encoder.embed_inputs(&mut g, &self.store, xv)?;
        let lq = encoder.log_prob_rows(&mut g, &self.store, tokens, &samples.rows, &samples.codes)?;
        let el = reinforce_loss(&mut g, &signals, lq, k)?;
        let encoder_loss_value = g.value(el).data()[0];
        let encoder_grads = g.backward(el)?;

        let stats = batch_stats(&rewards, &samples.log_q, f64::NAN, beta);
        if !encoder_loss_value.is_finite() || !decoder_loss_value.is_finite() {
            return Err(self.fail("loss", stats));
        }
        self.check_grads("encoder gradient", &encoder_grads, &stats)?;
        self.check_grads("decoder gradient", &decoder_grads, &stats)?;
        self.encoder_opt.step(&mut self.store, &encoder_grads, lr);
        self.decoder_opt.step(&mut self.store, &decoder_grads, lr);
        Ok(StepReport {
            step: s,
            beta,
            lr,
            eta: None,
            tau: None,
            reward: -decoder_loss_value,
            encoder_loss: encoder_loss_value,
            decoder_loss: decoder_loss_value,
            eta_loss: None,
            ess_ratio: None,
            keys: None,
        })
    }

    fn gumbel_step(&mut self, x: &Tensor, beta: f64, lr: f64) -> Result<StepReport> {
        let Model::Policy { encoder, decoder } = &self.model else { unreachable!("policy model") };
        let (seed, s) = (self.cfg.run.seed, self.step);
        let tau = self.cfg.tau.at(s, self.cfg.run.steps);
        let (v, t) = (encoder.config().vocab, encoder.config().length);
        let n = x.shape()[0];
        let mut u = Vec::with_capacity(n * t * v);
        for i in 0..n {
            u.extend(uniforms(&mut stream(seed, s, Purpose::Gumbel, i as u64, 0), &[t, v]).into_data());
        }
        let u = Tensor::new(vec![n, t, v], u)?;

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let tokens = encoder.embed_inputs(&mut g, &self.store, xv)?;
        let rows: Vec<usize> = (0..n).collect();
        let sample = gumbel_encode(&mut g, &self.store, encoder, tokens, &rows, &u, GumbelConfig { tau, ..Default::default() })?;
        let f = decoder.features_one_hot(&mut g, &self.store, sample.one_hot)?;
        let ll = decoder.log_likelihood(&mut g, &self.store, f, xv)?;
        let mean_ll = g.mean_all(ll)?;
        let mean_kl = g.mean_all(sample.kl)?;
        let nll = g.neg(mean_ll)?;
        let weighted = g.scale(mean_kl, beta)?;
        let loss = g.add(nll, weighted)?;
        let (reward, kl, total) = (g.value(mean_ll).data()[0], g.value(mean_kl).data()[0], g.value(loss).data()[0]);
        if !total.is_finite() {
            return Err(self.fail("loss", format!("reward={reward} kl={kl} beta={beta} tau={tau}")));
        }
        let grads = g.backward(loss)?;
        self.check_grads("gradient", &grads, &format!("reward={reward} kl={kl}"))?;
        self.encoder_opt.step(&mut self.store, &grads, lr);
        self.decoder_opt.step(&mut self.store, &grads, lr);
        Ok(StepReport {
            step: s,
            beta,
            lr,
            eta: None,
            tau: Some(tau),
            reward,
            encoder_loss: total,
            decoder_loss: -reward,
            eta_loss: None,
            ess_ratio: None,
            keys: None,
        })
    }

    fn vq_step(&mut self, x: &Tensor, beta: f64, lr: f64) -> Result<StepReport> {
        let Model::Vq { encoder, codebook, decoder } = &self.model else { unreachable!("vq model") };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let z = encoder.forward(&mut g, &self.store, xv)?;
        let cb = g.param(&self.store, codebook.id);
        let l = vq_vae_loss(&mut g, &self.store, decoder, z, cb, xv, self.cfg.vq.commitment)?;
        let recon = g.value(l.reconstruction).data()[0];
        let total = g.value(l.total).data()[0];
        if !total.is_finite() {
            return Err(self.fail("loss", format!("reconstruction={recon} total={total}")));
        }
        let grads = g.backward(l.total)?;
        self.check_grads("gradient", &grads, &format!("reconstruction={recon}"))?;
        self.encoder_opt.step(&mut self.store, &grads, lr);
        self.decoder_opt.step(&mut self.store, &grads, lr);
        Ok(StepReport {
            step: self.step,
            beta,
            lr,
            eta: None,
            tau: None,
            reward: -recon,
            encoder_loss: total - recon,
            decoder_loss: recon,
            eta_loss: None,
            ess_ratio: None,
            keys: None,
        })
    }

    /// Estimates on the rows of `x` with `K` samples per row, drawn from a
    /// fixed eval stream so repeated evaluations see the same noise.
    pub fn evaluate(&self, x: &Tensor, beta: f64) -> Result<EvalStats> {
        let n = x.shape()[0];
        if n == 0 {
            return Err(Error::Invalid("cannot evaluate an empty split".into()));
        }
        let d = x.shape()[1];
        let decoder = self.model.decoder();
        let (vocab, length) = (decoder.config().vocab, decoder.config().length);
        let log_prior = length as f64 * (vocab as f64).ln();
        let (mut elbo_terms, mut neg_lq, mut lls) = (Vec::new(), Vec::new(), Vec::new());
        let (mut sq, mut correct) = (0.0, 0usize);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let xc = select_rows(x, &rows);
            let (codes, log_q, greedy, k) = self.eval_codes(&xc, start)?;
            let xr = repeat_rows(&xc, k);
            let mut g = Graph::no_grad();
            let xv = g.constant(xr.clone());
            let f = decoder.features(&mut g, &self.store, &codes)?;
            let ll = decoder.log_likelihood(&mut g, &self.store, f, xv)?;
            let mean = decoder.mean(&mut g, &self.store, f)?;
            for (a, b) in g.value(mean).data().iter().zip(xr.data()) {
                sq += (a - b) * (a - b) / k as f64;
            }
            for (l, q) in g.value(ll).data().iter().zip(&log_q) {
                lls.push(*l);
                neg_lq.push(-q);
                elbo_terms.push(l - beta * (q + log_prior));
            }
            if decoder.config().head == Head::Bernoulli {
                let mut g = Graph::no_grad();
                let f = decoder.features(&mut g, &self.store, &greedy)?;
                let mean = decoder.mean(&mut g, &self.store, f)?;
                correct += g.value(mean).data().iter().zip(xc.data()).filter(|(p, x)| (**p >= 0.5) == (**x >= 0.5)).count();
            }
        }
        let reward = mean(&lls);
        let entropy = mean(&neg_lq);
        Ok(EvalStats {
            rows: n,
            reward,
            kl: log_prior - entropy,
            entropy,
            elbo: mean(&elbo_terms),
            elbo_se: std_err(&elbo_terms),
            entropy_se: std_err(&neg_lq),
            l2: sq / (n * d) as f64,
            nll_per_dim: -reward / d as f64,
            accuracy: (decoder.config().head == Head::Bernoulli).then(|| correct as f64 / (n * d) as f64),
        })
    }

    /// Sampled codes with their log-probabilities, greedy codes, and the
    /// number of samples per row.
    fn eval_codes(&self, xc: &Tensor, offset: usize) -> Result<(Vec<LatentCode>, Vec<f64>, Vec<LatentCode>, usize)> {
        let seed = self.cfg.run.seed;
        match &self.model {
            Model::Policy { encoder, .. } => {
                let k = self.cfg.run.k;
                let s = encoder.sample(&self.store, xc, k, |i, j| {
                    stream(seed, 0, Purpose::Eval, (offset + i) as u64, j as u64)
                })?;
                let greedy = encoder.greedy(&self.store, xc)?;
                Ok((s.codes, s.log_q, greedy.codes, k))
            }
            Model::Vq { encoder, codebook, .. } => {
                let mut g = Graph::no_grad();
                let xv = g.constant(xc.clone());
                let z = encoder.forward(&mut g, &self.store, xv)?;
                let cb = g.param(&self.store, codebook.id);
                let q = vq_quantize(&mut g, z, cb)?;
                let lq = vec![0.0; q.codes.len()];
                Ok((q.codes.clone(), lq, q.codes, 1))
            }
        }
    }

    fn eval_split(&self) -> Result<EvalStats> {
        let val = match self.cfg.run.eval_rows {
            Some(r) if r < self.data.val.shape()[0] => select_rows(&self.data.val, &(0..r).collect::<Vec<_>>()),
            _ => self.data.val.clone(),
        };
        self.evaluate(&val, self.beta_at(self.step))
    }

    /// Metrics record for the current step, resetting the training window.
    pub fn record(&mut self) -> Result<MetricsRecord> {
        let e = self.eval_split()?;
        let w = std::mem::take(&mut self.window);
        let daps = self.eta.is_some();
        let last = self.step.saturating_sub(1);
        Ok(MetricsRecord {
            step: self.step,
            beta: self.beta_at(self.step),
            lr: self.lr_at(last),
            eta: self.eta(),
            tau: (self.cfg.run.method == Method::GumbelSt).then(|| self.cfg.tau.at(self.step, self.cfg.run.steps)),
            train_reward: w.mean(w.reward),
            encoder_loss: w.mean(w.encoder_loss),
            decoder_loss: w.mean(w.decoder_loss),
            eta_loss: daps.then(|| w.mean(w.eta_loss)),
            ess_ratio: daps.then(|| w.mean(w.ess_ratio)),
            val_reward: e.reward,
            val_elbo: e.elbo,
            val_kl: e.kl,
            val_entropy: e.entropy,
            val_l2: e.l2,
            val_nll_per_dim: e.nll_per_dim,
            val_accuracy: e.accuracy,
            wall_clock_s: self.cfg.run.record_wall_clock.then(|| self.started.elapsed().as_secs_f64()),
        })
    }

    /// Takes one step and returns a record when the eval cadence or the last
    /// step is reached.
    pub fn advance(&mut self) -> Result<(StepReport, Option<MetricsRecord>)> {
        let report = self.train_step()?;
        let due = self.step % self.cfg.run.eval_every == 0 || self.step == self.cfg.run.steps;
        let record = if due { Some(self.record()?) } else { None };
        Ok((report, record))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut specs = Vec::new();
        let mut arrays = Vec::new();
        for (_, name, t) in self.store.iter() {
            specs.push(ArraySpec { name: format!("param/{name}"), shape: t.shape().to_vec() });
            arrays.push(t.clone());
        }
        for (tag, opt) in [("encoder_opt", &self.encoder_opt), ("decoder_opt", &self.decoder_opt)] {
            for ((id, m), v) in opt.ids.iter().zip(&opt.m).zip(&opt.v) {
                let name = self.store.name(*id);
                specs.push(ArraySpec { name: format!("{tag}.m/{name}"), shape: m.shape().to_vec() });
                arrays.push(m.clone());
                specs.push(ArraySpec { name: format!("{tag}.v/{name}"), shape: v.shape().to_vec() });
                arrays.push(v.clone());
            }
        }
        let trainer = TrainerScalars {
            encoder_opt: self.encoder_opt.state(&self.store),
            decoder_opt: self.decoder_opt.state(&self.store),
            encoder_lr_scale: self.encoder_lr_scale,
            low_ess_streak: self.low_ess_streak,
            guard_step: self.guard_step,
            window: self.window.clone(),
        };
        Checkpoint { header: Header { config: self.cfg.identity(), step: self.step, arrays: specs, trainer }, arrays }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Rebuilds the trainer for `cfg` and restores the checkpointed state.
    /// The checkpoint must come from the same configuration, output paths aside.
    pub fn resume(cfg: Config, path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.header.config != cfg.identity() {
            return Err(Error::Config(format!("{} was written by a different configuration", path.display())));
        }
        let mut t = Self::new(cfg)?;
        t.restore(&ck, path)?;
        Ok(t)
    }

    /// Restores state into a trainer built from the checkpoint's own config.
    pub fn from_checkpoint(ck: &Checkpoint, path: &Path, data: Dataset) -> Result<Self> {
        let mut t = Self::with_data(ck.header.config.clone(), data)?;
        t.restore(ck, path)?;
        Ok(t)
    }

    fn restore(&mut self, ck: &Checkpoint, path: &Path) -> Result<()> {
        let mismatch = |what: String| Error::format(path, what);
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let key = format!("param/{}", self.store.name(id));
            let t = ck.array(&key).ok_or_else(|| mismatch(format!("missing {key}")))?;
            if t.shape() != self.store.get(id).shape() {
                return Err(mismatch(format!("{key} has shape {:?}", t.shape())));
            }
            *self.store.get_mut(id) = t.clone();
        }
        let s = &ck.header.trainer;
        for (tag, opt, state) in [
            ("encoder_opt", &mut self.encoder_opt, &s.encoder_opt),
            ("decoder_opt", &mut self.decoder_opt, &s.decoder_opt),
        ] {
            opt.t = state.t;
            for ((id, m), v) in opt.ids.iter().zip(&mut opt.m).zip(&mut opt.v) {
                let name = self.store.name(*id);
                for (kind, dst) in [("m", &mut *m), ("v", &mut *v)] {
                    let key = format!("{tag}.{kind}/{name}");
                    let t = ck.array(&key).ok_or_else(|| mismatch(format!("missing {key}")))?;
                    if t.shape() != dst.shape() {
                        return Err(mismatch(format!("{key} has shape {:?}", t.shape())));
                    }
                    *dst = t.clone();
                }
            }
        }
        self.step = ck.header.step;
        self.encoder_lr_scale = s.encoder_lr_scale;
        self.low_ess_streak = s.low_ess_streak;
        self.guard_step = s.guard_step;
        self.window = s.window.clone();
        Ok(())
    }
}

/// Outcome of [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub records: Vec<MetricsRecord>,
    pub checkpoint: PathBuf,
    pub guard_step: Option<u64>,
}

/// Trains to `run.steps`, streaming metrics to `run.metrics` and writing the
/// final checkpoint to `run.checkpoint`. With `run.resume` set, training
/// continues from that checkpoint and metrics are appended.
pub fn run(cfg: Config) -> Result<RunSummary> {
    let resuming = cfg.run.resume.clone();
    let mut trainer = match &resuming {
        Some(p) => Trainer::resume(cfg.clone(), p)?,
        None => Trainer::new(cfg.clone())?,
    };
    let mut writer = MetricsWriter::open(&cfg.run.metrics, resuming.is_some())?;
    let mut records = Vec::new();
    while trainer.step() < cfg.run.steps {
        if let (_, Some(rec)) = trainer.advance()? {
            writer.write(&rec)?;
            records.push(rec);
        }
    }
    trainer.save(&cfg.run.checkpoint)?;
    Ok(RunSummary { steps: trainer.step(), records, checkpoint: cfg.run.checkpoint.clone(), guard_step: trainer.guard_step() })
}

fn repeat_rows(x: &Tensor, k: usize) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(n * k * d);
    for row in x.data().chunks(d) {
        for _ in 0..k {
            data.extend_from_slice(row);
        }
    }
    Tensor::new(vec![n * k, d], data).expect("shape")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_err(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

fn batch_stats(rewards: &[f64], log_q: &[f64], eta: f64, beta: f64) -> String {
    let range = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let bad = v.iter().filter(|x| !x.is_finite()).count();
        format!("[{lo}, {hi}] ({bad} non-finite)")
    };
    format!("rewards {} log_q {} eta={eta} beta={beta}", range(rewards), range(log_q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{exact_elbo, DEFAULT_CAP};

    fn toml(method: &str, steps: u64, extra: &str) -> String {
        format!(
            r#"
            [run]
            method = "{method}"
            seed = 7
            steps = {steps}
            batch_size = 16
            k = 4
            eval_every = 2
            {extra}

            [beta]
            initial = 1.0
            final = 0.1

            [model]
            vocab = 3
            length = 2
            hidden = 8
            layers = 1
            heads = 2
            decoder_embed = 4
            decoder_hidden = 8

            [data]
            kind = "synthetic_bits"
            patterns = 8
            dim = 6
            samples = 128
            "#
        )
    }

    fn trainer(method: &str, steps: u64) -> Trainer {
        Trainer::new(Config::from_toml(&toml(method, steps, "")).unwrap()).unwrap()
    }

    fn set(t: &mut Trainer, name: &str, f: impl Fn(usize) -> f64) {
        let id = t.store.id(name).unwrap();
        for (i, v) in t.store.get_mut(id).data_mut().iter_mut().enumerate() {
            *v = f(i);
        }
    }

    #[test]
    fn gradient_maps_are_disjoint_per_loss() {
        let mut t = trainer("daps", 5);
        for _ in 0..3 {
            let keys = t.train_step().unwrap().keys.unwrap();
            assert!(keys.disjoint());
            assert!(!keys.encoder.is_empty() && keys.encoder.iter().all(|k| k.starts_with("encoder.")));
            assert!(!keys.decoder.is_empty() && keys.decoder.iter().all(|k| k.starts_with("decoder.")));
            assert_eq!(keys.eta.iter().map(String::as_str).collect::<Vec<_>>(), [crate::engine::LOG_ETA]);
        }
    }

    #[test]
    fn zero_learning_rates_leave_parameters_unchanged() {
        let extra = "";
        let text = toml("daps", 3, extra).replace("[beta]", "[optim]\nlr = 0.0\neta_lr = 0.0\n\n[beta]");
        let mut t = Trainer::new(Config::from_toml(&text).unwrap()).unwrap();
        let before = t.store.clone();
        t.train_step().unwrap();
        assert_eq!(t.store, before);
    }

    #[test]
    fn same_seed_gives_identical_records() {
        let run = || {
            let mut t = trainer("daps", 6);
            (0..6).filter_map(|_| t.advance().unwrap().1).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn checkpoint_round_trip_continues_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let mut a = trainer("daps", 8);
        for _ in 0..3 {
            a.train_step().unwrap();
        }
        a.save(&path).unwrap();
        let cfg = a.config().clone();
        let mut b = Trainer::resume(cfg, &path).unwrap();
        assert_eq!(b.step(), 3);
        assert_eq!(b.store, a.store);
        let (ra, rb) = (a.advance().unwrap(), b.advance().unwrap());
        assert_eq!(ra, rb);
        assert_eq!(a.store, b.store);
        assert_eq!(a.encoder_opt, b.encoder_opt);
        assert_eq!(a.decoder_opt, b.decoder_opt);
    }

    #[test]
    fn resume_rejects_a_different_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        trainer("daps", 4).save(&path).unwrap();
        let mut other = Config::from_toml(&toml("daps", 4, "")).unwrap();
        other.run.seed = 8;
        assert!(matches!(Trainer::resume(other, &path).err(), Some(Error::Config(_))));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        let same = Config::from_toml(&toml("daps", 4, "")).unwrap();
        let err = Trainer::resume(same, &path).err().expect("truncated checkpoint");
        assert!(err.to_string().contains("payload size"), "{err}");
    }

    #[test]
    fn zero_steps_writes_checkpoint_and_empty_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let extra = format!(
            "metrics = {:?}\ncheckpoint = {:?}",
            dir.path().join("m.jsonl"),
            dir.path().join("c.ckpt")
        );
        let summary = run(Config::from_toml(&toml("daps", 0, &extra)).unwrap()).unwrap();
        assert_eq!(summary.steps, 0);
        assert!(summary.records.is_empty());
        assert_eq!(std::fs::read(dir.path().join("m.jsonl")).unwrap().len(), 0);
        assert_eq!(Checkpoint::load(&dir.path().join("c.ckpt")).unwrap().header.step, 0);
    }

    #[test]
    fn beta_and_lr_schedules() {
        let text = toml("daps", 100, "").replace("initial = 1.0\n            final = 0.1", "initial = 6.0\nfinal = 0.6");
        let t = Trainer::new(Config::from_toml(&text).unwrap()).unwrap();
        assert!((t.beta_at(50) - 3.3).abs() < 1e-12);
        let text = toml("daps", 100, "").replace("[beta]", "[optim]\nlr = 0.1\ncosine_decay = true\n\n[beta]");
        let t = Trainer::new(Config::from_toml(&text).unwrap()).unwrap();
        assert_eq!(t.lr_at(0), 0.1);
        assert!((t.lr_at(50) - 0.05).abs() < 1e-15);
        assert!(t.lr_at(100).abs() < 1e-15);
    }

    #[test]
    fn batches_walk_a_permutation_per_epoch() {
        let mut t = trainer("daps", 10);
        let n = t.data.train.shape()[0];
        let b = t.cfg.run.batch_size;
        let mut seen: Vec<usize> = (0..(n / b) as u64).flat_map(|s| t.batch_indices(s)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), (n / b) * b);
        let again = t.batch_indices(3);
        assert_eq!(again, trainer("daps", 10).batch_indices(3));
    }

    #[test]
    fn uniform_encoder_entropy_matches_closed_form() {
        let text = toml("daps", 1, "").replace("vocab = 3\n            length = 2", "vocab = 4\nlength = 3").replace("k = 4", "k = 64");
        let mut t = Trainer::new(Config::from_toml(&text).unwrap()).unwrap();
        set(&mut t, "encoder.head.w", |_| 0.0);
        set(&mut t, "encoder.head.b", |_| 0.0);
        let e = t.evaluate(&t.data.val.clone(), 1.0).unwrap();
        let exact = 3.0 * 4f64.ln();
        assert!((e.entropy - exact).abs() <= 3.0 * e.entropy_se.max(1e-12), "{} vs {exact}", e.entropy);
        assert!(e.kl.abs() < 1e-9);
    }

    #[test]
    fn deterministic_encoder_has_zero_entropy() {
        let mut t = trainer("daps", 1);
        set(&mut t, "encoder.head.w", |_| 0.0);
        set(&mut t, "encoder.head.b", |i| if i == 0 { 800.0 } else { 0.0 });
        let e = t.evaluate(&t.data.val.clone(), 1.0).unwrap();
        assert_eq!(e.entropy, 0.0);
    }

    #[test]
    fn elbo_estimate_agrees_with_enumeration_after_a_step() {
        let text = toml("daps", 10, "").replace("k = 4", "k = 4000");
        let mut t = Trainer::new(Config::from_toml(&text).unwrap()).unwrap();
        t.train_step().unwrap();
        let x = select_rows(&t.data.val, &[0]);
        let beta = t.beta_at(t.step());
        let est = t.evaluate(&x, beta).unwrap();
        let exact = exact_elbo(&t.store, t.encoder().unwrap(), t.decoder(), x.data(), beta, DEFAULT_CAP).unwrap();
        assert!((est.elbo - exact.elbo).abs() <= 3.0 * est.elbo_se, "{} vs {} (se {})", est.elbo, exact.elbo, est.elbo_se);
    }

    #[test]
    fn guard_halves_encoder_lr_once() {
        let mut t = trainer("daps", 1);
        for _ in 0..GUARD_STEPS - 1 {
            t.guard(0.01);
        }
        t.guard(0.5);
        assert_eq!(t.low_ess_streak, 0);
        for _ in 0..GUARD_STEPS {
            t.guard(0.01);
        }
        assert_eq!(t.encoder_lr_scale, 0.5);
        assert!(t.guard_step.is_some());
        for _ in 0..GUARD_STEPS {
            t.guard(0.01);
        }
        assert_eq!(t.encoder_lr_scale, 0.5);
    }

    #[test]
    fn non_finite_rewards_abort_with_statistics() {
        let mut t = trainer("daps", 2);
        set(&mut t, "decoder.out.b", |_| f64::NAN);
        match t.train_step() {
            Err(Error::NonFinite { what, step, detail }) => {
                assert_eq!(step, 0);
                assert!(what.contains("rewards"));
                assert!(detail.contains("non-finite") && detail.contains("eta="), "{detail}");
            }
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn baselines_take_finite_steps() {
        for method in ["gumbel_st", "reinforce", "vq_vae"] {
            let mut t = trainer(method, 4);
            let before = t.store.clone();
            let mut records = 0;
            for _ in 0..4 {
                let (r, rec) = t.advance().unwrap();
                assert!(r.reward.is_finite() && r.encoder_loss.is_finite() && r.decoder_loss.is_finite(), "{method}");
                assert!(r.keys.is_none() && r.eta.is_none());
                records += usize::from(rec.is_some());
            }
            assert_eq!(records, 2);
            assert_ne!(t.store, before, "{method}");
        }
    }
}
