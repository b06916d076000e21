//! Loss computations for the policy-search update and the baselines.
//!
//! Scalar helpers work on plain slices laid out datapoint-major (`i * K + k`);
//! the graph builders return differentiable scalars for the trainer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::models::{vq_quantize, Decoder, Encoder, LatentCode};
use crate::tensor::Tensor;

/// `A_k = r_k - logsumexp(r)`.
pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(rewards);
    rewards.iter().map(|r| r - lse).collect()
}

/// `(A + eta * log q) / (eta + beta)`.
pub fn log_qstar_unnorm(advantage: f64, log_q: f64, eta: f64, beta: f64) -> Result<f64> {
    check_temperatures(eta, beta)?;
    Ok((advantage + eta * log_q) / (eta + beta))
}

fn check_temperatures(eta: f64, beta: f64) -> Result<()> {
    if !(eta >= 0.0 && beta >= 0.0 && eta + beta > 0.0 && (eta + beta).is_finite()) {
        return Err(Error::Invalid(format!("need eta >= 0, beta >= 0 and eta + beta > 0, got eta={eta}, beta={beta}")));
    }
    Ok(())
}

/// Self-normalized weights `softmax_k(log_qstar_k - log_q_k)`.
pub fn importance_weights(log_qstar: &[f64], log_q: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = log_qstar.iter().zip(log_q).map(|(a, b)| a - b).collect();
    let lse = log_sum_exp(&logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// `(sum w)^2 / sum w^2` for one datapoint; weights need not be normalized.
pub fn ess(weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Invalid(format!("weights must be finite and non-negative: {weights:?}")));
    }
    let s: f64 = weights.iter().sum();
    if s == 0.0 {
        return Err(Error::Invalid("all-zero weight row".into()));
    }
    // Rescale first so tiny or huge rows do not under/overflow when squared.
    let m = weights.iter().cloned().fold(0.0, f64::max);
    let s = s / m;
    let s2: f64 = weights.iter().map(|w| (w / m) * (w / m)).sum();
    Ok(s * s / s2)
}

/// Batch mean of per-datapoint ESS over rows of length `k`.
pub fn ess_hat(weights: &[f64], k: usize) -> Result<f64> {
    if k == 0 || weights.is_empty() || weights.len() % k != 0 {
        return Err(Error::Invalid(format!("{} weights do not form rows of {k}", weights.len())));
    }
    let rows = weights.chunks(k).map(ess).collect::<Result<Vec<_>>>()?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Everything the update derives from one set of `K` samples per datapoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DapsBatchResult {
    pub k: usize,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub log_q: Vec<f64>,
    pub log_qstar: Vec<f64>,
    pub weights: Vec<f64>,
    pub ess: Vec<f64>,
    pub ess_ratio: f64,
    pub encoder_loss: f64,
    pub decoder_loss: f64,
    pub eta_loss: f64,
}

impl DapsBatchResult {
    pub fn compute(rewards: &[f64], log_q: &[f64], k: usize, eta: f64, beta: f64, rho_target: f64) -> Result<Self> {
        if k == 0 || rewards.is_empty() || rewards.len() % k != 0 || rewards.len() != log_q.len() {
            return Err(Error::Invalid(format!(
                "{} rewards and {} log-probs do not form rows of {k}",
                rewards.len(),
                log_q.len()
            )));
        }
        check_temperatures(eta, beta)?;
        let mut adv = Vec::with_capacity(rewards.len());
        let mut lqs = Vec::with_capacity(rewards.len());
        let mut weights = Vec::with_capacity(rewards.len());
        let mut ess_rows = Vec::with_capacity(rewards.len() / k);
        for (r, lq) in rewards.chunks(k).zip(log_q.chunks(k)) {
            let a = advantages(r);
            let s: Vec<f64> = a.iter().zip(lq).map(|(a, l)| (a + eta * l) / (eta + beta)).collect();
            let w = importance_weights(&s, lq);
            ess_rows.push(ess(&w)?);
            adv.extend(a);
            lqs.extend(s);
            weights.extend(w);
        }
        let m = rewards.len() as f64;
        let ess_ratio = ess_rows.iter().sum::<f64>() / ess_rows.len() as f64 / k as f64;
        let encoder_loss = -weights.iter().zip(log_q).map(|(w, l)| w * l).sum::<f64>() / m;
        let decoder_loss = -rewards.iter().sum::<f64>() / m;
        Ok(Self {
            k,
            rewards: rewards.to_vec(),
            advantages: adv,
            log_q: log_q.to_vec(),
            log_qstar: lqs,
            weights,
            ess: ess_rows,
            ess_ratio,
            encoder_loss,
            decoder_loss,
            eta_loss: (ess_ratio - rho_target).powi(2),
        })
    }

    pub fn datapoints(&self) -> usize {
        self.ess.len()
    }
}

/// `-(1/K) sum_k sg(w_k) log q_k`, averaged over datapoints.
pub fn encoder_loss(g: &mut Graph, weights: &[f64], log_q: Var) -> Result<Var> {
    weighted_nll(g, weights, log_q)
}

fn weighted_nll(g: &mut Graph, coef: &[f64], log_q: Var) -> Result<Var> {
    if g.shape(log_q) != [coef.len()] {
        return Err(Error::Invalid(format!("{} coefficients for log-probs of shape {:?}", coef.len(), g.shape(log_q))));
    }
    let c = g.constant(Tensor::from_vec(coef.to_vec()));
    let prod = g.mul(log_q, c)?;
    let total = g.sum_all(prod);
    Ok(g.scale(total, -1.0 / coef.len() as f64)?)
}

/// `-(1/K) sum_k r_k`, averaged over datapoints.
pub fn decoder_loss(g: &mut Graph, rewards: Var) -> Result<Var> {
    let m = g.mean_all(rewards)?;
    Ok(g.neg(m)?)
}

/// Leave-one-out baselined score-function loss. `signals` are the per-sample
/// returns (the trainer passes `r - beta * log q`); with `K < 2` the baseline
/// is zero.
pub fn reinforce_loss(g: &mut Graph, signals: &[f64], log_q: Var, k: usize) -> Result<Var> {
    if k == 0 || signals.len() % k != 0 {
        return Err(Error::Invalid(format!("{} signals do not form rows of {k}", signals.len())));
    }
    let coef: Vec<f64> = signals
        .chunks(k)
        .flat_map(|row| {
            let total: f64 = row.iter().sum();
            row.iter().map(move |r| if k < 2 { *r } else { r - (total - r) / (k - 1) as f64 })
        })
        .collect();
    weighted_nll(g, &coef, log_q)
}

/// `E[log p] - beta * KL`.
pub fn elbo(log_likelihood: f64, kl_to_prior: f64, beta: f64) -> f64 {
    log_likelihood - beta * kl_to_prior
}

/// Monte-Carlo KL to the uniform prior from own-sample log-probabilities.
pub fn kl_to_uniform_estimate(mean_log_q: f64, vocab: usize, length: usize) -> f64 {
    length as f64 * (vocab as f64).ln() + mean_log_q
}

/// Trainable trust-region multiplier, stored as `log eta` in the parameter store.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaController {
    pub param: ParamId,
    pub ess_target_ratio: f64,
    pub lr: f64,
}

pub const LOG_ETA: &str = "eta.log_eta";

impl EtaController {
    pub fn new(store: &mut ParamStore, eta_init: f64, ess_target_ratio: f64, lr: f64) -> Result<Self> {
        if !(eta_init > 0.0 && eta_init.is_finite()) {
            return Err(Error::Config(format!("eta init must be positive, got {eta_init}")));
        }
        let param = store.add(LOG_ETA, Tensor::scalar(eta_init.ln()));
        Self::attach(store, ess_target_ratio, lr).map(|c| Self { param, ..c })
    }

    pub fn attach(store: &ParamStore, ess_target_ratio: f64, lr: f64) -> Result<Self> {
        if !(ess_target_ratio > 0.0 && ess_target_ratio < 1.0) {
            return Err(Error::Config(format!("ESS target ratio must be in (0, 1), got {ess_target_ratio}")));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("eta learning rate must be finite and non-negative, got {lr}")));
        }
        let param = store.id(LOG_ETA).ok_or_else(|| Error::Invalid(format!("missing parameter {LOG_ETA}")))?;
        Ok(Self { param, ess_target_ratio, lr })
    }

    pub fn eta(&self, store: &ParamStore) -> f64 {
        store.get(self.param).data()[0].exp()
    }

    /// KL bound implied by the ESS target.
    pub fn kl_bound(&self) -> f64 {
        -self.ess_target_ratio.ln()
    }

    /// `(ESS/K - target)^2` with advantages and log-probs held constant, so
    /// the only path to `log eta` is through the weights.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, advantages: &[f64], log_q: &[f64], k: usize, beta: f64) -> Result<Var> {
        if k == 0 || advantages.is_empty() || advantages.len() % k != 0 || advantages.len() != log_q.len() {
            return Err(Error::Invalid(format!("{} advantages do not form rows of {k}", advantages.len())));
        }
        let n = advantages.len() / k;
        let a = g.constant(Tensor::new(vec![n, k], advantages.to_vec())?);
        let lq = g.constant(Tensor::new(vec![n, k], log_q.to_vec())?);
        let log_eta = g.param(store, self.param);
        let eta = g.exp(log_eta)?;
        let scaled = g.mul(lq, eta)?;
        let num = g.add(a, scaled)?;
        let denom = g.shift(eta, beta)?;
        let inv = g.recip(denom)?;
        let qstar = g.mul(num, inv)?;
        let logits = g.sub(qstar, lq)?;
        let w = g.softmax(logits, 1)?;
        let s = g.sum(w, 1)?;
        let s = g.square(s)?;
        let w2 = g.square(w)?;
        let s2 = g.sum(w2, 1)?;
        let s2 = g.recip(s2)?;
        let row_ess = g.mul(s, s2)?;
        let mean = g.mean_all(row_ess)?;
        let ratio = g.scale(mean, 1.0 / k as f64)?;
        let gap = g.shift(ratio, -self.ess_target_ratio)?;
        Ok(g.square(gap)?)
    }

    /// One SGD step on `log eta`.
    pub fn step(&self, store: &mut ParamStore, grad: &Tensor) {
        let v = store.get_mut(self.param);
        v.data_mut()[0] -= self.lr * grad.data()[0];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GumbelConfig {
    pub tau: f64,
    #[serde(default = "default_gumbel_eps")]
    pub eps: f64,
}

fn default_gumbel_eps() -> f64 {
    1e-10
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self { tau: 1.0, eps: default_gumbel_eps() }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.eps >= 0.0) {
            return Err(Error::Config(format!("gumbel needs tau > 0 and eps >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Straight-through Gumbel-Softmax over the last axis of `logits`. `uniforms`
/// has the same shape; the forward value is the one-hot argmax of
/// `logits + g` and the gradient is that of `softmax((logits + g) / tau)`.
pub fn gumbel_softmax_st(g: &mut Graph, logits: Var, uniforms: &Tensor, cfg: GumbelConfig) -> Result<(Var, Vec<usize>)> {
    cfg.validate()?;
    let shape = g.shape(logits).to_vec();
    if uniforms.shape() != shape.as_slice() {
        return Err(Error::Invalid(format!("uniforms {:?} do not match logits {shape:?}", uniforms.shape())));
    }
    let noise = uniforms.map(|u| -(-(u + cfg.eps).ln() + cfg.eps).ln());
    let noise = g.constant(noise);
    let perturbed = g.add(logits, noise)?;
    let scaled = g.scale(perturbed, 1.0 / cfg.tau)?;
    let soft = g.softmax(scaled, shape.len() - 1)?;
    let v = *shape.last().unwrap_or(&0);
    let mut hard = Tensor::zeros(&shape);
    let mut picks = Vec::new();
    for (lane, out) in g.value(perturbed).data().chunks(v).zip(hard.data_mut().chunks_mut(v)) {
        let mut best = 0;
        for (i, x) in lane.iter().enumerate() {
            if *x > lane[best] {
                best = i;
            }
        }
        out[best] = 1.0;
        picks.push(best);
    }
    Ok((g.straight_through(soft, hard)?, picks))
}

/// Uniform draws in `[0, 1)` of the given shape.
pub fn uniforms(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).expect("shape")
}

/// A relaxed sequence drawn position by position from the encoder.
#[derive(Debug, Clone)]
pub struct GumbelSample {
    /// Straight-through one-hots `[M, T, V]`.
    pub one_hot: Var,
    /// Analytic per-position KL to the uniform prior, summed over positions, `[M]`.
    pub kl: Var,
    pub codes: Vec<LatentCode>,
}

/// Autoregressive straight-through Gumbel sampling: each position conditions
/// on the relaxed one-hots of the earlier positions. `uniforms` is `[M, T, V]`.
pub fn gumbel_encode(
    g: &mut Graph,
    store: &ParamStore,
    encoder: &Encoder,
    x_tokens: Var,
    rows: &[usize],
    uniforms: &Tensor,
    cfg: GumbelConfig,
) -> Result<GumbelSample> {
    let (v, t) = (encoder.config().vocab, encoder.config().length);
    let m = rows.len();
    if uniforms.shape() != [m, t, v] {
        return Err(Error::Invalid(format!("uniforms {:?}, expected [{m}, {t}, {v}]", uniforms.shape())));
    }
    let mut one_hots: Vec<Var> = Vec::with_capacity(t);
    let mut kls: Vec<Var> = Vec::with_capacity(t);
    let mut picks = vec![Vec::with_capacity(t); m];
    for pos in 0..t {
        let prefix = if pos == 0 {
            None
        } else {
            let so_far = g.concat(&one_hots, 1)?;
            Some(encoder.embed_one_hot(g, store, so_far)?)
        };
        let logits = encoder.logits_with_prefix(g, store, x_tokens, rows, prefix, true)?;
        let lsm = g.log_softmax(logits, 2)?;
        let p = g.exp(lsm)?;
        let plogp = g.mul(p, lsm)?;
        let neg_h = g.sum(plogp, 2)?;
        let neg_h = g.reshape(neg_h, &[m])?;
        kls.push(g.shift(neg_h, (v as f64).ln())?);
        let u: Vec<f64> = (0..m).flat_map(|i| uniforms.data()[(i * t + pos) * v..(i * t + pos + 1) * v].to_vec()).collect();
        let u = Tensor::new(vec![m, 1, v], u)?;
        let (oh, pick) = gumbel_softmax_st(g, logits, &u, cfg)?;
        for (code, z) in picks.iter_mut().zip(pick) {
            code.push(z);
        }
        one_hots.push(oh);
    }
    let one_hot = g.concat(&one_hots, 1)?;
    let mut kl = kls[0];
    for term in &kls[1..] {
        kl = g.add(kl, *term)?;
    }
    Ok(GumbelSample { one_hot, kl, codes: picks.into_iter().map(LatentCode::from_raw).collect() })
}

/// Terms of the VQ-VAE objective, each averaged over datapoints.
#[derive(Debug, Clone)]
pub struct VqLoss {
    pub total: Var,
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub codes: Vec<LatentCode>,
}

/// Reconstruction NLL + `||sg(z) - e||^2` + `coef * ||z - sg(e)||^2`, with the
/// decoder reading the straight-through quantized vectors.
pub fn vq_vae_loss(
    g: &mut Graph,
    store: &ParamStore,
    decoder: &Decoder,
    z: Var,
    codebook: Var,
    x: Var,
    commitment_coef: f64,
) -> Result<VqLoss> {
    if !(commitment_coef >= 0.0) {
        return Err(Error::Config(format!("commitment coefficient must be >= 0, got {commitment_coef}")));
    }
    let q = vq_quantize(g, z, codebook)?;
    let n = g.shape(z)[0] as f64;

    let z_sg = g.stop_gradient(z);
    let d = g.sub(z_sg, q.selected)?;
    let d = g.square(d)?;
    let cb = g.sum_all(d);
    let cb = g.scale(cb, 1.0 / n)?;

    let e_sg = g.stop_gradient(q.selected);
    let d = g.sub(z, e_sg)?;
    let d = g.square(d)?;
    let commit = g.sum_all(d);
    let commit = g.scale(commit, 1.0 / n)?;

    let features = decoder.features_vectors(g, q.straight_through)?;
    let ll = decoder.log_likelihood(g, store, features, x)?;
    let ll = g.mean_all(ll)?;
    let recon = g.neg(ll)?;

    let weighted = g.scale(commit, commitment_coef)?;
    let total = g.add(recon, cb)?;
    let total = g.add(total, weighted)?;
    Ok(VqLoss { total, reconstruction: recon, codebook: cb, commitment: commit, codes: q.codes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, check_with_reference};
    use crate::models::{DecoderConfig, Head};
    use crate::oracle;
    use crate::rng::{stream, Purpose};
    use crate::suite::{random_pair, tiny_models};
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(advantages(&[-5.0]), vec![0.0]);
        for a in advantages(&[2.5; 4]) {
            assert!(close(a, -(4f64.ln()), 1e-15));
        }
        let a = advantages(&[0.0, 3f64.ln()]);
        assert!(close(a[0], -(4f64.ln()), 1e-15));
        assert!(close(a[1], 0.75f64.ln(), 1e-15));
    }

    #[test]
    fn log_qstar_examples() {
        assert!(close(log_qstar_unnorm(0.0, 0.5f64.ln(), 1.0, 1.0).unwrap(), 0.5 * 0.5f64.ln(), 1e-15));
        let lq = 0.3f64.ln();
        let limit = log_qstar_unnorm(-2.0, lq, 1e9, 1.0).unwrap();
        assert!(((limit - lq) / lq).abs() < 1e-6);
        assert!(log_qstar_unnorm(0.0, lq, 0.0, 0.0).is_err());
        assert!(log_qstar_unnorm(0.0, lq, -1.0, 2.0).is_err());
    }

    #[test]
    fn two_code_fixture_matches_enumeration() {
        let q = [0.7, 0.3];
        let a = advantages(&[0.0, -1.0]);
        let target = oracle::exact_qstar(&[0.0, -1.0], &q, 1.0, 1.0).unwrap();
        // Hand normalization of exp((A + ln q) / 2).
        let e: Vec<f64> = [0.0f64, -1.0].iter().zip(q).map(|(a, q)| ((a + q.ln()) / 2.0).exp()).collect();
        let z: f64 = e.iter().sum();
        for i in 0..2 {
            assert!(close(target.q_star[i], e[i] / z, 1e-15));
        }
        let lqs: Vec<f64> = a.iter().zip(q).map(|(a, q)| log_qstar_unnorm(*a, q.ln(), 1.0, 1.0).unwrap()).collect();
        let w = importance_weights(&lqs, &q.map(f64::ln));
        let ratio = [target.q_star[0] / q[0], target.q_star[1] / q[1]];
        let total = ratio[0] + ratio[1];
        for i in 0..2 {
            assert!(close(w[i], ratio[i] / total, 1e-10));
        }
    }

    #[test]
    fn weight_examples() {
        let lq = [-1.0, -2.0, -0.5];
        for w in importance_weights(&lq, &lq) {
            assert!(close(w, 1.0 / 3.0, 1e-15));
        }
        let s = [0.3, -4.0, 2.0];
        let shifted: Vec<f64> = s.iter().map(|v| v + 7.0).collect();
        let (a, b) = (importance_weights(&s, &lq), importance_weights(&shifted, &lq));
        for (x, y) in a.iter().zip(&b) {
            assert!(close(*x, *y, 1e-12));
        }
    }

    #[test]
    fn ess_examples() {
        assert!(close(ess_hat(&[0.25; 8], 4).unwrap(), 4.0, 1e-15));
        assert!(close(ess_hat(&[0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], 4).unwrap(), 1.0, 1e-15));
        assert!(close(ess(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 100.0 / 30.0, 1e-14));
        assert!(ess(&[0.0, 0.0]).is_err());
        assert!(ess_hat(&[1.0, 1.0, 0.0, 0.0], 2).is_err());
        assert!(ess_hat(&[1.0, 1.0, 1.0], 2).is_err());
    }

    #[test]
    fn eta_to_infinity_gives_uniform_weights() {
        let r = DapsBatchResult::compute(&[-3.0, 1.0, 0.2, -9.0], &[-0.1, -3.0, -1.5, -2.0], 4, 1e9, 1.0, 0.5).unwrap();
        assert!(r.weights.iter().all(|w| close(*w, 0.25, 1e-6)));
        assert!(DapsBatchResult::compute(&[0.0], &[0.0], 1, 0.0, 0.0, 0.5).is_err());
    }

    fn batch_strategy() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, f64, f64)> {
        (1usize..9, 1usize..5).prop_flat_map(|(k, n)| {
            (
                Just(k),
                proptest::collection::vec(-500.0f64..50.0, k * n),
                proptest::collection::vec(-30.0f64..0.0, k * n),
                -5.0f64..5.0,
                0.0f64..5.0,
            )
        })
    }

    proptest! {
        #[test]
        fn batch_invariants((k, r, lq, log_eta, beta) in batch_strategy()) {
            let b = DapsBatchResult::compute(&r, &lq, k, log_eta.exp(), beta, 0.5).unwrap();
            for row in b.weights.chunks(k) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|w| *w >= 0.0));
            }
            prop_assert!(b.advantages.iter().all(|a| *a <= 0.0));
            if k == 1 {
                prop_assert!(b.advantages.iter().all(|a| *a == 0.0));
            }
            for e in &b.ess {
                prop_assert!(*e >= 1.0 - 1e-12 && *e <= k as f64 + 1e-12);
            }
            // ESS from unnormalized ratios equals ESS from normalized weights.
            for ((lqs_row, lq_row), e) in b.log_qstar.chunks(k).zip(lq.chunks(k)).zip(&b.ess) {
                let raw: Vec<f64> = lqs_row.iter().zip(lq_row).map(|(s, l)| (s - l).exp()).collect();
                if raw.iter().all(|v| v.is_finite() && *v > 0.0) {
                    prop_assert!((ess(&raw).unwrap() - e).abs() <= 1e-12 * k as f64);
                }
            }
        }

        #[test]
        fn ess_is_scale_invariant(w in proptest::collection::vec(0.01f64..10.0, 1..10), c in 1e-3f64..1e3) {
            let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
            prop_assert!((ess(&w).unwrap() - ess(&scaled).unwrap()).abs() <= 1e-12 * w.len() as f64);
        }
    }

    fn encoder_fixture() -> (ParamStore, Encoder, Tensor, Vec<LatentCode>, Vec<usize>) {
        let (store, enc, _) = tiny_models(3, 2, 4, 5, 0.5).unwrap();
        let x = crate::rng::truncated_normal(&mut stream(1, 0, Purpose::Eval, 0, 0), &[2, 4], 1.0);
        let s = enc.sample(&store, &x, 3, |i, k| stream(2, 0, Purpose::Latent, i as u64, k as u64)).unwrap();
        (store, enc, x, s.codes, s.rows)
    }

    fn log_q_var(g: &mut Graph, store: &ParamStore, enc: &Encoder, x: &Tensor, codes: &[LatentCode], rows: &[usize]) -> Var {
        let xv = g.constant(x.clone());
        let tok = enc.embed_inputs(g, store, xv).unwrap();
        enc.log_prob_rows(g, store, tok, rows, codes).unwrap()
    }

    /// Every parameter gradient, flattened in store order.
    fn grads_of(f: impl Fn(&mut Graph) -> Var) -> Vec<f64> {
        let mut g = Graph::new();
        let root = f(&mut g);
        let grads = g.backward(root).unwrap();
        grads.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
    }

    #[test]
    fn uniform_weights_give_average_nll_gradient() {
        let (store, enc, x, codes, rows) = encoder_fixture();
        let m = codes.len();
        let weighted = grads_of(|g| {
            let lq = log_q_var(g, &store, &enc, &x, &codes, &rows);
            encoder_loss(g, &vec![1.0 / 3.0; m], lq).unwrap()
        });
        let plain = grads_of(|g| {
            let lq = log_q_var(g, &store, &enc, &x, &codes, &rows);
            let mean = g.mean_all(lq).unwrap();
            let nll = g.neg(mean).unwrap();
            g.scale(nll, 1.0 / 3.0).unwrap()
        });
        assert_eq!(weighted.len(), plain.len());
        for (a, b) in weighted.iter().zip(&plain) {
            assert!(close(*a, *b, 1e-14));
        }
    }

    #[test]
    fn selected_weight_gives_single_sample_gradient_over_k() {
        let (store, enc, x, codes, rows) = encoder_fixture();
        let mut w = vec![0.0; codes.len()];
        w[4] = 1.0;
        let weighted = grads_of(|g| {
            let lq = log_q_var(g, &store, &enc, &x, &codes, &rows);
            encoder_loss(g, &w, lq).unwrap()
        });
        let single = grads_of(|g| {
            let lq = log_q_var(g, &store, &enc, &x, &codes[4..5], &rows[4..5]);
            let s = g.sum_all(lq);
            // Batch of 2 datapoints with K = 3.
            g.scale(s, -1.0 / 6.0).unwrap()
        });
        for (a, b) in weighted.iter().zip(&single) {
            assert!(close(*a, *b, 1e-14));
        }
    }

    #[test]
    fn encoder_loss_matches_finite_differences() {
        let (store, enc, x, codes, rows) = encoder_fixture();
        let w = [0.1, 0.6, 0.3, 0.2, 0.2, 0.6];
        let c = check(&store, 1e-6, |g, s| {
            let lq = log_q_var(g, s, &enc, &x, &codes, &rows);
            encoder_loss(g, &w, lq)
        })
        .unwrap();
        assert!(c.relative_error <= 1e-6, "{c:?}");
    }

    #[test]
    fn decoder_loss_examples() {
        let mut g = Graph::new();
        let r = g.constant(Tensor::from_vec(vec![-3.5]));
        let l = decoder_loss(&mut g, r).unwrap();
        assert_eq!(g.value(l).data(), [3.5]);

        // Gaussian head: the output bias gradient is -sum_m (x - mu) / sigma^2 / K.
        let cfg = DecoderConfig { vocab: 3, length: 2, embed: 2, hidden: 4, output_dim: 2, head: Head::Gaussian };
        let mut store = ParamStore::new();
        let dec = Decoder::new(cfg, &mut store, &mut stream(3, 0, Purpose::Init, 0, 0)).unwrap();
        let codes = [LatentCode::from_raw(vec![0, 1]), LatentCode::from_raw(vec![2, 2])];
        let xdata = vec![0.5, -0.2, 0.1, 0.9];
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], xdata.clone()).unwrap());
        let f = dec.features(&mut g, &store, &codes).unwrap();
        let mu = dec.output(&mut g, &store, f).unwrap();
        let ll = dec.log_likelihood(&mut g, &store, f, x).unwrap();
        let loss = decoder_loss(&mut g, ll).unwrap();
        let grads = g.backward(loss).unwrap();
        let var = 0.01 + 0.99 * 0.5;
        let mu = g.value(mu).data().to_vec();
        let bias = grads.get(store.id("decoder.out.b").unwrap()).unwrap();
        for d in 0..2 {
            let analytic: f64 = (0..2).map(|m| -(xdata[m * 2 + d] - mu[m * 2 + d]) / var / 2.0).sum();
            assert!(close(bias.data()[d], analytic, 1e-10));
        }
    }

    #[test]
    fn losses_do_not_cross_parameter_groups() {
        let (store, enc, dec) = tiny_models(3, 2, 4, 9, 0.5).unwrap();
        let x = Tensor::new(vec![1, 4], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let s = enc.sample(&store, &x, 4, |i, k| stream(0, 0, Purpose::Latent, i as u64, k as u64)).unwrap();

        let mut g = Graph::new();
        let xs = g.constant(Tensor::new(vec![4, 4], x.data().repeat(4)).unwrap());
        let r = dec.log_likelihood_codes(&mut g, &store, &s.codes, xs).unwrap();
        let l = decoder_loss(&mut g, r).unwrap();
        let grads = g.backward(l).unwrap();
        for (id, t) in grads.iter() {
            if store.name(id).starts_with("encoder.") {
                assert!(t.data().iter().all(|v| *v == 0.0), "{}", store.name(id));
            }
        }

        let mut g = Graph::new();
        let lq = log_q_var(&mut g, &store, &enc, &x, &s.codes, &s.rows);
        let l = encoder_loss(&mut g, &[0.4, 0.1, 0.2, 0.3], lq).unwrap();
        let grads = g.backward(l).unwrap();
        for (id, t) in grads.iter() {
            if store.name(id).starts_with("decoder.") {
                assert!(t.data().iter().all(|v| *v == 0.0), "{}", store.name(id));
            }
        }
    }

    fn eta_fixture(target: f64, eta: f64) -> (ParamStore, EtaController) {
        let mut store = ParamStore::new();
        let c = EtaController::new(&mut store, eta, target, 0.5).unwrap();
        (store, c)
    }

    fn eta_loss_and_grad(store: &ParamStore, c: &EtaController, a: &[f64], lq: &[f64], k: usize, beta: f64) -> (f64, f64) {
        let mut g = Graph::new();
        let l = c.loss(&mut g, store, a, lq, k, beta).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).data()[0], grads.get(c.param).unwrap().data()[0])
    }

    #[test]
    fn eta_loss_matches_batch_result() {
        let r = [-1.0, 0.5, -3.0, 2.0, 0.0, -0.7, -0.2, 1.1];
        let lq = [-0.3, -2.0, -1.0, -4.0, -1.5, -0.9, -2.2, -0.4];
        let (store, c) = eta_fixture(0.5, 0.8);
        let b = DapsBatchResult::compute(&r, &lq, 4, 0.8, 0.7, 0.5).unwrap();
        let (loss, _) = eta_loss_and_grad(&store, &c, &b.advantages, &lq, 4, 0.7);
        assert!(close(loss, b.eta_loss, 1e-12));
        let chk = check(&store, 1e-6, |g, s| c.loss(g, s, &b.advantages, &lq, 4, 0.7)).unwrap();
        assert!(chk.relative_error < 1e-6, "{chk:?}");
    }

    #[test]
    fn eta_fixed_point_and_direction() {
        let r = [-1.0, 0.5, -3.0, 2.0];
        let lq = [-0.3, -2.0, -1.0, -4.0];
        let a = advantages(&r);
        let beta = 0.5;
        let rho = |eta: f64| DapsBatchResult::compute(&r, &lq, 4, eta, beta, 0.5).unwrap().ess_ratio;
        // Target equal to the current ratio.
        let target = rho(1.3);
        let (mut store, c) = eta_fixture(target, 1.3);
        let (loss, grad) = eta_loss_and_grad(&store, &c, &a, &lq, 4, beta);
        assert!(loss < 1e-28 && grad.abs() < 1e-12);
        let before = c.eta(&store);
        c.step(&mut store, &Tensor::scalar(grad));
        assert!(close(c.eta(&store), before, 1e-12));

        // ESS below target: the step must increase eta.
        let (mut store, c) = eta_fixture(0.95, 0.2);
        assert!(rho(0.2) < 0.95);
        let (_, grad) = eta_loss_and_grad(&store, &c, &a, &lq, 4, beta);
        let before = c.eta(&store);
        c.step(&mut store, &Tensor::scalar(grad));
        assert!(c.eta(&store) > before);
        assert!(close(c.kl_bound(), -(0.95f64).ln(), 1e-15));
    }

    #[test]
    fn eta_adapts_to_target_on_stationary_problem() {
        let mut rng = stream(4, 0, Purpose::Oracle, 0, 0);
        let (q, r) = random_pair(&mut rng, 12, 1.0, 2.0);
        let cdf: Vec<f64> = q
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        let (k, n, beta) = (8, 64, 0.5);
        let mut store = ParamStore::new();
        let c = EtaController::new(&mut store, 0.05, 0.5, 1.0).unwrap();
        let mut last = 0.0;
        for step in 0..500u64 {
            let mut rewards = Vec::new();
            let mut lq = Vec::new();
            for i in 0..n {
                let mut s = stream(5, step, Purpose::Latent, i, 0);
                for _ in 0..k {
                    let u: f64 = s.random();
                    let z = cdf.iter().position(|c| u < *c).unwrap_or(11);
                    rewards.push(r[z]);
                    lq.push(q[z].ln());
                }
            }
            let b = DapsBatchResult::compute(&rewards, &lq, k, c.eta(&store), beta, 0.5).unwrap();
            last = b.ess_ratio;
            let (_, grad) = eta_loss_and_grad(&store, &c, &b.advantages, &lq, k, beta);
            c.step(&mut store, &Tensor::scalar(grad));
            assert!(c.eta(&store) > 0.0 && c.eta(&store).is_finite());
        }
        assert!((last - 0.5).abs() <= 0.05, "final ESS ratio {last}");
    }

    #[test]
    fn eta_controller_rejects_bad_settings() {
        let mut store = ParamStore::new();
        assert!(EtaController::new(&mut store, 0.0, 0.5, 0.1).is_err());
        let mut store = ParamStore::new();
        assert!(EtaController::new(&mut store, 1.0, 1.0, 0.1).is_err());
        let mut store = ParamStore::new();
        assert!(EtaController::new(&mut store, 1.0, 0.5, -0.1).is_err());
    }

    #[test]
    fn gumbel_forward_is_one_hot() {
        let mut rng = stream(0, 0, Purpose::Gumbel, 0, 0);
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let (y, picks) = gumbel_softmax_st(&mut g, l, &uniforms(&mut rng, &[3, 5]), GumbelConfig::default()).unwrap();
        for (row, pick) in g.value(y).data().chunks(5).zip(picks) {
            assert_eq!(row.iter().filter(|v| **v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|v| **v == 0.0).count(), 4);
            assert_eq!(row[pick], 1.0);
        }
        assert!(GumbelConfig { tau: 0.0, eps: 1e-10 }.validate().is_err());
    }

    #[test]
    fn gumbel_max_frequencies() {
        let n = 100_000;
        let mut rng = stream(1, 0, Purpose::Gumbel, 0, 0);
        let logits = Tensor::new(vec![n, 2], [0.0, 3f64.ln()].repeat(n)).unwrap();
        let mut g = Graph::no_grad();
        let l = g.constant(logits);
        let (_, picks) = gumbel_softmax_st(&mut g, l, &uniforms(&mut rng, &[n, 2]), GumbelConfig::default()).unwrap();
        let freq = picks.iter().filter(|p| **p == 1).count() as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.01, "{freq}");
    }

    #[test]
    fn gumbel_gradient_is_soft_path_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("logits", Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.1, 0.0, 0.5, -0.5, 1.5]).unwrap());
        let u = uniforms(&mut stream(2, 0, Purpose::Gumbel, 0, 0), &[2, 4]);
        let cfg = GumbelConfig { tau: 0.7, eps: 1e-10 };
        let w = Tensor::new(vec![2, 4], vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.25, 2.0, -0.5]).unwrap();
        let build = |g: &mut Graph, s: &ParamStore, soft: bool| -> Result<Var> {
            let l = g.param(s, id);
            let y = if soft {
                let noise = g.constant(u.map(|u| -(-(u + cfg.eps).ln() + cfg.eps).ln()));
                let p = g.add(l, noise)?;
                let p = g.scale(p, 1.0 / cfg.tau)?;
                g.softmax(p, 1)?
            } else {
                gumbel_softmax_st(g, l, &u, cfg)?.0
            };
            let wv = g.constant(w.clone());
            let prod = g.mul(y, wv)?;
            Ok(g.sum_all(prod))
        };
        let st = grads_of(|g| build(g, &store, false).unwrap());
        let soft = grads_of(|g| build(g, &store, true).unwrap());
        for (a, b) in st.iter().zip(&soft) {
            assert!(close(*a, *b, 1e-12));
        }
        let c = check_with_reference(&store, 1e-6, |g, s| build(g, s, false), |g, s| build(g, s, true)).unwrap();
        assert!(c.relative_error < 1e-6);
    }

    #[test]
    fn reinforce_equal_rewards_give_zero_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("logits", Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap());
        let mut g = Graph::new();
        let l = g.param(&store, id);
        let lsm = g.log_softmax(l, 1).unwrap();
        let lq = g.gather(lsm, &[0, 2, 1, 1]).unwrap();
        let loss = reinforce_loss(&mut g, &[2.0; 4], lq, 4).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(id).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn reinforce_single_sample_is_plain_score_function() {
        let mut g = Graph::new();
        let lq = g.constant(Tensor::from_vec(vec![-0.5, -1.5]));
        let loss = reinforce_loss(&mut g, &[3.0, -2.0], lq, 1).unwrap();
        assert!(close(g.value(loss).data()[0], -(3.0 * -0.5 + -2.0 * -1.5) / 2.0, 1e-15));
    }

    #[test]
    fn reinforce_expectation_matches_exact_gradient() {
        // q = softmax(theta) over two codes, signal r - beta ln q.
        let theta = [0.4, -0.3];
        let r = [-1.0, 0.5];
        let beta = 0.3;
        let (k, batches) = (4usize, 100_000u64);
        let lse = log_sum_exp(&theta);
        let q: Vec<f64> = theta.iter().map(|t| (t - lse).exp()).collect();
        // d/dtheta_j sum_z q_z (r_z - beta ln q_z)
        let exact: Vec<f64> = (0..2)
            .map(|j| (0..2).map(|z| q[z] * (f64::from(u8::from(z == j)) - q[j]) * (r[z] - beta * q[z].ln() - beta)).sum())
            .collect();
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::new(vec![1, 2], theta.to_vec()).unwrap());
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for b in 0..batches {
            let mut rng = stream(6, b, Purpose::Latent, 0, 0);
            let z: Vec<usize> = (0..k).map(|_| usize::from(rng.random::<f64>() >= q[0])).collect();
            let signals: Vec<f64> = z.iter().map(|&z| r[z] - beta * q[z].ln()).collect();
            let mut g = Graph::new();
            let t = g.param(&store, id);
            let lsm = g.log_softmax(t, 1).unwrap();
            let rows: Vec<Var> = (0..k).map(|_| lsm).collect();
            let all = g.concat(&rows, 0).unwrap();
            let lq = g.gather(all, &z).unwrap();
            let loss = reinforce_loss(&mut g, &signals, lq, k).unwrap();
            let grad = g.backward(loss).unwrap();
            for j in 0..2 {
                // Descent objective: its gradient is minus the ELBO gradient.
                let v = -grad.get(id).unwrap().data()[j];
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        for j in 0..2 {
            let mean = sum[j] / batches as f64;
            let se = ((sq[j] / batches as f64 - mean * mean) / batches as f64).sqrt();
            assert!((mean - exact[j]).abs() <= 3.0 * se, "{j}: {mean} vs {} (se {se})", exact[j]);
        }
    }

    fn vq_fixture() -> (ParamStore, Decoder) {
        let cfg = DecoderConfig { vocab: 2, length: 1, embed: 1, hidden: 2, output_dim: 1, head: Head::Gaussian };
        let mut store = ParamStore::new();
        let dec = Decoder::new(cfg, &mut store, &mut stream(0, 0, Purpose::Init, 0, 0)).unwrap();
        // Constant decoder mean 0.5 keeps the reconstruction term hand-computable.
        let w = store.id("decoder.out.w").unwrap();
        *store.get_mut(w) = Tensor::zeros(&[2, 1]);
        let b = store.id("decoder.out.b").unwrap();
        store.get_mut(b).data_mut()[0] = 0.5;
        store.add("codebook", Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap());
        store.add("z", Tensor::new(vec![2, 1, 1], vec![0.2, -1.0]).unwrap());
        (store, dec)
    }

    #[test]
    fn vq_loss_hand_computed() {
        let (store, dec) = vq_fixture();
        let mut g = Graph::new();
        let z = g.param(&store, store.id("z").unwrap());
        let cb = g.param(&store, store.id("codebook").unwrap());
        let x = g.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        let l = vq_vae_loss(&mut g, &store, &dec, z, cb, x, 0.25).unwrap();
        assert_eq!(l.codes, vec![LatentCode::from_raw(vec![1]), LatentCode::from_raw(vec![0])]);
        // z = 0.2 -> e = 1 (squared residual 0.64); z = -1 -> e = -1.
        let sq = 0.64 / 2.0;
        // mu = 0.5, sigma^2 = 0.505, residuals +-0.5.
        let var: f64 = 0.01 + 0.99 * 0.5;
        let nll = 0.5 * (2.0 * std::f64::consts::PI * var).ln() + 0.25 / (2.0 * var);
        assert!(close(g.value(l.codebook).data()[0], sq, 1e-12));
        assert!(close(g.value(l.commitment).data()[0], sq, 1e-12));
        assert!(close(g.value(l.reconstruction).data()[0], nll, 1e-10));
        assert!(close(g.value(l.total).data()[0], nll + sq + 0.25 * sq, 1e-10));

        let gc = g.backward(l.codebook).unwrap();
        assert!(gc.get(store.id("z").unwrap()).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(gc.get(store.id("codebook").unwrap()).unwrap().data().iter().any(|v| *v != 0.0));
        let gm = g.backward(l.commitment).unwrap();
        assert!(gm.get(store.id("codebook").unwrap()).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(gm.get(store.id("z").unwrap()).unwrap().data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn vq_terms_vanish_on_codes() {
        let (mut store, dec) = vq_fixture();
        let zid = store.id("z").unwrap();
        store.get_mut(zid).data_mut().copy_from_slice(&[1.0, -1.0]);
        let mut g = Graph::new();
        let z = g.param(&store, zid);
        let cb = g.param(&store, store.id("codebook").unwrap());
        let x = g.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        let l = vq_vae_loss(&mut g, &store, &dec, z, cb, x, 0.25).unwrap();
        assert_eq!(g.value(l.codebook).data()[0], 0.0);
        assert_eq!(g.value(l.commitment).data()[0], 0.0);
    }

    #[test]
    fn elbo_examples() {
        assert_eq!(elbo(-12.5, 3.0, 0.0), -12.5);
        assert!(close(kl_to_uniform_estimate(-3.0 * 4f64.ln(), 4, 3), 0.0, 1e-15));
        let (store, enc, dec) = tiny_models(2, 2, 3, 1, 0.8).unwrap();
        let x = [1.0, 0.0, 1.0];
        let exact = oracle::exact_elbo(&store, &enc, &dec, &x, 0.7, oracle::DEFAULT_CAP).unwrap();
        assert!(close(elbo(exact.expected_log_likelihood, exact.kl, 0.7), exact.elbo, 1e-12));
    }

    #[test]
    fn gumbel_encode_codes_follow_one_hots() {
        let (store, enc, _) = tiny_models(3, 3, 4, 2, 0.5).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4], 0.5));
        let tok = enc.embed_inputs(&mut g, &store, x).unwrap();
        let u = uniforms(&mut stream(0, 0, Purpose::Gumbel, 0, 0), &[2, 3, 3]);
        let s = gumbel_encode(&mut g, &store, &enc, tok, &[0, 1], &u, GumbelConfig::default()).unwrap();
        let oh = g.value(s.one_hot).data().to_vec();
        for (m, code) in s.codes.iter().enumerate() {
            for (t, &z) in code.indices().iter().enumerate() {
                assert_eq!(oh[(m * 3 + t) * 3 + z], 1.0);
            }
        }
        assert!(g.value(s.kl).data().iter().all(|k| *k >= -1e-12));
    }
}
