//! Exact enumeration over small latent spaces.
//!
//! Used only to check the sampled estimators: normalized targets, partition
//! functions, divergences, population ESS, exact ELBO and the exact gradient
//! of the temperature dual.

use crate::autodiff::{log_sum_exp, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::models::{Decoder, Encoder, LatentCode};
use crate::tensor::Tensor;

pub const DEFAULT_CAP: usize = 1_000_000;
pub const LOG_ETA_RANGE: (f64, f64) = (-30.0, 30.0);
pub const BISECTION_ITERS: usize = 200;
pub const BISECTION_TOL: f64 = 1e-10;

/// All `V^T` codes in lexicographic order.
pub fn enumerate_latents(vocab: usize, length: usize, cap: usize) -> Result<Vec<LatentCode>> {
    let count = (vocab as f64).powi(length as i32);
    if vocab == 0 || count > cap as f64 {
        return Err(Error::EnumerationCap { count, cap });
    }
    let count = count as usize;
    Ok((0..count)
        .map(|mut n| {
            let mut idx = vec![0; length];
            for slot in idx.iter_mut().rev() {
                *slot = n % vocab;
                n /= vocab;
            }
            LatentCode::from_raw(idx)
        })
        .collect())
}

/// Normalized target over the full support.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactTarget {
    pub q_star: Vec<f64>,
    pub log_z: f64,
    pub lambda_star: f64,
    pub eta: f64,
    pub beta: f64,
}

fn check_support(q: &[f64]) -> Result<()> {
    if let Some((i, v)) = q.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Support(format!("proposal probability {v} at code {i} is not positive")));
    }
    Ok(())
}

/// `q* ∝ exp((A + eta log q) / (eta + beta))` with its log normalizer and the
/// matching multiplier `lambda* = (eta + beta) log Z - eta - beta`.
pub fn exact_qstar(advantages: &[f64], q_theta: &[f64], eta: f64, beta: f64) -> Result<ExactTarget> {
    if advantages.len() != q_theta.len() || q_theta.is_empty() {
        return Err(Error::Invalid(format!("{} advantages for {} codes", advantages.len(), q_theta.len())));
    }
    check_support(q_theta)?;
    if !(eta >= 0.0 && beta >= 0.0 && eta + beta > 0.0) {
        return Err(Error::Invalid(format!("need eta, beta >= 0 with eta + beta > 0, got {eta}, {beta}")));
    }
    let u: Vec<f64> = advantages.iter().zip(q_theta).map(|(a, q)| (a + eta * q.ln()) / (eta + beta)).collect();
    let log_z = log_sum_exp(&u);
    let q_star = u.iter().map(|u| (u - log_z).exp()).collect();
    Ok(ExactTarget { q_star, log_z, lambda_star: (eta + beta) * log_z - eta - beta, eta, beta })
}

/// `(KL(p || q), D_2(p || q))`.
pub fn exact_divergences(p: &[f64], q: &[f64]) -> Result<(f64, f64)> {
    if p.len() != q.len() {
        return Err(Error::Invalid(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    let (mut kl, mut chi) = (0.0, 0.0);
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi < 0.0 || qi < 0.0 {
            return Err(Error::Invalid(format!("negative probability at code {i}")));
        }
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::Support(format!("p({i}) = {pi} but q({i}) = 0")));
        }
        kl += pi * (pi / qi).ln();
    }
    // sum p^2/q = 1 + chi^2 for normalized inputs; the chi^2 form is exact at p = q.
    for (&pi, &qi) in p.iter().zip(q) {
        if qi > 0.0 {
            chi += (pi - qi) * (pi - qi) / qi;
        }
    }
    Ok((kl.max(0.0), chi.ln_1p()))
}

/// `exp(-D_2(q* || q))`.
pub fn population_ess_ratio(q_star: &[f64], q_theta: &[f64]) -> Result<f64> {
    Ok((-exact_divergences(q_star, q_theta)?.1).exp())
}

/// Population ESS ratio as a function of `eta`.
pub fn rho_of_eta(advantages: &[f64], q_theta: &[f64], beta: f64, eta: f64) -> Result<f64> {
    let t = exact_qstar(advantages, q_theta, eta, beta)?;
    population_ess_ratio(&t.q_star, q_theta)
}

/// Bisection on `log eta` for `rho(eta) = target`. The returned `eta` lies on
/// the side with `rho >= target`, so the implied KL bound holds.
pub fn solve_eta_for_target(advantages: &[f64], q_theta: &[f64], beta: f64, target: f64) -> Result<f64> {
    let rho = |log_eta: f64| rho_of_eta(advantages, q_theta, beta, log_eta.exp());
    let (mut lo, mut hi) = LOG_ETA_RANGE;
    let (low, high) = (rho(lo)?, rho(hi)?);
    if !(target > low && target <= high) {
        return Err(Error::TargetUnreachable { target, low, high });
    }
    let mut rho_hi = high;
    for _ in 0..BISECTION_ITERS {
        if (rho_hi - target).abs() <= BISECTION_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let r = rho(mid)?;
        if r >= target {
            hi = mid;
            rho_hi = r;
        } else {
            lo = mid;
        }
    }
    Ok(hi.exp())
}

/// `G(eta) = (eta + beta) log sum exp(u) + eta * eps`.
pub fn dual_value(advantages: &[f64], q_theta: &[f64], eta: f64, beta: f64, eps: f64) -> Result<f64> {
    let t = exact_qstar(advantages, q_theta, eta, beta)?;
    Ok((eta + beta) * t.log_z + eta * eps)
}

/// `dG/deta = eps - KL(q* || q)`.
pub fn exact_dual_gradient(advantages: &[f64], q_theta: &[f64], eta: f64, beta: f64, eps: f64) -> Result<f64> {
    let t = exact_qstar(advantages, q_theta, eta, beta)?;
    Ok(eps - exact_divergences(&t.q_star, q_theta)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactElbo {
    pub elbo: f64,
    pub expected_log_likelihood: f64,
    pub entropy: f64,
    pub kl: f64,
}

/// Per-code encoder probabilities and decoder log-likelihoods for one input row.
pub fn enumerate_model(
    store: &ParamStore,
    encoder: &Encoder,
    decoder: &Decoder,
    x: &[f64],
    cap: usize,
) -> Result<(Vec<LatentCode>, Vec<f64>, Vec<f64>)> {
    let (v, t) = (encoder.config().vocab, encoder.config().length);
    let codes = enumerate_latents(v, t, cap)?;
    let n = codes.len();
    let d = x.len();
    let mut g = Graph::no_grad();
    let xv = g.constant(Tensor::new(vec![1, d], x.to_vec())?);
    let tok = encoder.embed_inputs(&mut g, store, xv)?;
    let lq = encoder.log_prob_rows(&mut g, store, tok, &vec![0; n], &codes)?;
    let xs = g.constant(Tensor::new(vec![n, d], x.repeat(n))?);
    let ll = decoder.log_likelihood_codes(&mut g, store, &codes, xs)?;
    Ok((codes, g.value(lq).data().to_vec(), g.value(ll).data().to_vec()))
}

/// `sum_z q(z|x) log p(x|z) - beta (T ln V - H(q))` by enumeration.
pub fn exact_elbo(store: &ParamStore, encoder: &Encoder, decoder: &Decoder, x: &[f64], beta: f64, cap: usize) -> Result<ExactElbo> {
    let (v, t) = (encoder.config().vocab, encoder.config().length);
    let (_, lq, ll) = enumerate_model(store, encoder, decoder, x, cap)?;
    let expected: f64 = lq.iter().zip(&ll).map(|(l, r)| l.exp() * r).sum();
    let entropy: f64 = -lq.iter().map(|l| if *l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l }).sum::<f64>();
    let kl = (t as f64 * (v as f64).ln() - entropy).max(0.0);
    Ok(ExactElbo { elbo: expected - beta * kl, expected_log_likelihood: expected, entropy, kl })
}
