//! Reference computations written directly from the definitions, kept apart
//! from the library so the checks do not share code with what they check.

#![allow(dead_code)]

use daps::autodiff::{Graph, ParamStore, Var};
use daps::models::{Decoder, Encoder, LatentCode};
use daps::{Result, Tensor};

pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Every code of length `t` over `v` symbols, first position most significant.
pub fn all_codes(v: usize, t: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..t {
        out = out.into_iter().flat_map(|c| (0..v).map(move |s| [c.clone(), vec![s]].concat())).collect();
    }
    out
}

/// Normalized `q*(z) ∝ q(z)^(eta/(eta+beta)) exp(A(z)/(eta+beta))`.
pub fn qstar(adv: &[f64], q: &[f64], eta: f64, beta: f64) -> Vec<f64> {
    let u: Vec<f64> = adv.iter().zip(q).map(|(a, q)| (a + eta * q.ln()) / (eta + beta)).collect();
    let z = logsumexp(&u);
    u.iter().map(|u| (u - z).exp()).collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p / q).ln()).sum()
}

/// Rényi-2 divergence `ln sum p^2 / q`.
pub fn d2(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(p, q)| p * p / q).sum::<f64>().ln()
}

/// `(eta + beta) ln sum_z q(z)^(eta/(eta+beta)) exp(A/(eta+beta)) + eta eps`.
pub fn dual(adv: &[f64], q: &[f64], eta: f64, beta: f64, eps: f64) -> f64 {
    let u: Vec<f64> = adv.iter().zip(q).map(|(a, q)| (a + eta * q.ln()) / (eta + beta)).collect();
    (eta + beta) * logsumexp(&u) + eta * eps
}

/// `(log q(z|x), log p(x|z))` for every code, one input row at a time.
pub fn enumerate(store: &ParamStore, enc: &Encoder, dec: &Decoder, x: &[f64]) -> Result<(Vec<Vec<usize>>, Vec<f64>, Vec<f64>)> {
    let (v, t) = (enc.config().vocab, enc.config().length);
    let codes = all_codes(v, t);
    let latent: Vec<LatentCode> = codes.iter().map(|c| LatentCode::new(c.clone(), v, t)).collect::<Result<_>>()?;
    let n = codes.len();
    let d = x.len();
    let mut g = Graph::no_grad();
    let xs = g.constant(Tensor::new(vec![n, d], x.repeat(n))?);
    let lq = enc.log_prob(&mut g, store, xs, &latent)?;
    let ll = dec.log_likelihood_codes(&mut g, store, &latent, xs)?;
    Ok((codes, g.value(lq).data().to_vec(), g.value(ll).data().to_vec()))
}

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over all
/// parameters, where `numeric` is the central difference of `reference`.
pub fn fd_relative_error<F, R>(store: &ParamStore, h: f64, f: F, reference: R) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    R: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    let grads = g.backward(root)?;
    let value = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::no_grad();
        let r = reference(&mut g, s)?;
        Ok(g.value(r).data()[0])
    };
    let mut work = store.clone();
    let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
    for id in store.ids() {
        let n = store.get(id).numel();
        let analytic = grads.get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let x0 = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = x0 + h;
            let up = value(&work)?;
            work.get_mut(id).data_mut()[i] = x0 - h;
            let down = value(&work)?;
            work.get_mut(id).data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            diff += (analytic[i] - numeric).powi(2);
            an += analytic[i].powi(2);
            nn += numeric * numeric;
        }
    }
    let scale = f64::sqrt(an).max(f64::sqrt(nn));
    Ok(if scale == 0.0 { 0.0 } else { f64::sqrt(diff) / scale })
}
