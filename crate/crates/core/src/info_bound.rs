//! Contrastive bounds on the mutual information between teacher and student
//! representations, and the cosine/L2 identity that links single-positive
//! contrastive transfer to feature alignment.

use alloc::vec::Vec;

use crate::tensor::{clamped_ln, dot, l2_norm};
use crate::{Error, Result};

/// Mean over positives `p_m` of
/// `−log( e^{a·p_m/τ} / (e^{a·p_m/τ} + Σ_k e^{a·n_k/τ}) )`.
pub fn info_nce_multi_positive(anchor: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    crate::tensor::check_tau(tau)?;
    if positives.is_empty() {
        return Err(Error::param("positives", "need at least one positive"));
    }
    if negatives.is_empty() {
        return Err(Error::param("negatives", "need at least one negative"));
    }
    let d = anchor.len();
    if positives.iter().chain(negatives).any(|v| v.len() != d) {
        return Err(Error::shape("info_nce_multi_positive", &[d], &[]));
    }
    let neg_logits: Vec<f64> = negatives.iter().map(|n| dot(anchor, n) / tau).collect();
    let mut total = 0.0;
    for p in positives {
        let pos = dot(anchor, p) / tau;
        let max = neg_logits.iter().cloned().fold(pos, f64::max);
        let denom = libm::exp(pos - max) + neg_logits.iter().map(|l| libm::exp(l - max)).sum::<f64>();
        total += libm::log(denom) - (pos - max);
    }
    Ok(total / positives.len() as f64)
}

/// A teacher/student representation pair. Positive pairs are drawn from the
/// joint distribution, negative pairs from the product of marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub positive: bool,
}

/// Density ratio `p(t, s) / (p(t) p(s))`.
pub trait Critic {
    fn density_ratio(&self, t: &[f64], s: &[f64]) -> f64;
}

/// Exact ratio for a standard bivariate Gaussian with correlation `rho`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianCritic {
    pub rho: f64,
}

impl Critic for GaussianCritic {
    fn density_ratio(&self, t: &[f64], s: &[f64]) -> f64 {
        let (x, y, r) = (t[0], s[0], self.rho);
        let one_m = 1.0 - r * r;
        let log_ratio = -0.5 * libm::log(one_m) - (r * r * (x * x + y * y) - 2.0 * r * x * y) / (2.0 * one_m);
        libm::exp(log_ratio)
    }
}

impl GaussianCritic {
    /// `−½ ln(1 − ρ²)` nats.
    pub fn true_mi(&self) -> f64 {
        -0.5 * libm::log(1.0 - self.rho * self.rho)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiBound {
    pub positives: usize,
    pub negatives: usize,
    /// `log(N_n / N_p)`.
    pub constant_term: f64,
    /// Mean of `log q(C=1 | t, s)` over positive pairs.
    pub expectation_term: f64,
    pub bound: f64,
}

/// `I(T; S) ≥ log(N_n/N_p) + E_{positives} log q(C=1 | t, s)` with the
/// posterior `q(C=1|t,s) = r / (r + N_n/N_p)` built from the critic's ratio
/// `r` and priors `q(C=1) = N_p/(N_p+N_n)`.
pub fn mi_lower_bound(samples: &[PairSample], critic: &impl Critic) -> Result<MiBound> {
    let np = samples.iter().filter(|s| s.positive).count();
    let nn = samples.len() - np;
    if np == 0 || nn == 0 {
        return Err(Error::param("samples", "need at least one positive and one negative pair"));
    }
    let odds = nn as f64 / np as f64;
    let mut acc = 0.0;
    for s in samples.iter().filter(|s| s.positive) {
        let r = critic.density_ratio(&s.t, &s.s);
        acc += clamped_ln(r / (r + odds));
    }
    let constant_term = libm::log(odds);
    let expectation_term = acc / np as f64;
    Ok(MiBound {
        positives: np,
        negatives: nn,
        constant_term,
        expectation_term,
        bound: constant_term + expectation_term,
    })
}

/// Draws `n_pos` joint pairs `(t, ρt + √(1−ρ²)z)` and `n_neg` independent
/// pairs from the 1-D standard Gaussian family.
pub fn gaussian_pairs(rho: f64, n_pos: usize, n_neg: usize, seed: u64) -> Vec<PairSample> {
    let mut rng = crate::rng::seeded(seed, crate::rng::streams::DATA);
    let c = libm::sqrt(1.0 - rho * rho);
    let mut out = Vec::with_capacity(n_pos + n_neg);
    for _ in 0..n_pos {
        let t = crate::rng::normal(&mut rng);
        let s = rho * t + c * crate::rng::normal(&mut rng);
        out.push(PairSample { t: alloc::vec![t], s: alloc::vec![s], positive: true });
    }
    for _ in 0..n_neg {
        let t = crate::rng::normal(&mut rng);
        let s = crate::rng::normal(&mut rng);
        out.push(PairSample { t: alloc::vec![t], s: alloc::vec![s], positive: false });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityCheck {
    /// `−a·b`.
    pub lhs: f64,
    /// `½‖a − b‖² − 1`.
    pub rhs: f64,
    pub gap: f64,
}

pub fn align_cosine_identity_check(a: &[f64], b: &[f64]) -> Result<IdentityCheck> {
    if a.len() != b.len() {
        return Err(Error::shape("align_cosine_identity_check", &[a.len()], &[b.len()]));
    }
    for (name, v) in [("a", a), ("b", b)] {
        if (l2_norm(v) - 1.0).abs() > 1e-10 {
            return Err(Error::param(name, "input must be a unit vector"));
        }
    }
    let lhs = -dot(a, b);
    let rhs = 0.5 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() - 1.0;
    Ok(IdentityCheck { lhs, rhs, gap: (lhs - rhs).abs() })
}
