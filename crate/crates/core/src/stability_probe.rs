//! Stability of the random products `Γ_{1:n} = ∏(I − αA_k)` for TD updates:
//! Monte-Carlo moment estimates against the geometric envelope, and exact
//! expectations over the finite outcome space for the matrix inequalities
//! behind it.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::linalg;
use crate::lsa_core::LsaObservation;
use crate::mrp_model::{enumerate_transitions, td_a_matrix, FeatureMap, FiniteMrp, LsaInstance};
use crate::samplers::SeedSpec;
use crate::td_algorithms::{TdContext, TdStep};

/// Largest outcome space the exact expectations will enumerate.
pub const ENUMERATION_CAP: usize = 10_000_000;
/// Norms below this are treated as exact zeros.
pub const UNDERFLOW: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub n: usize,
    pub estimate: f64,
    pub ci_halfwidth: f64,
    pub envelope: f64,
    pub violation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Requested moment order.
    pub p: u32,
    /// Order actually estimated (`p` rounded up to even).
    pub p_used: u32,
    pub alpha: f64,
    pub replications: usize,
    pub rows: Vec<StabilityRow>,
    pub violations: usize,
}

impl StabilityReport {
    pub const CSV_HEADER: &'static str = "p,alpha,n,estimate,ci_halfwidth,envelope,violation_flag";

    pub fn horizons(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.n).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> Result<()> {
        if header {
            writeln!(w, "{}", Self::CSV_HEADER)?;
        }
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                self.p,
                crate::fmt_f64(self.alpha),
                r.n,
                crate::fmt_f64(r.estimate),
                crate::fmt_f64(r.ci_halfwidth),
                crate::fmt_f64(r.envelope),
                u8::from(r.violation)
            )?;
        }
        Ok(())
    }
}

/// Envelope `C(1 − αa)ⁿ‖u‖` against which moments are compared.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub a: f64,
    pub c: f64,
}

impl Envelope {
    /// TD constants: `a = (1−γ)λ_min/2`, `C = 1`.
    pub fn td(gamma: f64, lambda_min: f64) -> Self {
        Self { a: (1.0 - gamma) * lambda_min / 2.0, c: 1.0 }
    }

    pub fn at(&self, alpha: f64, n: usize, u_norm: f64) -> f64 {
        self.c * (1.0 - alpha * self.a).powf(n as f64) * u_norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub replications: usize,
    pub master_seed: u64,
    /// Half-width of the interval in standard errors.
    pub z: f64,
}

impl ProbeSettings {
    pub fn new(replications: usize, master_seed: u64) -> Self {
        Self { replications, master_seed, z: 4.0 }
    }
}

/// Monte-Carlo estimate of `E^{1/p}‖Γ_{1:n}u‖^p` for each `n`, compared to
/// the TD envelope. Requires `α ≤ (1−γ)/(128p)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_product_moment(
    instance: &LsaInstance,
    mrp: &FiniteMrp,
    features: &FeatureMap,
    alpha: f64,
    p: u32,
    n_list: &[usize],
    u: &DVector<f64>,
    settings: ProbeSettings,
) -> Result<StabilityReport> {
    let gamma = mrp.gamma();
    let cap = (1.0 - gamma) / (128.0 * f64::from(p.max(1)));
    if !(alpha >= 0.0 && alpha <= cap) {
        return Err(Error::Range(format!("alpha = {alpha} must lie in [0, (1-gamma)/(128p) = {cap}]")));
    }
    if (u.norm() - 1.0).abs() > 1e-12 {
        return arg_err(format!("u must be a unit vector (norm {})", u.norm()));
    }
    let envelope = Envelope::td(gamma, instance.lambda_min);
    estimate_product_moment_with(instance, mrp, features, alpha, p, n_list, u, settings, envelope)
}

/// As [`estimate_product_moment`] with caller-supplied envelope constants and
/// no step-size range check. Warns when `αp > 1/2`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_product_moment_with(
    instance: &LsaInstance,
    mrp: &FiniteMrp,
    features: &FeatureMap,
    alpha: f64,
    p: u32,
    n_list: &[usize],
    u: &DVector<f64>,
    settings: ProbeSettings,
    envelope: Envelope,
) -> Result<StabilityReport> {
    if p == 0 {
        return arg_err("moment order must be at least 1");
    }
    if n_list.is_empty() {
        return arg_err("no horizons given");
    }
    if settings.replications < 2 {
        return arg_err("need at least 2 replications");
    }
    if u.len() != features.dim() {
        return arg_err(format!("u has length {}, feature dimension is {}", u.len(), features.dim()));
    }
    if alpha * f64::from(p) > 0.5 {
        warn!("alpha * p = {} exceeds 1/2; the stability envelope is not guaranteed", alpha * f64::from(p));
    }
    let p_used = p + p % 2;
    let mut horizons: Vec<usize> = n_list.to_vec();
    horizons.sort_unstable();
    horizons.dedup();
    let n_max = *horizons.last().expect("nonempty");
    let ctx = TdContext::new(mrp, features, instance)?;
    let gamma = mrp.gamma();

    // norms[r][i] = ‖Γ_{1:n_i} u‖ in replication r
    let norms: Vec<Vec<f64>> = (0..settings.replications)
        .into_par_iter()
        .map(|r| {
            let mut stream = ctx.iid_stream(SeedSpec::new(settings.master_seed, r as u64));
            let mut v = u.clone();
            let mut av = vec![0.0; u.len()];
            let mut out = Vec::with_capacity(horizons.len());
            let mut next = 0;
            let mut zero = false;
            for k in 1..=n_max {
                if !zero {
                    let obs = stream.next().expect("endless stream");
                    TdStep { features, gamma, obs }.apply_a(v.as_slice(), &mut av);
                    for (x, a) in v.iter_mut().zip(&av) {
                        *x -= alpha * a;
                    }
                    if v.norm() < UNDERFLOW {
                        v.fill(0.0);
                        zero = true;
                    }
                }
                while next < horizons.len() && horizons[next] == k {
                    out.push(v.norm());
                    next += 1;
                }
            }
            out
        })
        .collect();

    let r_count = settings.replications as f64;
    let pf = f64::from(p_used);
    let rows: Vec<StabilityRow> = horizons
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let samples: Vec<f64> = norms.iter().map(|row| row[i].powf(pf)).collect();
            let mean = samples.iter().sum::<f64>() / r_count;
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r_count - 1.0);
            let se = (var / r_count).sqrt();
            let estimate = mean.powf(1.0 / pf);
            // delta method for m ↦ m^{1/p}
            let ci_halfwidth = if mean > 0.0 { settings.z * se * mean.powf(1.0 / pf - 1.0) / pf } else { 0.0 };
            let env = envelope.at(alpha, n, u.norm());
            StabilityRow { n, estimate, ci_halfwidth, envelope: env, violation: estimate - ci_halfwidth > env }
        })
        .collect();
    let violations = rows.iter().filter(|r| r.violation).count();
    Ok(StabilityReport { p, p_used, alpha, replications: settings.replications, rows, violations })
}

fn weighted_transitions(instance: &LsaInstance, mrp: &FiniteMrp, features: &FeatureMap) -> Result<Vec<(usize, usize, f64)>> {
    if features.num_states() != mrp.num_states() || instance.dim() != features.dim() {
        return arg_err("MRP, features and instance do not describe the same problem");
    }
    let outcomes = enumerate_transitions(mrp, &instance.mu);
    if outcomes.len() > ENUMERATION_CAP {
        return Err(Error::EnumerationCap { size: outcomes.len(), cap: ENUMERATION_CAP });
    }
    Ok(outcomes)
}

/// `E[f(A)]` over all `(s, s')` with weight `μ(s)P(s'|s)`; the TD matrix does
/// not depend on the reward, so reward atoms integrate out.
fn expect_over_a<F>(instance: &LsaInstance, mrp: &FiniteMrp, features: &FeatureMap, f: F) -> Result<DMatrix<f64>>
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let d = features.dim();
    let mut acc = DMatrix::zeros(d, d);
    for (s, sn, w) in weighted_transitions(instance, mrp, features)? {
        acc += f(&td_a_matrix(features, mrp.gamma(), s, sn)) * w;
    }
    Ok(linalg::symmetrize(&acc))
}

/// Exact `E[{(I−αA)ᵀ(I−αA)}^p]`. Requires `0 ≤ α ≤ (1−γ)/(64p)`.
pub fn expected_symmetrized_power(
    instance: &LsaInstance,
    mrp: &FiniteMrp,
    features: &FeatureMap,
    alpha: f64,
    p: u32,
) -> Result<DMatrix<f64>> {
    if p == 0 {
        return arg_err("p must be at least 1");
    }
    let cap = (1.0 - mrp.gamma()) / (64.0 * f64::from(p));
    if !(alpha >= 0.0 && alpha <= cap) {
        return Err(Error::Range(format!("alpha = {alpha} must lie in [0, (1-gamma)/(64p) = {cap}]")));
    }
    let d = features.dim();
    let eye = DMatrix::identity(d, d);
    expect_over_a(instance, mrp, features, |a| {
        let w = &eye - a * alpha;
        linalg::mat_pow(&(w.transpose() * &w), p)
    })
}

/// `B = A + Aᵀ − αAᵀA`.
pub fn b_matrix(a: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    a + a.transpose() - a.transpose() * a * alpha
}

/// Exact `E[B^p]`. Requires `0 ≤ α ≤ (1−γ)/(1+γ)²`.
pub fn expected_b_power(
    instance: &LsaInstance,
    mrp: &FiniteMrp,
    features: &FeatureMap,
    alpha: f64,
    p: u32,
) -> Result<DMatrix<f64>> {
    if p == 0 {
        return arg_err("p must be at least 1");
    }
    let g = mrp.gamma();
    let cap = (1.0 - g) / (1.0 + g).powi(2);
    if !(alpha >= 0.0 && alpha <= cap) {
        return Err(Error::Range(format!("alpha = {alpha} must lie in [0, (1-gamma)/(1+gamma)^2 = {cap}]")));
    }
    expect_over_a(instance, mrp, features, |a| linalg::mat_pow(&b_matrix(a, alpha), p))
}

/// `(uᵀBu)^p ≤ ‖u‖^{2p−2} uᵀB^p u` up to a relative tolerance of 1e-10.
pub fn check_power_inequality(b: &DMatrix<f64>, u: &DVector<f64>, p: u32) -> Result<bool> {
    if !p.is_power_of_two() {
        return arg_err(format!("p = {p} is not a power of two"));
    }
    if !b.is_square() || b.nrows() != u.len() {
        return arg_err("B must be square and match u");
    }
    if !linalg::is_symmetric(b, 1e-12 * (1.0 + b.amax())) {
        return arg_err("B is not symmetric");
    }
    let lhs = linalg::quad_form(b, u).powi(p as i32);
    let rhs = u.norm_squared().powi(p as i32 - 1) * linalg::quad_form(&linalg::mat_pow(b, p), u);
    Ok(lhs <= rhs + 1e-10 * (1.0 + lhs.abs() + rhs.abs()))
}

/// `(new, old)` thresholds: `(1−γ)/(128p)` and `min((1−γ)/(128p), (1−γ)λ_min/(64p))`.
pub fn old_threshold_comparison(gamma: f64, lambda_min: f64, p: f64) -> (f64, f64) {
    let new = (1.0 - gamma) / (128.0 * p);
    let old = new.min((1.0 - gamma) * lambda_min / (64.0 * p));
    (new, old)
}

/// Exact `E‖Γ_{1:n}u‖²` for each requested `n`, by propagating
/// `Q_k = E[(I−αA)ᵀ Q_{k−1} (I−αA)]` from `Q_0 = I`.
pub fn exact_second_moment(
    instance: &LsaInstance,
    mrp: &FiniteMrp,
    features: &FeatureMap,
    alpha: f64,
    n_list: &[usize],
    u: &DVector<f64>,
) -> Result<Vec<f64>> {
    let d = features.dim();
    let eye = DMatrix::identity(d, d);
    let factors: Vec<(DMatrix<f64>, f64)> = weighted_transitions(instance, mrp, features)?
        .into_iter()
        .map(|(s, sn, w)| (&eye - td_a_matrix(features, mrp.gamma(), s, sn) * alpha, w))
        .collect();
    let n_max = n_list.iter().copied().max().unwrap_or(0);
    let mut q = eye.clone();
    let mut by_n = vec![linalg::quad_form(&q, u)];
    for _ in 1..=n_max {
        let mut next = DMatrix::zeros(d, d);
        for (w, p) in &factors {
            next += w.transpose() * &q * w * *p;
        }
        q = linalg::symmetrize(&next);
        by_n.push(linalg::quad_form(&q, u));
    }
    Ok(n_list.iter().map(|&n| by_n[n]).collect())
}

/// Signed slacks of the exact inequalities at one moment order; each is
/// nonnegative when the inequality holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaSlacks {
    pub p: u32,
    pub alpha: f64,
    /// `λ_min((I − ½αp(1−γ)Σφ) − E[{(I−αA)ᵀ(I−αA)}^p])`.
    pub symmetrized_power: f64,
    /// `λ_min(E[B] − (1−γ)Σφ)`.
    pub b_mean_lower: f64,
    /// `λ_min((13/12)4^p Σφ − E[B^p])`.
    pub b_power_upper: f64,
}

impl LemmaSlacks {
    pub fn min_slack(&self) -> f64 {
        self.symmetrized_power.min(self.b_mean_lower).min(self.b_power_upper)
    }
}

/// All three exact checks at `α = (1−γ)/(64p)`.
pub fn lemma_slacks(instance: &LsaInstance, mrp: &FiniteMrp, features: &FeatureMap, p: u32) -> Result<LemmaSlacks> {
    let g = mrp.gamma();
    let alpha = (1.0 - g) / (64.0 * f64::from(p.max(1)));
    let d = features.dim();
    let sigma = &instance.sigma_phi;
    let sym = expected_symmetrized_power(instance, mrp, features, alpha, p)?;
    let rhs = DMatrix::identity(d, d) - sigma * (0.5 * alpha * f64::from(p) * (1.0 - g));
    let b1 = expected_b_power(instance, mrp, features, alpha, 1)?;
    let bp = expected_b_power(instance, mrp, features, alpha, p)?;
    let scale = 13.0 / 12.0 * 4f64.powi(p as i32);
    Ok(LemmaSlacks {
        p,
        alpha,
        symmetrized_power: linalg::loewner_slack(&sym, &rhs),
        b_mean_lower: linalg::loewner_slack(&(sigma * (1.0 - g)), &b1),
        b_power_upper: linalg::loewner_slack(&bp, &(sigma * scale)),
    })
}
