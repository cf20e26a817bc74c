//! Monte-Carlo estimates of the tail-averaged TD error and closed-form
//! evaluators for the shapes of its upper bounds. Absolute constants hidden
//! by the bounds are set to 1, so only scaling comparisons are meaningful.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::mrp_model::{FeatureMap, FiniteMrp, LsaInstance};
use crate::samplers::SeedSpec;
use crate::td_algorithms::{skip_period, step_size_markov, TdContext, TdRunConfig};

/// Normal quantile used for reported confidence half-widths.
pub const Z95: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Runner {
    Td0,
    DataDrop,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Also estimate `E^{1/p}‖θ̄−θ*‖^p_Σφ`.
    pub p: Option<f64>,
    /// Also report the empirical `(1−δ)`-quantile of `‖θ̄−θ*‖_Σφ`.
    pub quantile_delta: Option<f64>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { p: None, quantile_delta: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mse: f64,
    pub mse_ci: f64,
    pub mse_se: f64,
    pub p_moment: Option<(f64, f64)>,
    pub quantile: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub n: usize,
    pub diverged: usize,
    /// `None` when every replication diverged.
    pub stats: Option<ErrorStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub runner: Runner,
    pub replications: usize,
    pub diverged_count: usize,
    pub options: ReportOptions,
    pub rows: Vec<HorizonRow>,
}

impl ErrorReport {
    pub const CSV_HEADER: &'static str = "n,replications,diverged,mse,mse_ci,p,p_moment,p_moment_ci,quantile_level,quantile";

    pub fn horizons(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.n).collect()
    }

    /// `(n, mse)` for rows with statistics.
    pub fn mse_points(&self) -> Vec<(f64, f64)> {
        self.rows.iter().filter_map(|r| r.stats.as_ref().map(|s| (r.n as f64, s.mse))).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        let opt = |x: Option<f64>| x.map(crate::fmt_f64).unwrap_or_default();
        for r in &self.rows {
            let s = r.stats.as_ref();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.n,
                self.replications,
                r.diverged,
                opt(s.map(|s| s.mse)),
                opt(s.map(|s| s.mse_ci)),
                opt(self.options.p),
                opt(s.and_then(|s| s.p_moment.map(|m| m.0))),
                opt(s.and_then(|s| s.p_moment.map(|m| m.1))),
                opt(self.options.quantile_delta.map(|d| 1.0 - d)),
                opt(s.and_then(|s| s.quantile)),
            )?;
        }
        Ok(())
    }
}

/// Type-7 empirical quantile of `sorted` at level `q ∈ [0, 1]`.
pub fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.iter().all(|&x| x == xs[0]) {
        return (xs[0], 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Statistics of the Σφ-norm errors `e_r` of one horizon.
pub fn summarize_errors(errors: &[f64], options: &ReportOptions) -> Option<ErrorStats> {
    if errors.is_empty() {
        return None;
    }
    let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
    let (mse, mse_se) = mean_se(&sq);
    let p_moment = options.p.map(|p| {
        let pw: Vec<f64> = errors.iter().map(|e| e.powf(p)).collect();
        let (m, se) = mean_se(&pw);
        let est = m.powf(1.0 / p);
        let ci = if m > 0.0 { Z95 * se * m.powf(1.0 / p - 1.0) / p } else { 0.0 };
        (est, ci)
    });
    let quantile = options.quantile_delta.map(|d| {
        let mut s = errors.to_vec();
        s.sort_by(f64::total_cmp);
        quantile_type7(&s, 1.0 - d)
    });
    Some(ErrorStats { mse, mse_ci: Z95 * mse_se, mse_se, p_moment, quantile })
}

/// Σφ-norm errors `‖θ̄ − θ*‖_Σφ` per horizon and replication (`None` for a
/// diverged run). Replication `r` at horizon index `h` uses stream
/// `(master_seed, h·R + r)`.
pub fn mc_errors<F>(
    ctx: &TdContext<'_>,
    runner: Runner,
    config_for: F,
    horizons: &[usize],
    replications: usize,
    master_seed: u64,
) -> Result<Vec<Vec<Option<f64>>>>
where
    F: Fn(usize) -> TdRunConfig + Sync,
{
    let jobs: Vec<(usize, usize)> = (0..horizons.len()).flat_map(|h| (0..replications).map(move |r| (h, r))).collect();
    let flat: Vec<Result<Option<f64>>> = jobs
        .par_iter()
        .map(|&(h, r)| {
            let mut cfg = config_for(horizons[h]);
            cfg.n = horizons[h];
            cfg.seed = SeedSpec::new(master_seed, (h * replications + r) as u64);
            let est = match runner {
                Runner::Td0 => ctx.run_td0(&cfg)?,
                Runner::DataDrop => ctx.run_td_data_drop(&cfg)?,
            };
            Ok((!est.diverged).then(|| ctx.instance.sigma_norm(&(&est.theta_bar - &ctx.instance.theta_star))))
        })
        .collect();
    let mut out = vec![Vec::with_capacity(replications); horizons.len()];
    for ((h, _), res) in jobs.into_iter().zip(flat) {
        out[h].push(res?);
    }
    Ok(out)
}

/// Runs `replications` independent runs per horizon and summarizes the
/// Σφ-norm error of the tail average.
pub fn mc_error_report<F>(
    ctx: &TdContext<'_>,
    runner: Runner,
    config_for: F,
    horizons: &[usize],
    replications: usize,
    master_seed: u64,
    options: ReportOptions,
) -> Result<ErrorReport>
where
    F: Fn(usize) -> TdRunConfig + Sync,
{
    if replications < 30 {
        return arg_err(format!("replications = {replications} must be at least 30"));
    }
    if horizons.is_empty() {
        return arg_err("no horizons given");
    }
    let errs = mc_errors(ctx, runner, config_for, horizons, replications, master_seed)?;
    let mut diverged_count = 0;
    let rows = horizons
        .iter()
        .zip(errs)
        .map(|(&n, es)| {
            let ok: Vec<f64> = es.iter().flatten().copied().collect();
            let diverged = replications - ok.len();
            diverged_count += diverged;
            HorizonRow { n, diverged, stats: summarize_errors(&ok, &options) }
        })
        .collect();
    Ok(ErrorReport { runner, replications, diverged_count, options, rows })
}

/// Instance-level scalars the bound evaluators need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub gamma: f64,
    pub lambda_min: f64,
    /// `‖θ*‖_Σφ`.
    pub theta_star_norm: f64,
    pub tr_sigma_eps: f64,
    pub tr_sigma_eps_opt: f64,
    /// `sup_z ‖ε(z)‖`.
    pub eps_sup: f64,
    pub t_mix: Option<usize>,
}

impl BoundInputs {
    pub fn from_instance(instance: &LsaInstance, mrp: &FiniteMrp, features: &FeatureMap) -> Self {
        Self {
            gamma: mrp.gamma(),
            lambda_min: instance.lambda_min,
            theta_star_norm: instance.theta_star_sigma_norm(),
            tr_sigma_eps: instance.sigma_eps.trace(),
            tr_sigma_eps_opt: instance.sigma_eps_opt.trace(),
            eps_sup: instance.noise_sup(mrp, features),
            t_mix: instance.t_mix,
        }
    }
}

/// Euclidean `‖θ0 − θ*‖`.
pub fn initial_error(instance: &LsaInstance, theta0: &DVector<f64>) -> f64 {
    (theta0 - &instance.theta_star).norm()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundShape {
    pub label: String,
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

impl BoundShape {
    fn new(label: &str, terms: Vec<(&str, f64)>) -> Self {
        let total = terms.iter().map(|t| t.1).sum();
        Self { label: label.to_string(), terms: terms.into_iter().map(|(k, v)| (k.to_string(), v)).collect(), total }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.0 == name).map(|t| t.1)
    }

    pub const CSV_HEADER: &'static str = "label,n,term,value";

    /// One row per term plus a `total` row.
    pub fn write_csv_rows<W: Write>(&self, mut w: W, n: usize) -> Result<()> {
        for (k, v) in self.terms.iter().map(|(k, v)| (k.as_str(), *v)).chain([("total", self.total)]) {
            writeln!(w, "{},{},{},{}", self.label, n, k, crate::fmt_f64(v))?;
        }
        Ok(())
    }
}

fn check_common(b: &BoundInputs, n: usize, e0: f64) -> Result<()> {
    if !(b.gamma > 0.0 && b.gamma < 1.0) || !(b.lambda_min > 0.0) {
        return arg_err("need gamma in (0, 1) and lambda_min > 0");
    }
    if n < 1 {
        return arg_err("n must be at least 1");
    }
    if !(e0 >= 0.0) {
        return arg_err("initial error must be nonnegative");
    }
    Ok(())
}

fn range(label: &str, alpha: f64, lo_open: bool, hi: f64, hi_open: bool) -> Result<()> {
    let lo_ok = if lo_open { alpha > 0.0 } else { alpha >= 0.0 };
    let hi_ok = if hi_open { alpha < hi } else { alpha <= hi };
    if !(lo_ok && hi_ok) {
        return Err(Error::Range(format!("{label}: alpha = {alpha} outside the admissible range (upper end {hi})")));
    }
    Ok(())
}

/// Second-moment bound for the tail average, `α ∈ (0, (1−γ)/256]`.
pub fn bound_theorem4(b: &BoundInputs, alpha: f64, n: usize, e0: f64) -> Result<BoundShape> {
    check_common(b, n, e0)?;
    let g = 1.0 - b.gamma;
    range("mse bound", alpha, true, g / 256.0, false)?;
    let (lam, th, nf) = (b.lambda_min, b.theta_star_norm, n as f64);
    let leading = (th + 1.0) / ((lam * nf).sqrt() * g) * (1.0 + alpha.sqrt() / (g * lam).sqrt());
    let remainder = (th + 1.0) / (alpha.sqrt() * g.powf(1.5) * lam * nf);
    let f1 = 1.0 / (alpha * nf * g * lam.sqrt()) + 1.0 / (alpha.sqrt() * nf * g.powf(1.5) * lam);
    let initial = f1 * (1.0 - alpha * g * lam / 2.0).powf(nf / 2.0) * e0;
    Ok(BoundShape::new("mse", vec![("leading", leading), ("remainder", remainder), ("initial", initial)]))
}

/// p-th moment bound, `α ≤ (1−γ)/(128(p + ln n))`.
pub fn bound_theorem7_pmoment(b: &BoundInputs, alpha: f64, n: usize, p: f64, e0: f64) -> Result<BoundShape> {
    check_common(b, n, e0)?;
    if !(p >= 2.0) {
        return arg_err(format!("p = {p} must be at least 2"));
    }
    let g = 1.0 - b.gamma;
    let (lam, th, nf) = (b.lambda_min, b.theta_star_norm, n as f64);
    let pl = p + nf.ln();
    range("p-moment bound", alpha, true, g / (128.0 * pl), false)?;
    let leading = p.sqrt() * (th + 1.0) / (nf.sqrt() * g * lam.sqrt());
    let correction = leading * ((alpha * p).sqrt() + alpha * p) / (g * lam).sqrt();
    let remainder = p * (th + 1.0) / (nf * g.powf(1.5) * lam) * (1.0 + 1.0 / (alpha * p).sqrt());
    let initial = (1.0 - alpha * g * lam / 2.0).powf(nf / 2.0) * (pl.sqrt() + p / lam.sqrt()) * pl.sqrt()
        / (g * g * lam.sqrt() * nf)
        * e0;
    Ok(BoundShape::new(
        "p_moment",
        vec![("leading", leading), ("leading_correction", correction), ("remainder", remainder), ("initial", initial)],
    ))
}

/// Bound with the optimal variance term `√(tr Σε^opt / n)`, `α ∈ (0, (1−γ)/256]`.
pub fn bound_theorem9_optimal(b: &BoundInputs, alpha: f64, n: usize, e0: f64) -> Result<BoundShape> {
    check_common(b, n, e0)?;
    let g = 1.0 - b.gamma;
    range("optimal-variance bound", alpha, true, g / 256.0, false)?;
    let (lam, th, nf) = (b.lambda_min, b.theta_star_norm, n as f64);
    let leading = (b.tr_sigma_eps_opt / nf).sqrt();
    let remainder = (1.0 + th) / (g.powf(1.5) * lam * nf.sqrt()) * (1.0 / (alpha * nf).sqrt() + alpha.sqrt());
    let f2 = ((1.0 / (lam * g * g)) * (1.0 / (alpha * alpha * nf * nf) + 1.0 / (alpha * g * lam * nf * nf))).sqrt();
    let initial = f2 * (1.0 - alpha * g * lam).powf(nf / 2.0) * e0;
    Ok(BoundShape::new("optimal", vec![("leading", leading), ("remainder", remainder), ("initial", initial)]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovBound {
    pub shape: BoundShape,
    pub alpha: f64,
    pub q: usize,
}

/// High-probability bound for data-drop TD on a trajectory, with the step
/// size and skip period it prescribes.
pub fn bound_theorem12_markov(b: &BoundInputs, n: usize, delta: f64, e0: f64) -> Result<MarkovBound> {
    check_common(b, n, e0)?;
    if !(delta > 0.0 && delta < 1.0 / 3.0) {
        return Err(Error::Range(format!("delta = {delta} must lie in (0, 1/3)")));
    }
    let t_mix = b.t_mix.ok_or_else(|| Error::Range("mixing time is undefined for this chain".into()))?;
    let g = 1.0 - b.gamma;
    let (lam, th, nf, tm) = (b.lambda_min, b.theta_star_norm, n as f64, t_mix as f64);
    let need_gamma = (1.0 / delta).ln() / (g * g);
    let need_mix = 2.0 * tm * (4.0 / delta).ln() / 4f64.ln();
    if nf < need_gamma {
        return Err(Error::Range(format!("n = {n} is below ln(1/delta)/(1-gamma)^2 = {need_gamma}")));
    }
    if nf < need_mix {
        return Err(Error::Range(format!("n = {n} is below 2 t_mix ln(4/delta)/ln 4 = {need_mix}")));
    }
    let l = (nf / delta).ln();
    let leading = (th + 1.0) * tm.sqrt() * l / (nf.sqrt() * g * lam);
    let initial = (-(g * g) * lam * nf / (128.0 * tm * l * l)).exp() * e0 * tm * l * l / (g * g * lam * nf);
    Ok(MarkovBound {
        shape: BoundShape::new("markov", vec![("leading", leading), ("initial", initial)]),
        alpha: step_size_markov(b.gamma, n, delta)?,
        q: skip_period(t_mix, n, delta)?,
    })
}

/// Last-iterate moment bound with the explicit martingale constants 60 and
/// 60e, TD stability constants `a = (1−γ)λ_min/2`, `C = 1`, and
/// `α ∈ [0, (1−γ)/(128(p + ln n)))`.
pub fn bound_last_iterate(b: &BoundInputs, alpha: f64, n: usize, p: f64, e0: f64) -> Result<BoundShape> {
    check_common(b, n, e0)?;
    if !(p >= 2.0) {
        return arg_err(format!("p = {p} must be at least 2"));
    }
    let g = 1.0 - b.gamma;
    let nf = n as f64;
    range("last-iterate bound", alpha, false, g / (128.0 * (p + nf.ln())), true)?;
    let a = g * b.lambda_min / 2.0;
    let e = std::f64::consts::E;
    let bias = (1.0 - alpha * a).powf(nf) * e0;
    let var1 = 60.0 * p.sqrt() * (alpha * b.tr_sigma_eps).sqrt() / a.sqrt();
    let var2 = 60.0 * e * e * alpha * p * b.eps_sup;
    Ok(BoundShape::new("last_iterate", vec![("bias", bias), ("variance", var1), ("variance_sup", var2)]))
}

/// Least squares of `ln y` on `ln x`: `(slope, intercept, r²)`.
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientData(format!("{} usable points, need 3", pts.len())));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all horizons coincide".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((slope, my - slope * mx, r2))
}

pub fn fit_loglog_slope(report: &ErrorReport) -> Result<(f64, f64, f64)> {
    fit_loglog(&report.mse_points())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrp_model::{derive_instance, make_random_features, make_random_mrp};
    use nalgebra::DMatrix;
    use rand::Rng;

    fn inputs() -> BoundInputs {
        BoundInputs {
            gamma: 0.5,
            lambda_min: 0.2,
            theta_star_norm: 1.0,
            tr_sigma_eps: 0.3,
            tr_sigma_eps_opt: 2.0,
            eps_sup: 1.5,
            t_mix: Some(4),
        }
    }

    #[test]
    fn quantile_and_moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_type7(&xs, 0.0), 1.0);
        assert_eq!(quantile_type7(&xs, 1.0), 4.0);
        assert!((quantile_type7(&xs, 0.9) - 3.7).abs() < 1e-15);
        let (m, se) = mean_se(&[2.0, 2.0, 2.0]);
        assert_eq!((m, se), (2.0, 0.0));
    }

    #[test]
    fn mse_bound_spreadsheet() {
        let b = inputs();
        let alpha = 0.5 / 256.0;
        let n = 65536.0f64;
        let s = bound_theorem4(&b, alpha, 1 << 16, 1.0).unwrap();
        // evaluated term by term in a different association order
        let g = 0.5f64;
        let lead = 2.0 / (0.2f64 * n).sqrt() / g + 2.0 * alpha.sqrt() / ((0.2 * n).sqrt() * g * (g * 0.2f64).sqrt());
        let rem = 2.0 / alpha.sqrt() / g.powf(1.5) / 0.2 / n;
        let rho = (1.0 - alpha * g * 0.2 / 2.0).powf(n / 2.0);
        let init = rho / (alpha * n * g * 0.2f64.sqrt()) + rho / (alpha.sqrt() * n * g.powf(1.5) * 0.2);
        assert!((s.term("leading").unwrap() - lead).abs() <= 1e-12 * lead);
        assert!((s.term("remainder").unwrap() - rem).abs() <= 1e-12 * rem);
        assert!((s.term("initial").unwrap() - init).abs() <= 1e-12 * init.max(1e-300));
        assert!((s.total - (lead + rem + init)).abs() <= 1e-12 * s.total);
    }

    #[test]
    fn mse_bound_shape_properties() {
        let b = inputs();
        let a = 0.5 / 256.0;
        let s1 = bound_theorem4(&b, a, 1000, 1.0).unwrap();
        let s4 = bound_theorem4(&b, a, 4000, 1.0).unwrap();
        assert!((s1.term("leading").unwrap() / s4.term("leading").unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(bound_theorem4(&b, a, 1000, 0.0).unwrap().term("initial").unwrap(), 0.0);
        assert!(matches!(bound_theorem4(&b, 0.5 / 255.0, 10, 1.0), Err(Error::Range(_))));
        assert!(bound_theorem4(&b, 0.0, 10, 1.0).is_err());
    }

    #[test]
    fn p_moment_bound_shape() {
        let b = inputs();
        let n = 1 << 16;
        let alpha = 0.5 / (128.0 * (16.0 + (n as f64).ln()));
        let s1 = bound_theorem7_pmoment(&b, alpha, n, 4.0, 1.0).unwrap();
        let s4 = bound_theorem7_pmoment(&b, alpha, n, 16.0, 1.0).unwrap();
        assert!((s4.term("leading").unwrap() / s1.term("leading").unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(bound_theorem7_pmoment(&b, alpha, n, 4.0, 0.0).unwrap().term("initial").unwrap(), 0.0);
        // independent evaluation at p = 4
        let (p, nf, g, lam) = (4.0f64, n as f64, 0.5f64, 0.2f64);
        let lead = 2.0 * p.sqrt() / (nf.sqrt() * g * lam.sqrt());
        let corr = lead * ((alpha * p).sqrt() + alpha * p) / (g * lam).sqrt();
        let rem = 2.0 * p / (nf * g.powf(1.5) * lam) + 2.0 * p / (nf * g.powf(1.5) * lam * (alpha * p).sqrt());
        let pl = p + nf.ln();
        let init = (1.0 - alpha * g * lam / 2.0).powf(nf / 2.0) * (pl + p * pl.sqrt() / lam.sqrt()) / (g * g * lam.sqrt() * nf);
        for (name, want) in [("leading", lead), ("leading_correction", corr), ("remainder", rem), ("initial", init)] {
            let got = s1.term(name).unwrap();
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300), "{name}: {got} vs {want}");
        }
        assert!(bound_theorem7_pmoment(&b, alpha * 2.0, n, 16.0, 1.0).is_err());
    }

    #[test]
    fn optimal_bound_shape() {
        let b = inputs();
        let alpha = 0.5 / 256.0;
        let s = bound_theorem9_optimal(&b, alpha, 1000, 1.0).unwrap();
        assert_eq!(s.term("leading").unwrap(), (2.0f64 / 1000.0).sqrt());
        let mut z = b.clone();
        z.tr_sigma_eps_opt = 0.0;
        assert_eq!(bound_theorem9_optimal(&z, alpha, 1000, 1.0).unwrap().term("leading").unwrap(), 0.0);
        assert_eq!(bound_theorem9_optimal(&b, alpha, 1000, 0.0).unwrap().term("initial").unwrap(), 0.0);
    }

    #[test]
    fn optimal_trace_bound_on_instances() {
        for seed in 0..5 {
            let mrp = make_random_mrp(6, 3, 0.7, seed).unwrap();
            let f = make_random_features(&mrp, 3, seed).unwrap();
            let inst = derive_instance(&mrp, &f).unwrap();
            let th = inst.theta_star_sigma_norm();
            assert!(inst.sigma_eps_opt.trace() <= (th * th + 1.0) / (0.09 * inst.lambda_min) + 1e-9);
        }
    }

    #[test]
    fn markov_bound_shape() {
        let b = inputs();
        let n = 1 << 18;
        let m = bound_theorem12_markov(&b, n, 0.05, 1.0).unwrap();
        assert_eq!(m.q, 45);
        let mut b4 = b.clone();
        b4.t_mix = Some(16);
        let m4 = bound_theorem12_markov(&b4, n, 0.05, 1.0).unwrap();
        assert!((m4.shape.term("leading").unwrap() / m.shape.term("leading").unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(bound_theorem12_markov(&b, n, 0.05, 0.0).unwrap().shape.term("initial").unwrap(), 0.0);
        let (nf, l) = (n as f64, (n as f64 / 0.05).ln());
        let lead = 2.0 * 2.0 * l / (nf.sqrt() * 0.5 * 0.2);
        let init = (-0.25 * 0.2 * nf / (128.0 * 4.0 * l * l)).exp() * 4.0 * l * l / (0.25 * 0.2 * nf);
        assert!((m.shape.term("leading").unwrap() - lead).abs() <= 1e-12 * lead);
        assert!((m.shape.term("initial").unwrap() - init).abs() <= 1e-12 * init);
        assert!((m.alpha - 0.5 / (128.0 * l)).abs() < 1e-18);
        let err = bound_theorem12_markov(&b, 20, 0.05, 1.0).unwrap_err().to_string();
        assert!(err.contains("t_mix"), "{err}");
        let mut slow = b.clone();
        slow.gamma = 0.99;
        let err = bound_theorem12_markov(&slow, 1000, 0.05, 1.0).unwrap_err().to_string();
        assert!(err.contains("(1-gamma)^2"), "{err}");
    }

    #[test]
    fn last_iterate_shape() {
        let b = inputs();
        let n = 1000;
        let alpha = 0.5 / (128.0 * (2.0 + (n as f64).ln())) * 0.5;
        let s = bound_last_iterate(&b, alpha, n, 2.0, 1.0).unwrap();
        let a = 0.5 * 0.2 / 2.0;
        let want = [
            (1.0 - alpha * a).powi(n as i32),
            60.0 * 2f64.sqrt() * (alpha * 0.3f64).sqrt() / a.sqrt(),
            60.0 * std::f64::consts::E.powi(2) * alpha * 2.0 * 1.5,
        ];
        for ((_, got), w) in s.terms.iter().zip(want) {
            assert!((got - w).abs() <= 1e-12 * w);
        }
        let z = bound_last_iterate(&b, 0.0, n, 2.0, 3.0).unwrap();
        assert_eq!(z.term("bias").unwrap(), 3.0);
        assert_eq!(z.term("variance").unwrap() + z.term("variance_sup").unwrap(), 0.0);
        assert!(bound_last_iterate(&b, alpha / 4.0, 1 << 40, 2.0, 1.0).unwrap().term("bias").unwrap() < 1e-300);
        assert!(bound_last_iterate(&b, 0.5 / (128.0 * (2.0 + (n as f64).ln())), n, 2.0, 1.0).is_err());
    }

    #[test]
    fn bounds_monotone() {
        let b = inputs();
        let alpha = 0.5 / 256.0 / 4.0;
        let mut prev = [f64::INFINITY; 4];
        for k in 14..22 {
            let n = 1usize << k;
            let cur = [
                bound_theorem4(&b, alpha, n, 2.0).unwrap().total,
                bound_theorem9_optimal(&b, alpha, n, 2.0).unwrap().total,
                bound_theorem12_markov(&b, n, 0.05, 2.0).unwrap().shape.total,
                bound_last_iterate(&b, alpha / 8.0, n, 2.0, 2.0).unwrap().total,
            ];
            for (c, p) in cur.iter().zip(prev) {
                assert!(*c <= p);
            }
            prev = cur;
            let lo = bound_theorem4(&b, alpha, n, 1.0).unwrap().total;
            assert!(lo <= cur[0]);
        }
    }

    #[test]
    fn loglog_fits() {
        let exact: Vec<_> = (0..5).map(|k| (2f64.powi(10 + k), 2f64.powi(-(10 + k)))).collect();
        let (s, _, r2) = fit_loglog(&exact).unwrap();
        assert!((s + 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        let flat: Vec<_> = (0..5).map(|k| (2f64.powi(k), 3.0)).collect();
        assert!(fit_loglog(&flat).unwrap().0.abs() < 1e-12);
        let mut rng = SeedSpec::new(12, 0).rng();
        let noisy: Vec<_> =
            (0..6).map(|k| (4f64.powi(k + 5), 4f64.powi(-(k + 5)) * (1.0 + rng.random_range(-0.05..0.05)))).collect();
        let s = fit_loglog(&noisy).unwrap().0;
        assert!((-1.1..=-0.9).contains(&s), "{s}");
        assert!(matches!(fit_loglog(&exact[..2]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn zero_noise_report_is_deterministic_bias() {
        let mrp = FiniteMrp::with_deterministic_rewards(DMatrix::from_element(1, 1, 1.0), &[1.0], 0.5).unwrap();
        let f = FeatureMap::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let inst = derive_instance(&mrp, &f).unwrap();
        let ctx = TdContext::new(&mrp, &f, &inst).unwrap();
        let alpha = 0.1;
        let rep = mc_error_report(&ctx, Runner::Td0, |n| TdRunConfig::new(alpha, n, SeedSpec::new(0, 0)), &[10, 21], 30, 1, ReportOptions::default())
            .unwrap();
        for row in &rep.rows {
            let n = row.n;
            let rho: f64 = 1.0 - alpha * 0.5;
            let avg: f64 = ((n / 2 + 1)..=n).map(|k| -2.0 * rho.powi(k as i32)).sum::<f64>() / (n - n / 2) as f64;
            let st = row.stats.as_ref().unwrap();
            assert!((st.mse - avg * avg).abs() < 1e-12);
            assert_eq!(st.mse_ci, 0.0);
        }
        assert!(mc_error_report(&ctx, Runner::Td0, |n| TdRunConfig::new(alpha, n, SeedSpec::new(0, 0)), &[10], 29, 1, ReportOptions::default())
            .is_err());
    }

    #[test]
    fn ci_scales_with_replications() {
        let mrp = make_random_mrp(4, 2, 0.5, 2).unwrap();
        let f = make_random_features(&mrp, 2, 3).unwrap();
        let inst = derive_instance(&mrp, &f).unwrap();
        let ctx = TdContext::new(&mrp, &f, &inst).unwrap();
        let cfg = |n| TdRunConfig::new(0.02, n, SeedSpec::new(0, 0));
        let r1 = mc_error_report(&ctx, Runner::Td0, cfg, &[2000], 200, 5, ReportOptions::default()).unwrap();
        let r4 = mc_error_report(&ctx, Runner::Td0, cfg, &[2000], 800, 6, ReportOptions::default()).unwrap();
        let ratio = r1.rows[0].stats.as_ref().unwrap().mse_ci / r4.rows[0].stats.as_ref().unwrap().mse_ci;
        assert!((1.6..=2.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn report_csv_has_one_row_per_horizon() {
        let mrp = make_random_mrp(4, 2, 0.5, 2).unwrap();
        let f = make_random_features(&mrp, 2, 3).unwrap();
        let inst = derive_instance(&mrp, &f).unwrap();
        let ctx = TdContext::new(&mrp, &f, &inst).unwrap();
        let opts = ReportOptions { p: Some(4.0), quantile_delta: Some(0.1) };
        let rep = mc_error_report(&ctx, Runner::Td0, |n| TdRunConfig::new(0.01, n, SeedSpec::new(0, 0)), &[100, 200, 400], 30, 2, opts)
            .unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        for row in &rep.rows {
            let st = row.stats.as_ref().unwrap();
            assert!(st.quantile.unwrap() >= 0.0 && st.p_moment.unwrap().0 >= st.mse.sqrt() - 1e-12);
        }
    }
}
