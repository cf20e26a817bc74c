//! TD(0) as a linear stochastic approximation: the plain i.i.d. variant, the
//! trajectory variant that keeps only every `q`-th tuple, and the step-size
//! formulas used to configure them.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::lsa_core::{run_lsa_windowed, LsaObservation, LsaUpdate, TailWindow};
use crate::mrp_model::{FeatureMap, FiniteMrp, LsaInstance};
use crate::samplers::{IidSampler, InitialState, MarkovSampler, Observation, SamplingTables, SeedSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdRunConfig {
    pub alpha: f64,
    pub n: usize,
    /// Defaults to `⌊n/2⌋`. Ignored by the data-drop variant, whose window
    /// is derived from the number of updates.
    pub n0: Option<usize>,
    pub q: usize,
    pub p: f64,
    pub delta: f64,
    pub seed: SeedSpec,
    /// Defaults to the zero vector.
    pub theta0: Option<DVector<f64>>,
    /// Trajectory start for the data-drop variant.
    pub start: InitialState,
}

impl TdRunConfig {
    pub fn new(alpha: f64, n: usize, seed: SeedSpec) -> Self {
        Self {
            alpha,
            n,
            n0: None,
            q: 1,
            p: 2.0,
            delta: 0.05,
            seed,
            theta0: None,
            start: InitialState::Stationary,
        }
    }

    pub fn burn_in(&self) -> usize {
        self.n0.unwrap_or(self.n / 2)
    }

    pub fn initial_theta(&self, dim: usize) -> DVector<f64> {
        self.theta0.clone().unwrap_or_else(|| DVector::zeros(dim))
    }

    pub fn validate(&self, gamma: f64, dim: usize) -> Result<()> {
        let cap = (1.0 - gamma) / 2.0;
        if !(self.alpha > 0.0 && self.alpha <= cap) {
            return Err(Error::Range(format!("alpha = {} must lie in (0, (1-gamma)/2 = {cap}]", self.alpha)));
        }
        if self.n < 2 {
            return arg_err(format!("n = {} must be at least 2", self.n));
        }
        if self.burn_in() >= self.n {
            return arg_err(format!("n0 = {} must be below n = {}", self.burn_in(), self.n));
        }
        if self.q < 1 {
            return arg_err("q must be at least 1");
        }
        if !(self.p >= 2.0) {
            return arg_err(format!("p = {} must be at least 2", self.p));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return arg_err(format!("delta = {} must lie in (0, 1)", self.delta));
        }
        if let Some(t) = &self.theta0 {
            if t.len() != dim {
                return arg_err(format!("theta0 has length {}, feature dimension is {dim}", t.len()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdEstimate {
    pub theta_bar: DVector<f64>,
    pub theta_final: DVector<f64>,
    pub updates_used: usize,
    pub diverged: bool,
}

/// A TD observation viewed as the rank-one update
/// `A = φ(s)(φ(s) − γφ(s'))ᵀ`, `b = φ(s)·r`.
#[derive(Clone, Copy, Debug)]
pub struct TdStep<'a> {
    pub features: &'a FeatureMap,
    pub gamma: f64,
    pub obs: Observation,
}

impl TdStep<'_> {
    #[inline]
    fn psi_dot(&self, x: &[f64]) -> f64 {
        let phi = self.features.row(self.obs.s);
        let phi_next = self.features.row(self.obs.s_next);
        phi.iter().zip(phi_next).zip(x).map(|((a, b), x)| (a - self.gamma * b) * x).sum()
    }
}

impl LsaObservation for TdStep<'_> {
    fn dim(&self) -> usize {
        self.features.dim()
    }

    #[inline]
    fn apply_a(&self, x: &[f64], out: &mut [f64]) {
        let c = self.psi_dot(x);
        for (o, f) in out.iter_mut().zip(self.features.row(self.obs.s)) {
            *o = f * c;
        }
    }

    #[inline]
    fn residual(&self, x: &[f64], out: &mut [f64]) {
        let c = self.psi_dot(x) - self.obs.reward;
        for (o, f) in out.iter_mut().zip(self.features.row(self.obs.s)) {
            *o = f * c;
        }
    }

    fn to_update(&self) -> LsaUpdate {
        td_update_from_observation(&self.obs, self.features, self.gamma)
    }
}

pub fn td_update_from_observation(obs: &Observation, features: &FeatureMap, gamma: f64) -> LsaUpdate {
    let phi = features.row_vector(obs.s);
    let psi = &phi - features.row_vector(obs.s_next) * gamma;
    let a_mat: DMatrix<f64> = &phi * psi.transpose();
    LsaUpdate { a_mat, b_vec: phi * obs.reward }
}

/// Keeps items `q, 2q, 3q, …` (1-based) of the wrapped stream.
#[derive(Clone, Debug)]
pub struct DataDrop<I> {
    inner: I,
    q: usize,
    consumed: usize,
}

impl<I: Iterator> DataDrop<I> {
    pub fn new(inner: I, q: usize) -> Self {
        assert!(q >= 1, "skip period must be at least 1");
        Self { inner, q, consumed: 0 }
    }

    /// Raw items pulled from the wrapped stream so far.
    pub fn consumed(&self) -> usize {
        self.consumed
    }
}

impl<I: Iterator> Iterator for DataDrop<I> {
    type Item = I::Item;

    fn next(&mut self) -> Option<I::Item> {
        for _ in 1..self.q {
            self.inner.next()?;
            self.consumed += 1;
        }
        let item = self.inner.next()?;
        self.consumed += 1;
        Some(item)
    }
}

/// The 1-based raw indices the data-drop variant updates on.
pub fn data_drop_schedule(n: usize, q: usize) -> Vec<usize> {
    (1..=n / q.max(1)).map(|j| j * q).collect()
}

/// Shared, immutable inputs for many runs on one instance.
#[derive(Clone, Debug)]
pub struct TdContext<'a> {
    pub mrp: &'a FiniteMrp,
    pub features: &'a FeatureMap,
    pub instance: &'a LsaInstance,
    tables: Arc<SamplingTables>,
}

impl<'a> TdContext<'a> {
    pub fn new(mrp: &'a FiniteMrp, features: &'a FeatureMap, instance: &'a LsaInstance) -> Result<Self> {
        if features.num_states() != mrp.num_states() || instance.dim() != features.dim() {
            return arg_err("MRP, features and instance do not describe the same problem");
        }
        let tables = Arc::new(SamplingTables::new(mrp, Some(&instance.mu)));
        Ok(Self { mrp, features, instance, tables })
    }

    fn steps<I: Iterator<Item = Observation>>(&self, it: I) -> impl Iterator<Item = TdStep<'a>> {
        let features = self.features;
        let gamma = self.mrp.gamma();
        it.map(move |obs| TdStep { features, gamma, obs })
    }

    pub fn iid_stream(&self, seed: SeedSpec) -> IidSampler {
        IidSampler::with_tables(Arc::clone(&self.tables), seed)
    }

    pub fn markov_stream(&self, start: InitialState, seed: SeedSpec) -> Result<MarkovSampler> {
        MarkovSampler::with_tables(Arc::clone(&self.tables), start, seed)
    }

    /// Averages `θ_{n0+1}, …, θ_n`.
    pub fn run_td0(&self, config: &TdRunConfig) -> Result<TdEstimate> {
        config.validate(self.mrp.gamma(), self.features.dim())?;
        let theta0 = config.initial_theta(self.features.dim());
        let stream = self.steps(self.iid_stream(config.seed));
        let tr = run_lsa_windowed(stream, &theta0, config.alpha, config.n, config.burn_in(), false, TailWindow::Trailing)?;
        Ok(TdEstimate {
            theta_bar: tr.tail_average,
            theta_final: tr.final_iterate,
            updates_used: tr.steps_run,
            diverged: tr.diverged,
        })
    }

    /// Reads `n` trajectory tuples, updates on tuples `q, 2q, …, mq` with
    /// `m = ⌊n/q⌋`, and averages the last `⌈m/2⌉` iterates.
    pub fn run_td_data_drop(&self, config: &TdRunConfig) -> Result<TdEstimate> {
        config.validate(self.mrp.gamma(), self.features.dim())?;
        let m = config.n / config.q;
        if m < 2 {
            return Err(Error::InsufficientUpdates { m });
        }
        let theta0 = config.initial_theta(self.features.dim());
        let mut raw = self.markov_stream(config.start, config.seed)?;
        let kept = DataDrop::new(raw.by_ref().take(m * config.q), config.q);
        let tr = run_lsa_windowed(self.steps(kept), &theta0, config.alpha, m, m / 2, false, TailWindow::Trailing)?;
        // the tail of the trajectory past mq is read but never used
        if !tr.diverged {
            raw.by_ref().take(config.n - m * config.q).for_each(drop);
        }
        Ok(TdEstimate {
            theta_bar: tr.tail_average,
            theta_final: tr.final_iterate,
            updates_used: tr.steps_run,
            diverged: tr.diverged,
        })
    }
}

pub fn run_td0(mrp: &FiniteMrp, features: &FeatureMap, instance: &LsaInstance, config: &TdRunConfig) -> Result<TdEstimate> {
    TdContext::new(mrp, features, instance)?.run_td0(config)
}

pub fn run_td_data_drop(
    mrp: &FiniteMrp,
    features: &FeatureMap,
    instance: &LsaInstance,
    config: &TdRunConfig,
) -> Result<TdEstimate> {
    TdContext::new(mrp, features, instance)?.run_td_data_drop(config)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return arg_err(format!("gamma = {gamma} is not in (0, 1)"));
    }
    Ok(())
}

/// `(1−γ)/(128p)`. Pass `p + ln n` or `ln(n/δ)` for the composite regimes.
pub fn step_size_universal(gamma: f64, p: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if !(p > 0.0) || !p.is_finite() {
        return arg_err(format!("p = {p} must be positive"));
    }
    Ok((1.0 - gamma) / (128.0 * p))
}

/// `(1−γ)λ_min/(128(p + ln n))`.
pub fn step_size_instance_dependent(gamma: f64, lambda_min: f64, p: f64, n: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if !(lambda_min > 0.0) {
        return arg_err(format!("lambda_min = {lambda_min} must be positive"));
    }
    if !(n >= 1.0) {
        return arg_err(format!("n = {n} must be at least 1"));
    }
    let denom = p + n.ln();
    if !(denom > 0.0) {
        return arg_err("p + ln n must be positive");
    }
    Ok((1.0 - gamma) * lambda_min / (128.0 * denom))
}

/// Step size of the trajectory bound: `(1−γ)/(128 ln(n/δ))`.
pub fn step_size_markov(gamma: f64, n: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return arg_err(format!("delta = {delta} must lie in (0, 1)"));
    }
    step_size_universal(gamma, (n as f64 / delta).ln())
}

/// Skip period `⌈t_mix·ln(n/δ)/ln 4⌉`.
pub fn skip_period(t_mix: usize, n: usize, delta: f64) -> Result<usize> {
    if t_mix == 0 || n == 0 || !(delta > 0.0 && delta < 1.0) {
        return arg_err("skip period needs t_mix >= 1, n >= 1 and delta in (0, 1)");
    }
    Ok(((t_mix as f64) * (n as f64 / delta).ln() / 4f64.ln()).ceil() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use crate::lsa_core::run_lsa;
    use crate::mrp_model::{derive_instance, make_random_features, make_random_mrp, one_hot_features};

    fn single_state() -> (FiniteMrp, FeatureMap, LsaInstance) {
        let mrp = FiniteMrp::with_deterministic_rewards(DMatrix::from_element(1, 1, 1.0), &[1.0], 0.5).unwrap();
        let f = FeatureMap::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let inst = derive_instance(&mrp, &f).unwrap();
        (mrp, f, inst)
    }

    #[test]
    fn tabular_update_with_zero_discount() {
        let f = one_hot_features(3).unwrap();
        let u = td_update_from_observation(&Observation { s: 1, reward: 0.4, s_next: 2 }, &f, 0.0);
        let mut a = DMatrix::zeros(3, 3);
        a[(1, 1)] = 1.0;
        assert_eq!(u.a_mat, a);
        assert_eq!(u.b_vec, DVector::from_vec(vec![0.0, 0.4, 0.0]));
    }

    #[test]
    fn self_transition_update() {
        let f = FeatureMap::new(DMatrix::from_row_slice(2, 2, &[0.6, 0.8, 0.0, 0.5])).unwrap();
        let u = td_update_from_observation(&Observation { s: 0, reward: 0.0, s_next: 0 }, &f, 0.7);
        let phi = f.row_vector(0);
        assert!((u.a_mat - &phi * phi.transpose() * 0.3).amax() < 1e-15);
    }

    #[test]
    fn update_matches_outer_product_and_norm_bound() {
        let mrp = make_random_mrp(7, 3, 0.8, 1).unwrap();
        let f = make_random_features(&mrp, 3, 2).unwrap();
        for s in 0..7 {
            for sn in 0..7 {
                let u = td_update_from_observation(&Observation { s, reward: 0.3, s_next: sn }, &f, 0.8);
                for i in 0..3 {
                    for j in 0..3 {
                        let want = f.matrix()[(s, i)] * (f.matrix()[(s, j)] - 0.8 * f.matrix()[(sn, j)]);
                        assert!((u.a_mat[(i, j)] - want).abs() <= 1e-15);
                    }
                }
                assert!(linalg::op_norm(&u.a_mat) <= 1.8);
                let step = TdStep { features: &f, gamma: 0.8, obs: Observation { s, reward: 0.3, s_next: sn } };
                let x = [0.1, -0.2, 0.3];
                let mut out = [0.0; 3];
                step.residual(&x, &mut out);
                let want = &u.a_mat * DVector::from_column_slice(&x) - &u.b_vec;
                assert!((DVector::from_column_slice(&out) - want).amax() < 1e-15);
            }
        }
    }

    #[test]
    fn single_state_converges_and_is_deterministic() {
        let (mrp, f, inst) = single_state();
        let cfg = TdRunConfig::new(0.1, 200, SeedSpec::new(9, 0));
        let est = run_td0(&mrp, &f, &inst, &cfg).unwrap();
        // θ_n − θ* = (1 − α(1−γ))ⁿ(θ0 − θ*)
        let want = 2.0 - 2.0 * 0.95f64.powi(200);
        assert!((est.theta_final[0] - want).abs() < 1e-12);
        let long = run_td0(&mrp, &f, &inst, &TdRunConfig::new(0.1, 400, SeedSpec::new(9, 0))).unwrap();
        assert!((long.theta_final[0] - 2.0).abs() < 1e-8);
        assert_eq!(est.updates_used, 200);
        let again = run_td0(&mrp, &f, &inst, &cfg).unwrap();
        assert_eq!(est.theta_bar, again.theta_bar);
    }

    #[test]
    fn config_validation() {
        let (mrp, f, inst) = single_state();
        let mut cfg = TdRunConfig::new(0.26, 10, SeedSpec::new(0, 0));
        assert!(matches!(run_td0(&mrp, &f, &inst, &cfg), Err(Error::Range(_))));
        cfg.alpha = 0.25;
        assert!(run_td0(&mrp, &f, &inst, &cfg).is_ok());
        cfg.n = 1;
        assert!(run_td0(&mrp, &f, &inst, &cfg).is_err());
        cfg.n = 10;
        cfg.theta0 = Some(DVector::zeros(2));
        assert!(run_td0(&mrp, &f, &inst, &cfg).is_err());
    }

    #[test]
    fn drop_schedule() {
        let kept: Vec<_> = DataDrop::new(1..=10usize, 3).collect();
        assert_eq!(kept, vec![3, 6, 9]);
        assert_eq!(data_drop_schedule(10, 3), vec![3, 6, 9]);
        assert_eq!(data_drop_schedule(5, 1), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn data_drop_counts_and_errors() {
        let mrp = make_random_mrp(4, 2, 0.6, 3).unwrap();
        let f = make_random_features(&mrp, 2, 4).unwrap();
        let inst = derive_instance(&mrp, &f).unwrap();
        let mut cfg = TdRunConfig::new(0.01, 10, SeedSpec::new(1, 0));
        cfg.q = 3;
        assert_eq!(run_td_data_drop(&mrp, &f, &inst, &cfg).unwrap().updates_used, 3);
        cfg.q = 6;
        assert!(matches!(run_td_data_drop(&mrp, &f, &inst, &cfg), Err(Error::InsufficientUpdates { m: 1 })));
    }

    #[test]
    fn unit_skip_equals_plain_recursion_on_trajectory() {
        let mrp = make_random_mrp(5, 2, 0.7, 8).unwrap();
        let f = make_random_features(&mrp, 2, 9).unwrap();
        let inst = derive_instance(&mrp, &f).unwrap();
        let mut cfg = TdRunConfig::new(0.05, 101, SeedSpec::new(4, 2));
        cfg.start = InitialState::State(1);
        let est = run_td_data_drop(&mrp, &f, &inst, &cfg).unwrap();
        let ctx = TdContext::new(&mrp, &f, &inst).unwrap();
        let steps: Vec<_> = ctx
            .markov_stream(InitialState::State(1), cfg.seed)
            .unwrap()
            .take(101)
            .map(|obs| TdStep { features: &f, gamma: 0.7, obs })
            .collect();
        let tr = run_lsa_windowed(&steps, &DVector::zeros(2), 0.05, 101, 50, false, TailWindow::Trailing).unwrap();
        assert_eq!(est.theta_bar, tr.tail_average);
        assert_eq!(est.theta_final, tr.final_iterate);
        // the same stream through the leading window differs by one index
        let lead = run_lsa(&steps, &DVector::zeros(2), 0.05, 101, 50, false).unwrap();
        assert_ne!(lead.tail_average, tr.tail_average);
    }

    #[test]
    fn step_sizes() {
        assert_eq!(step_size_universal(0.5, 2.0).unwrap(), 0.001953125);
        let a = step_size_universal(0.9, (1e4f64 / 0.05).ln()).unwrap();
        assert!((a - 6.400_5e-5).abs() < 1e-8, "{a}");
        assert!((step_size_markov(0.9, 10_000, 0.05).unwrap() - a).abs() < 1e-20);
        let mut prev = f64::INFINITY;
        for g in [0.1, 0.5, 0.9, 0.99, 0.999] {
            let x = step_size_universal(g, 2.0).unwrap();
            assert!(x < prev);
            prev = x;
        }
        let e2 = 2f64.exp();
        let x = step_size_instance_dependent(0.5, 0.1, 2.0, e2).unwrap();
        assert!((x - 0.5 * 0.1 / 512.0).abs() < 1e-18);
        let n = 1000.0;
        assert!(
            (step_size_instance_dependent(0.5, 1.0, 2.0, n).unwrap() - step_size_universal(0.5, 2.0 + n.ln()).unwrap()).abs()
                < 1e-18
        );
        assert!(step_size_instance_dependent(0.5, 0.05, 2.0, n).unwrap() < step_size_instance_dependent(0.5, 0.1, 2.0, n).unwrap());
        assert!(step_size_universal(0.5, 0.0).is_err());
        assert!(step_size_instance_dependent(0.5, 0.0, 2.0, n).is_err());
        assert_eq!(skip_period(4, 1 << 18, 0.05).unwrap(), 45);
    }
}
