//! Finite Markov reward processes, linear feature maps, and the exact
//! instance quantities derived from them (stationary law, system matrix,
//! TD fixed point, noise covariances, mixing time).

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_rows, serde_vec};
use crate::samplers::SeedSpec;

const ROW_SUM_TOL: f64 = 1e-12;
const RANK_TOL: f64 = 1e-10;
const MAX_ATTEMPTS: usize = 100;
/// Cap on the mixing-time search used by [`derive_instance`].
pub const DEFAULT_MIXING_CAP: usize = 10_000;

/// A finite-state Markov reward process under a fixed policy: transition
/// kernel `P_π`, per-state reward distributions (the policy-marginalized
/// `r(s, a)`), and discount factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMrp")]
pub struct FiniteMrp {
    num_states: usize,
    #[serde(with = "serde_rows")]
    transition: DMatrix<f64>,
    reward_support: Vec<Vec<(f64, f64)>>,
    gamma: f64,
}

#[derive(Deserialize)]
struct RawMrp {
    num_states: usize,
    #[serde(with = "serde_rows")]
    transition: DMatrix<f64>,
    reward_support: Vec<Vec<(f64, f64)>>,
    gamma: f64,
}

impl TryFrom<RawMrp> for FiniteMrp {
    type Error = Error;

    fn try_from(raw: RawMrp) -> Result<Self> {
        let mrp = FiniteMrp::new(raw.transition, raw.reward_support, raw.gamma)?;
        if mrp.num_states != raw.num_states {
            return Err(Error::Model(format!(
                "num_states = {} but transition has {} rows",
                raw.num_states, mrp.num_states
            )));
        }
        Ok(mrp)
    }
}

impl FiniteMrp {
    pub fn new(transition: DMatrix<f64>, reward_support: Vec<Vec<(f64, f64)>>, gamma: f64) -> Result<Self> {
        let s = transition.nrows();
        if s == 0 || !transition.is_square() {
            return Err(Error::Model("transition must be a nonempty square matrix".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Model(format!("gamma = {gamma} is not in (0, 1)")));
        }
        for i in 0..s {
            let row = transition.row(i);
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Model(format!("transition row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Model(format!("transition row {i} sums to {sum}")));
            }
        }
        if reward_support.len() != s {
            return Err(Error::Model(format!("{} reward supports for {s} states", reward_support.len())));
        }
        for (i, atoms) in reward_support.iter().enumerate() {
            if atoms.is_empty() {
                return Err(Error::Model(format!("state {i} has an empty reward support")));
            }
            if atoms.iter().any(|&(v, p)| !(0.0..=1.0).contains(&v) || !(p >= 0.0)) {
                return Err(Error::Model(format!("state {i} has a reward outside [0,1] or a negative probability")));
            }
            let total: f64 = atoms.iter().map(|&(_, p)| p).sum();
            if (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Model(format!("reward probabilities of state {i} sum to {total}")));
            }
        }
        Ok(Self { num_states: s, transition, reward_support, gamma })
    }

    /// Deterministic reward per state.
    pub fn with_deterministic_rewards(transition: DMatrix<f64>, rewards: &[f64], gamma: f64) -> Result<Self> {
        Self::new(transition, rewards.iter().map(|&r| vec![(r, 1.0)]).collect(), gamma)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn reward_support(&self) -> &[Vec<(f64, f64)>] {
        &self.reward_support
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Mean reward r̄(s).
    pub fn mean_rewards(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.num_states,
            self.reward_support.iter().map(|atoms| atoms.iter().map(|&(v, p)| v * p).sum()),
        )
    }

    /// Whether the directed graph of positive transitions is strongly connected.
    pub fn is_irreducible(&self) -> bool {
        let reach = |forward: bool| {
            let mut seen = vec![false; self.num_states];
            let mut queue = VecDeque::from([0usize]);
            seen[0] = true;
            while let Some(u) = queue.pop_front() {
                for v in 0..self.num_states {
                    let p = if forward { self.transition[(u, v)] } else { self.transition[(v, u)] };
                    if p > 0.0 && !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
            seen.into_iter().all(|x| x)
        };
        reach(true) && reach(false)
    }

    /// Same process with states renamed by `perm` (old state `i` becomes `perm[i]`).
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let s = self.num_states;
        check_permutation(perm, s)?;
        let mut t = DMatrix::zeros(s, s);
        let mut rewards = vec![Vec::new(); s];
        for i in 0..s {
            for j in 0..s {
                t[(perm[i], perm[j])] = self.transition[(i, j)];
            }
            rewards[perm[i]] = self.reward_support[i].clone();
        }
        Self::new(t, rewards, self.gamma)
    }
}

fn check_permutation(perm: &[usize], s: usize) -> Result<()> {
    let mut seen = vec![false; s];
    if perm.len() != s || perm.iter().any(|&p| p >= s || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidArgument("not a permutation of the state indices".into()));
    }
    Ok(())
}

/// Feature matrix Φ with rows φ(s)ᵀ, `‖φ(s)‖ ≤ 1`, full column rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFeatures")]
pub struct FeatureMap {
    #[serde(with = "serde_rows")]
    phi: DMatrix<f64>,
    dim: usize,
    #[serde(skip)]
    rows: Vec<f64>,
}

#[derive(Deserialize)]
struct RawFeatures {
    #[serde(with = "serde_rows")]
    phi: DMatrix<f64>,
    dim: usize,
}

impl TryFrom<RawFeatures> for FeatureMap {
    type Error = Error;

    fn try_from(raw: RawFeatures) -> Result<Self> {
        let f = FeatureMap::new(raw.phi)?;
        if f.dim != raw.dim {
            return Err(Error::Model(format!("dim = {} but phi has {} columns", raw.dim, f.dim)));
        }
        Ok(f)
    }
}

impl FeatureMap {
    /// Row norms may exceed 1 by at most 1e-12 (roundoff in user input).
    pub fn new(phi: DMatrix<f64>) -> Result<Self> {
        let (s, d) = phi.shape();
        if d == 0 || d > s {
            return Err(Error::Model(format!("feature dimension {d} must be in 1..={s}")));
        }
        if phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::Model("non-finite feature entry".into()));
        }
        for i in 0..s {
            let norm = phi.row(i).norm();
            if norm > 1.0 + 1e-12 {
                return Err(Error::Model(format!("feature row {i} has norm {norm} > 1")));
            }
        }
        let smin = linalg::singular_values(&phi).last().copied().unwrap_or(0.0);
        if smin <= RANK_TOL {
            return Err(Error::Model(format!("feature matrix is rank deficient (smallest singular value {smin:e})")));
        }
        let rows = (0..s).flat_map(|i| phi.row(i).iter().copied().collect::<Vec<_>>()).collect();
        Ok(Self { phi, dim: d, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// φ(s) as a contiguous slice.
    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.rows[s * self.dim..(s + 1) * self.dim]
    }

    pub fn row_vector(&self, s: usize) -> DVector<f64> {
        DVector::from_column_slice(self.row(s))
    }

    pub fn max_row_norm(&self) -> f64 {
        (0..self.num_states()).map(|s| self.phi.row(s).norm()).fold(0.0, f64::max)
    }

    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.num_states())?;
        let mut phi = DMatrix::zeros(self.num_states(), self.dim);
        for (i, &p) in perm.iter().enumerate() {
            phi.set_row(p, &self.phi.row(i));
        }
        Self::new(phi)
    }
}

/// Tabular (one-hot) features: Φ = I.
pub fn one_hot_features(num_states: usize) -> Result<FeatureMap> {
    FeatureMap::new(DMatrix::identity(num_states, num_states))
}

/// State aggregation: state `s` gets the unit vector `e_{group[s]}`.
pub fn aggregated_features(group: &[usize], dim: usize) -> Result<FeatureMap> {
    let mut phi = DMatrix::zeros(group.len(), dim);
    for (s, &g) in group.iter().enumerate() {
        if g >= dim {
            return Err(Error::InvalidArgument(format!("group index {g} out of range for dim {dim}")));
        }
        phi[(s, g)] = 1.0;
    }
    FeatureMap::new(phi)
}

/// Garnet-style random MRP: each row has exactly `branching` positive
/// entries with uniform-simplex weights; each state has 1 to 4 reward atoms.
/// Attempts are rejected until the chain is irreducible.
pub fn make_random_mrp(num_states: usize, branching: usize, gamma: f64, seed: u64) -> Result<FiniteMrp> {
    if num_states == 0 || branching == 0 || branching > num_states {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= branching ({branching}) <= num_states ({num_states})"
        )));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma = {gamma} is not in (0, 1)")));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = SeedSpec::new(seed, attempt as u64).rng();
        let mut t = DMatrix::zeros(num_states, num_states);
        for i in 0..num_states {
            let cols = sample_indices(&mut rng, num_states, branching);
            let w = simplex_sample(&mut rng, branching);
            for (c, p) in cols.into_iter().zip(w) {
                t[(i, c)] = p;
            }
        }
        let rewards = (0..num_states)
            .map(|_| {
                let atoms = rng.random_range(1..=4usize);
                let probs = simplex_sample(&mut rng, atoms);
                probs.into_iter().map(|p| (rng.random::<f64>(), p)).collect()
            })
            .collect();
        let mrp = FiniteMrp::new(t, rewards, gamma)?;
        if mrp.is_irreducible() {
            return Ok(mrp);
        }
    }
    Err(Error::GenerationFailed { attempts: MAX_ATTEMPTS, reason: "no irreducible chain drawn".into() })
}

/// Uniform draw from the probability simplex (normalized exponentials).
fn simplex_sample<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k).map(|_| {
        let e: f64 = Exp1.sample(rng);
        e.max(f64::MIN_POSITIVE)
    }).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Gaussian feature rows rescaled so the largest row norm is 1.
pub fn make_random_features(mrp: &FiniteMrp, dim: usize, seed: u64) -> Result<FeatureMap> {
    let s = mrp.num_states();
    if dim == 0 || dim > s {
        return Err(Error::InvalidArgument(format!("need 1 <= dim ({dim}) <= num_states ({s})")));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = SeedSpec::new(seed, attempt as u64).rng();
        let mut phi = DMatrix::from_fn(s, dim, |_, _| StandardNormal.sample(&mut rng));
        let max_norm = (0..s).map(|i| phi.row(i).norm()).fold(0.0, f64::max);
        if max_norm == 0.0 {
            continue;
        }
        phi /= max_norm;
        // roundoff can leave the largest norm one ulp above 1
        while (0..s).map(|i| phi.row(i).norm()).fold(0.0, f64::max) > 1.0 {
            phi *= 1.0 - f64::EPSILON;
        }
        match FeatureMap::new(phi) {
            Ok(f) => return Ok(f),
            Err(_) => continue,
        }
    }
    Err(Error::GenerationFailed { attempts: MAX_ATTEMPTS, reason: "feature matrix stayed rank deficient".into() })
}

/// Solves μᵀP = μᵀ, Σμ = 1 by replacing one equation of (Pᵀ − I)μ = 0 with
/// the normalization.
pub fn stationary_distribution(mrp: &FiniteMrp) -> Result<DVector<f64>> {
    if !mrp.is_irreducible() {
        return Err(Error::Model("chain is reducible; stationary law is not unique".into()));
    }
    let s = mrp.num_states();
    let mut sys = mrp.transition().transpose() - DMatrix::identity(s, s);
    sys.row_mut(s - 1).fill(1.0);
    let mut rhs = DVector::zeros(s);
    rhs[s - 1] = 1.0;
    let mut mu = linalg::guarded_solve(&sys, &rhs)
        .ok_or_else(|| Error::Model("stationary system is singular or ill-conditioned".into()))?;
    if mu.iter().any(|&x| x < -1e-12) {
        return Err(Error::Model("stationary solve produced negative mass".into()));
    }
    mu.iter_mut().for_each(|x| *x = x.max(0.0));
    let total = mu.sum();
    mu /= total;
    Ok(mu)
}

/// Dobrushin coefficient δ(Q) = max over row pairs of the total-variation distance.
pub fn dobrushin_coefficient(q: &DMatrix<f64>) -> f64 {
    let s = q.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..s {
        for j in (i + 1)..s {
            let tv: f64 = 0.5 * q.row(i).iter().zip(q.row(j).iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
            worst = worst.max(tv);
        }
    }
    worst
}

/// Smallest `t <= cap` with δ(Pᵗ) ≤ 1/4. Sub-multiplicativity of δ then
/// gives δ(Pᵏ) ≤ (1/4)^⌊k/t⌋ for every k.
pub fn mixing_time(mrp: &FiniteMrp, cap: usize) -> Result<usize> {
    if cap == 0 {
        return Err(Error::InvalidArgument("mixing cap must be >= 1".into()));
    }
    let p = mrp.transition();
    let mut power = p.clone();
    for t in 1..=cap {
        if dobrushin_coefficient(&power) <= 0.25 {
            return Ok(t);
        }
        power = &power * p;
    }
    Err(Error::MixingCapExceeded { cap })
}

/// Exact derived quantities for one (MRP, features) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsaInstance {
    #[serde(with = "serde_vec")]
    pub mu: DVector<f64>,
    #[serde(with = "serde_rows")]
    pub sigma_phi: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub a_bar: DMatrix<f64>,
    #[serde(with = "serde_vec")]
    pub b_bar: DVector<f64>,
    #[serde(with = "serde_vec")]
    pub theta_star: DVector<f64>,
    #[serde(with = "serde_rows")]
    pub sigma_eps: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub sigma_eps_opt: DMatrix<f64>,
    pub lambda_min: f64,
    /// `None` when the chain does not mix within [`DEFAULT_MIXING_CAP`] (e.g. periodic).
    pub t_mix: Option<usize>,
    #[serde(with = "serde_vec")]
    pub v_true: DVector<f64>,
    /// Least-squares projection of `v_true`; equals `theta_star` only when
    /// the features represent the value function exactly.
    #[serde(with = "serde_vec")]
    pub theta_ls: DVector<f64>,
}

/// One elementary outcome z = (s, reward atom, s') with its probability
/// μ(s)·prob(atom)·P(s'|s).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub s: usize,
    pub reward: f64,
    pub s_next: usize,
    pub prob: f64,
}

/// All outcomes with positive probability, in (s, atom, s') order.
pub fn enumerate_outcomes(mrp: &FiniteMrp, mu: &DVector<f64>) -> Vec<Outcome> {
    let mut out = Vec::new();
    let p = mrp.transition();
    for s in 0..mrp.num_states() {
        for &(reward, pr) in &mrp.reward_support()[s] {
            for s_next in 0..mrp.num_states() {
                let prob = mu[s] * pr * p[(s, s_next)];
                if prob > 0.0 {
                    out.push(Outcome { s, reward, s_next, prob });
                }
            }
        }
    }
    out
}

/// (s, s') pairs with weight μ(s)P(s'|s); the TD matrix A depends on nothing else.
pub fn enumerate_transitions(mrp: &FiniteMrp, mu: &DVector<f64>) -> Vec<(usize, usize, f64)> {
    let p = mrp.transition();
    let s = mrp.num_states();
    (0..s)
        .flat_map(|i| (0..s).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, mu[i] * p[(i, j)]))
        .filter(|&(_, _, w)| w > 0.0)
        .collect()
}

/// A(z) = φ(s)(φ(s) − γφ(s'))ᵀ.
pub fn td_a_matrix(features: &FeatureMap, gamma: f64, s: usize, s_next: usize) -> DMatrix<f64> {
    let phi = features.row_vector(s);
    let psi = &phi - features.row_vector(s_next) * gamma;
    &phi * psi.transpose()
}

/// b(z) = φ(s)·r.
pub fn td_b_vector(features: &FeatureMap, s: usize, reward: f64) -> DVector<f64> {
    features.row_vector(s) * reward
}

pub fn derive_instance(mrp: &FiniteMrp, features: &FeatureMap) -> Result<LsaInstance> {
    let s = mrp.num_states();
    if features.num_states() != s {
        return Err(Error::InvalidArgument(format!(
            "features cover {} states, MRP has {s}",
            features.num_states()
        )));
    }
    let gamma = mrp.gamma();
    let mu = stationary_distribution(mrp)?;
    let phi = features.matrix();
    let p = mrp.transition();
    let d_mu = DMatrix::from_diagonal(&mu);
    let r_bar = mrp.mean_rewards();

    let phit_d = phi.transpose() * &d_mu;
    let sigma_phi = linalg::symmetrize(&(&phit_d * phi));
    let a_bar = &phit_d * (phi - (p * phi) * gamma);
    let b_bar = &phit_d * &r_bar;

    if linalg::condition_number(&a_bar) > linalg::COND_LIMIT {
        return Err(Error::Instance("system matrix is numerically singular".into()));
    }
    let theta_star = linalg::guarded_solve(&a_bar, &b_bar)
        .ok_or_else(|| Error::Instance("system matrix is numerically singular".into()))?;
    let bellman = DMatrix::identity(s, s) - p * gamma;
    let v_true = linalg::guarded_solve(&bellman, &r_bar)
        .ok_or_else(|| Error::Instance("I − γP is numerically singular".into()))?;
    let theta_ls = linalg::guarded_solve(&sigma_phi, &(&phit_d * &v_true))
        .ok_or_else(|| Error::Instance("design matrix is numerically singular".into()))?;

    let d = features.dim();
    let mut sigma_eps = DMatrix::zeros(d, d);
    for z in enumerate_outcomes(mrp, &mu) {
        let eps = noise_at(features, gamma, &a_bar, &b_bar, &theta_star, z.s, z.reward, z.s_next);
        sigma_eps += &eps * eps.transpose() * z.prob;
    }
    let sigma_eps = linalg::symmetrize(&sigma_eps);

    let a_inv = linalg::guarded_inverse(&a_bar)
        .ok_or_else(|| Error::Instance("system matrix is numerically singular".into()))?;
    let root = linalg::psd_sqrt(&sigma_phi);
    let sigma_eps_opt = linalg::symmetrize(&(&root * &a_inv * &sigma_eps * a_inv.transpose() * &root));
    let lambda_min = linalg::lambda_min(&sigma_phi);
    let t_mix = match mixing_time(mrp, DEFAULT_MIXING_CAP) {
        Ok(t) => Some(t),
        Err(Error::MixingCapExceeded { .. }) => None,
        Err(e) => return Err(e),
    };

    Ok(LsaInstance {
        mu,
        sigma_phi,
        a_bar,
        b_bar,
        theta_star,
        sigma_eps,
        sigma_eps_opt,
        lambda_min,
        t_mix,
        v_true,
        theta_ls,
    })
}

/// ε(z) = (A(z) − Ā)θ − (b(z) − b̄), evaluated at an arbitrary θ.
#[allow(clippy::too_many_arguments)]
pub fn noise_at(
    features: &FeatureMap,
    gamma: f64,
    a_bar: &DMatrix<f64>,
    b_bar: &DVector<f64>,
    theta: &DVector<f64>,
    s: usize,
    reward: f64,
    s_next: usize,
) -> DVector<f64> {
    let a = td_a_matrix(features, gamma, s, s_next);
    let b = td_b_vector(features, s, reward);
    (a - a_bar) * theta - (b - b_bar)
}

impl LsaInstance {
    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    /// ‖x‖_Σφ.
    pub fn sigma_norm(&self, x: &DVector<f64>) -> f64 {
        linalg::quad_form(&self.sigma_phi, x).max(0.0).sqrt()
    }

    pub fn theta_star_sigma_norm(&self) -> f64 {
        self.sigma_norm(&self.theta_star)
    }

    /// ‖θ* − θ_LS‖_Σφ, a diagnostic of approximation error.
    pub fn projection_gap(&self) -> f64 {
        self.sigma_norm(&(&self.theta_star - &self.theta_ls))
    }

    /// Noise at the solution for one observed tuple.
    pub fn noise(&self, features: &FeatureMap, gamma: f64, s: usize, reward: f64, s_next: usize) -> DVector<f64> {
        noise_at(features, gamma, &self.a_bar, &self.b_bar, &self.theta_star, s, reward, s_next)
    }

    /// sup_z ‖ε(z)‖ over all positive-probability outcomes.
    pub fn noise_sup(&self, mrp: &FiniteMrp, features: &FeatureMap) -> f64 {
        enumerate_outcomes(mrp, &self.mu)
            .into_iter()
            .map(|z| self.noise(features, mrp.gamma(), z.s, z.reward, z.s_next).norm())
            .fold(0.0, f64::max)
    }

    /// Checks every structural invariant of a derived instance; returns a
    /// description of each violated one.
    pub fn check_invariants(&self, mrp: &FiniteMrp) -> Vec<String> {
        let mut bad = Vec::new();
        let gamma = mrp.gamma();
        let d = self.dim();
        if self.mu.iter().any(|&x| x < 0.0) || (self.mu.sum() - 1.0).abs() > 1e-10 {
            bad.push("mu is not a probability vector".to_string());
        }
        let drift = (mrp.transition().transpose() * &self.mu - &self.mu).amax();
        if drift > 1e-10 {
            bad.push(format!("mu^T P != mu^T (max deviation {drift:e})"));
        }
        for (name, m) in [("sigma_phi", &self.sigma_phi), ("sigma_eps", &self.sigma_eps), ("sigma_eps_opt", &self.sigma_eps_opt)] {
            if !linalg::is_symmetric(m, 1e-10) {
                bad.push(format!("{name} is not symmetric"));
            }
            if linalg::lambda_min(m) < -1e-10 {
                bad.push(format!("{name} is not positive semidefinite"));
            }
        }
        if !(self.lambda_min > 0.0) {
            bad.push("sigma_phi is not positive definite".to_string());
        }
        let residual = (&self.a_bar * &self.theta_star - &self.b_bar).amax();
        if residual > 1e-10 {
            bad.push(format!("A_bar theta* != b_bar (residual {residual:e})"));
        }
        let a_norm = linalg::op_norm(&self.a_bar);
        if a_norm > 1.0 + gamma + 1e-12 {
            bad.push(format!("‖A_bar‖ = {a_norm} exceeds 1 + gamma"));
        }
        if let Some(inv_root) = linalg::guarded_inverse(&linalg::psd_sqrt(&self.sigma_phi)) {
            let sigma_inv = &inv_root * &inv_root;
            let m = &inv_root * self.a_bar.transpose() * sigma_inv * &self.a_bar * &inv_root;
            let slack = linalg::loewner_slack(&(DMatrix::identity(d, d) * (1.0 - gamma).powi(2)), &m);
            if slack < -1e-9 {
                bad.push(format!("normalized A_bar lower bound (1-gamma)^2 I violated by {slack:e}"));
            }
        } else {
            bad.push("sigma_phi is not invertible".to_string());
        }
        bad
    }
}

/// Self-contained reproducibility snapshot (`instance.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSnapshot {
    pub mrp: FiniteMrp,
    pub features: FeatureMap,
    pub instance: LsaInstance,
}

impl InstanceSnapshot {
    pub fn derive(mrp: FiniteMrp, features: FeatureMap) -> Result<Self> {
        let instance = derive_instance(&mrp, &features)?;
        Ok(Self { mrp, features, instance })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Re-derives the instance from the stored MRP and features and lists
    /// every disagreement or invariant violation.
    pub fn verify(&self) -> Result<Vec<String>> {
        let fresh = derive_instance(&self.mrp, &self.features)?;
        let mut problems = self.instance.check_invariants(&self.mrp);
        let close_v = |a: &DVector<f64>, b: &DVector<f64>| a.len() == b.len() && (a - b).amax() <= 1e-9;
        let close_m = |a: &DMatrix<f64>, b: &DMatrix<f64>| a.shape() == b.shape() && (a - b).amax() <= 1e-9;
        let stored = &self.instance;
        let checks = [
            ("mu", close_v(&stored.mu, &fresh.mu)),
            ("sigma_phi", close_m(&stored.sigma_phi, &fresh.sigma_phi)),
            ("a_bar", close_m(&stored.a_bar, &fresh.a_bar)),
            ("b_bar", close_v(&stored.b_bar, &fresh.b_bar)),
            ("theta_star", close_v(&stored.theta_star, &fresh.theta_star)),
            ("sigma_eps", close_m(&stored.sigma_eps, &fresh.sigma_eps)),
            ("sigma_eps_opt", close_m(&stored.sigma_eps_opt, &fresh.sigma_eps_opt)),
            ("lambda_min", (stored.lambda_min - fresh.lambda_min).abs() <= 1e-9),
            ("t_mix", stored.t_mix == fresh.t_mix),
            ("v_true", close_v(&stored.v_true, &fresh.v_true)),
        ];
        for (name, ok) in checks {
            if !ok {
                problems.push(format!("stored {name} disagrees with the re-derived value"));
            }
        }
        Ok(problems)
    }
}
