//! Constant-step linear stochastic approximation
//! `θ_k = θ_{k−1} − α(A_k θ_{k−1} − b_k)`, tail averaging, products of the
//! random matrices `I − αA_k`, and the split of the error into a transient
//! and a fluctuation part.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::mrp_model::LsaInstance;

/// Norm above which a run is flagged as diverged and stopped.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// One observed pair `(A(Z_k), b(Z_k))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsaUpdate {
    pub a_mat: DMatrix<f64>,
    pub b_vec: DVector<f64>,
}

impl LsaUpdate {
    pub fn new(a_mat: DMatrix<f64>, b_vec: DVector<f64>) -> Result<Self> {
        if !a_mat.is_square() || a_mat.nrows() != b_vec.len() {
            return arg_err(format!(
                "A is {}x{} but b has length {}",
                a_mat.nrows(),
                a_mat.ncols(),
                b_vec.len()
            ));
        }
        if a_mat.iter().chain(b_vec.iter()).any(|x| !x.is_finite()) {
            return arg_err("update has non-finite entries");
        }
        Ok(Self { a_mat, b_vec })
    }
}

/// Anything that can act as `(A, b)` in the recursion without necessarily
/// materializing the matrix. TD updates are rank one and implement this
/// directly on feature rows.
pub trait LsaObservation {
    fn dim(&self) -> usize;
    /// `out ← A x`.
    fn apply_a(&self, x: &[f64], out: &mut [f64]);
    /// `out ← A x − b`.
    fn residual(&self, x: &[f64], out: &mut [f64]);
    fn to_update(&self) -> LsaUpdate;
}

impl LsaObservation for LsaUpdate {
    fn dim(&self) -> usize {
        self.b_vec.len()
    }

    fn apply_a(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..d).map(|j| self.a_mat[(i, j)] * x[j]).sum();
        }
    }

    fn residual(&self, x: &[f64], out: &mut [f64]) {
        self.apply_a(x, out);
        for (o, b) in out.iter_mut().zip(self.b_vec.iter()) {
            *o -= b;
        }
    }

    fn to_update(&self) -> LsaUpdate {
        self.clone()
    }
}

impl<T: LsaObservation + ?Sized> LsaObservation for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply_a(&self, x: &[f64], out: &mut [f64]) {
        (**self).apply_a(x, out)
    }
    fn residual(&self, x: &[f64], out: &mut [f64]) {
        (**self).residual(x, out)
    }
    fn to_update(&self) -> LsaUpdate {
        (**self).to_update()
    }
}

/// Which iterates enter the tail average.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailWindow {
    /// `θ_{n0}, …, θ_{n−1}`.
    Leading,
    /// `θ_{n0+1}, …, θ_n`.
    Trailing,
}

impl TailWindow {
    fn contains(self, k: usize, n0: usize, n: usize) -> bool {
        match self {
            TailWindow::Leading => k >= n0 && k < n,
            TailWindow::Trailing => k > n0 && k <= n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsaTrace {
    /// `θ_0, …, θ_n` when requested.
    pub iterates: Option<Vec<DVector<f64>>>,
    pub tail_average: DVector<f64>,
    pub final_iterate: DVector<f64>,
    pub n: usize,
    pub n0: usize,
    pub window: TailWindow,
    /// Set when some `‖θ_k‖` exceeded [`DIVERGENCE_NORM`] or became non-finite;
    /// the run stops at that step.
    pub diverged: bool,
    pub steps_run: usize,
}

/// `θ − α(Aθ − b)`.
pub fn lsa_step(theta: &DVector<f64>, update: &LsaUpdate, alpha: f64) -> Result<DVector<f64>> {
    if update.dim() != theta.len() || update.a_mat.ncols() != theta.len() {
        return arg_err(format!("theta has length {}, update has dimension {}", theta.len(), update.dim()));
    }
    if !(alpha > 0.0) {
        return arg_err(format!("alpha = {alpha} must be positive"));
    }
    Ok(theta - (&update.a_mat * theta - &update.b_vec) * alpha)
}

/// Runs `n` steps and averages over `θ_{n0}, …, θ_{n−1}`.
pub fn run_lsa<I>(updates: I, theta0: &DVector<f64>, alpha: f64, n: usize, n0: usize, keep_iterates: bool) -> Result<LsaTrace>
where
    I: IntoIterator,
    I::Item: LsaObservation,
{
    run_lsa_windowed(updates, theta0, alpha, n, n0, keep_iterates, TailWindow::Leading)
}

/// [`run_lsa`] with an explicit averaging window. `alpha = 0` is allowed
/// here (it freezes θ).
pub fn run_lsa_windowed<I>(
    updates: I,
    theta0: &DVector<f64>,
    alpha: f64,
    n: usize,
    n0: usize,
    keep_iterates: bool,
    window: TailWindow,
) -> Result<LsaTrace>
where
    I: IntoIterator,
    I::Item: LsaObservation,
{
    if n0 >= n {
        return arg_err(format!("need 0 <= n0 ({n0}) < n ({n})"));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return arg_err(format!("alpha = {alpha} must be a finite nonnegative number"));
    }
    let d = theta0.len();
    let mut theta = theta0.clone();
    let mut sum = DVector::zeros(d);
    let mut count = 0usize;
    let mut resid = vec![0.0; d];
    let mut iterates = keep_iterates.then(|| {
        let mut v = Vec::with_capacity(n + 1);
        v.push(theta.clone());
        v
    });
    if window.contains(0, n0, n) {
        sum += &theta;
        count += 1;
    }
    let mut stream = updates.into_iter();
    let mut diverged = false;
    let mut steps_run = 0;
    for k in 1..=n {
        let upd = stream.next().ok_or(Error::InputUnderrun { needed: n, got: k - 1 })?;
        if upd.dim() != d {
            return arg_err(format!("update {k} has dimension {}, theta has {d}", upd.dim()));
        }
        upd.residual(theta.as_slice(), &mut resid);
        for (t, r) in theta.iter_mut().zip(&resid) {
            *t -= alpha * r;
        }
        steps_run = k;
        if let Some(v) = iterates.as_mut() {
            v.push(theta.clone());
        }
        let norm = theta.norm();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            diverged = true;
            break;
        }
        if window.contains(k, n0, n) {
            sum += &theta;
            count += 1;
        }
    }
    let tail_average = if count > 0 { sum / count as f64 } else { theta.clone() };
    Ok(LsaTrace { iterates, tail_average, final_iterate: theta, n, n0, window, diverged, steps_run })
}

fn check_indices(len: usize, m: usize, n: usize) -> Result<()> {
    if m <= n && (m == 0 || n > len) {
        return arg_err(format!("indices {m}..={n} not covered by {len} updates (1-based)"));
    }
    Ok(())
}

/// `Γ_{m:n} = (I − αA_n)⋯(I − αA_m)` with 1-based indices; identity when `m > n`.
pub fn matrix_product(updates: &[LsaUpdate], alpha: f64, m: usize, n: usize) -> Result<DMatrix<f64>> {
    let d = updates.first().map(|u| u.dim()).ok_or_else(|| Error::InvalidArgument("no updates".into()))?;
    check_indices(updates.len(), m, n)?;
    let mut g = DMatrix::identity(d, d);
    if m > n {
        return Ok(g);
    }
    for u in &updates[m - 1..n] {
        g = (DMatrix::identity(d, d) - &u.a_mat * alpha) * g;
    }
    Ok(g)
}

/// `(Γ_{1:n}(θ0 − θ*), −α Σ_j Γ_{j+1:n} ε_j)` with `ε_j = (A_j − Ā)θ* − (b_j − b̄)`.
/// Their sum is `θ_n − θ*`.
pub fn error_decomposition(
    updates: &[LsaUpdate],
    instance: &LsaInstance,
    theta0: &DVector<f64>,
    alpha: f64,
    n: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = instance.dim();
    if theta0.len() != d {
        return arg_err(format!("theta0 has length {}, instance dimension is {d}", theta0.len()));
    }
    if n > updates.len() {
        return Err(Error::InputUnderrun { needed: n, got: updates.len() });
    }
    let theta_star = &instance.theta_star;
    let eye = DMatrix::identity(d, d);
    // suffix product Γ_{j+1:n}, grown right to left
    let mut suffix = eye.clone();
    let mut fluct = DVector::zeros(d);
    for u in updates[..n].iter().rev() {
        if u.dim() != d {
            return arg_err("update dimension does not match the instance");
        }
        let eps = (&u.a_mat - &instance.a_bar) * theta_star - (&u.b_vec - &instance.b_bar);
        fluct -= &suffix * eps * alpha;
        suffix *= &eye - &u.a_mat * alpha;
    }
    let transient = suffix * (theta0 - theta_star);
    Ok((transient, fluct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::SeedSpec;
    use rand::Rng;

    fn random_update(rng: &mut impl Rng, d: usize) -> LsaUpdate {
        LsaUpdate {
            a_mat: DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)),
            b_vec: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn step_arithmetic() {
        let u = LsaUpdate::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0)).unwrap();
        let t = lsa_step(&DVector::zeros(1), &u, 0.1).unwrap();
        assert!((t[0] - 0.1).abs() < 1e-16);
        assert!(lsa_step(&DVector::zeros(2), &u, 0.1).is_err());
        assert!(lsa_step(&DVector::zeros(1), &u, 0.0).is_err());
    }

    #[test]
    fn step_matches_triple_loop() {
        let mut rng = SeedSpec::new(1, 0).rng();
        let u = random_update(&mut rng, 3);
        let theta = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let alpha = 0.37;
        let got = lsa_step(&theta, &u, alpha).unwrap();
        for i in 0..3 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += u.a_mat[(i, j)] * theta[j];
            }
            let want = theta[i] - alpha * (acc - u.b_vec[i]);
            assert!((got[i] - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn fixed_point_is_stationary() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, -0.3, 1.0]);
        let theta = DVector::from_vec(vec![0.4, -1.2]);
        let u = LsaUpdate::new(a.clone(), &a * &theta).unwrap();
        assert!((lsa_step(&theta, &u, 0.3).unwrap() - &theta).amax() < 1e-15);
    }

    #[test]
    fn scalar_contraction_is_exact_geometric() {
        let (gamma, r0, alpha, n) = (0.5, 1.0, 0.1, 40);
        let u = LsaUpdate::new(DMatrix::from_element(1, 1, 1.0 - gamma), DVector::from_element(1, r0)).unwrap();
        let theta0 = DVector::from_element(1, 0.0);
        let tr = run_lsa(std::iter::repeat(&u).take(n), &theta0, alpha, n, n / 2, false).unwrap();
        let star = r0 / (1.0 - gamma);
        let want = (1.0 - alpha * (1.0 - gamma)).powi(n as i32) * (0.0 - star);
        assert!((tr.final_iterate[0] - star - want).abs() < 1e-14);
    }

    #[test]
    fn leading_window_average() {
        let mut rng = SeedSpec::new(2, 0).rng();
        let ups: Vec<_> = (0..4).map(|_| random_update(&mut rng, 2)).collect();
        let tr = run_lsa(&ups, &DVector::from_element(2, 1.0), 0.2, 4, 2, true).unwrap();
        let it = tr.iterates.as_ref().unwrap();
        assert_eq!(it.len(), 5);
        assert!((&tr.tail_average - (&it[2] + &it[3]) / 2.0).amax() < 1e-15);
        let tr = run_lsa_windowed(&ups, &DVector::from_element(2, 1.0), 0.2, 4, 2, true, TailWindow::Trailing).unwrap();
        let it = tr.iterates.as_ref().unwrap();
        assert!((&tr.tail_average - (&it[3] + &it[4]) / 2.0).amax() < 1e-15);
    }

    #[test]
    fn matches_reference_recursion() {
        let mut rng = SeedSpec::new(3, 0).rng();
        let ups: Vec<_> = (0..10).map(|_| random_update(&mut rng, 2)).collect();
        let alpha = 0.05;
        let mut t = [0.3, -0.7];
        let mut sum = [0.0; 2];
        for (k, u) in ups.iter().enumerate() {
            let a = &u.a_mat;
            let r0 = a[(0, 0)] * t[0] + a[(0, 1)] * t[1] - u.b_vec[0];
            let r1 = a[(1, 0)] * t[0] + a[(1, 1)] * t[1] - u.b_vec[1];
            if k >= 5 {
                sum[0] += t[0];
                sum[1] += t[1];
            }
            t = [t[0] - alpha * r0, t[1] - alpha * r1];
        }
        let tr = run_lsa(&ups, &DVector::from_vec(vec![0.3, -0.7]), alpha, 10, 5, false).unwrap();
        assert!((tr.final_iterate[0] - t[0]).abs() < 1e-14 && (tr.final_iterate[1] - t[1]).abs() < 1e-14);
        assert!((tr.tail_average[0] - sum[0] / 5.0).abs() < 1e-14);
        assert!((tr.tail_average[1] - sum[1] / 5.0).abs() < 1e-14);
    }

    #[test]
    fn underrun_and_bad_window() {
        let u = LsaUpdate::new(DMatrix::identity(1, 1), DVector::zeros(1)).unwrap();
        let err = run_lsa(std::iter::repeat(&u).take(3), &DVector::zeros(1), 0.1, 5, 2, false).unwrap_err();
        assert!(matches!(err, Error::InputUnderrun { needed: 5, got: 3 }));
        assert!(run_lsa(std::iter::repeat(&u), &DVector::zeros(1), 0.1, 5, 5, false).is_err());
    }

    #[test]
    fn zero_alpha_freezes() {
        let mut rng = SeedSpec::new(4, 0).rng();
        let ups: Vec<_> = (0..20).map(|_| random_update(&mut rng, 3)).collect();
        let theta0 = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let tr = run_lsa(&ups, &theta0, 0.0, 20, 10, true).unwrap();
        assert!(tr.iterates.unwrap().iter().all(|t| t == &theta0));
        assert_eq!(tr.tail_average, theta0);
    }

    #[test]
    fn divergence_is_flagged() {
        let u = LsaUpdate::new(DMatrix::from_element(1, 1, -10.0), DVector::zeros(1)).unwrap();
        let tr = run_lsa(std::iter::repeat(&u), &DVector::from_element(1, 1.0), 1.0, 100, 50, false).unwrap();
        assert!(tr.diverged);
        assert!(tr.steps_run < 100);
    }

    #[test]
    fn product_conventions() {
        let mut rng = SeedSpec::new(5, 0).rng();
        let ups: Vec<_> = (0..3).map(|_| random_update(&mut rng, 2)).collect();
        assert_eq!(matrix_product(&ups, 0.3, 3, 2).unwrap(), DMatrix::identity(2, 2));
        assert_eq!(matrix_product(&ups[..1], 0.0, 1, 1).unwrap(), DMatrix::identity(2, 2));
        assert!(matrix_product(&ups, 0.3, 1, 4).is_err());
        assert!(matrix_product(&ups, 0.3, 0, 2).is_err());
        let f: Vec<_> = ups.iter().map(|u| DMatrix::identity(2, 2) - &u.a_mat * 0.3).collect();
        let oracle = &f[2] * (&f[1] * &f[0]);
        assert!((matrix_product(&ups, 0.3, 1, 3).unwrap() - oracle).amax() < 1e-13);
    }

    #[test]
    fn product_semigroup() {
        let mut rng = SeedSpec::new(6, 0).rng();
        let ups: Vec<_> = (0..12).map(|_| random_update(&mut rng, 3)).collect();
        let (j, m, n) = (2, 7, 11);
        let lhs = matrix_product(&ups, 0.1, m, n).unwrap() * matrix_product(&ups, 0.1, j, m - 1).unwrap();
        assert!((lhs - matrix_product(&ups, 0.1, j, n).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn trait_paths_agree() {
        let mut rng = SeedSpec::new(7, 0).rng();
        let u = random_update(&mut rng, 3);
        let x = [0.2, -0.4, 1.1];
        let mut out = [0.0; 3];
        u.residual(&x, &mut out);
        let want = &u.a_mat * DVector::from_column_slice(&x) - &u.b_vec;
        assert!((DVector::from_column_slice(&out) - want).amax() < 1e-15);
    }
}
