use proptest::prelude::*;
use rayon::prelude::*;
use tdlab_core::linalg;
use tdlab_core::lsa_core::{error_decomposition, run_lsa, run_lsa_windowed, LsaUpdate, TailWindow};
use tdlab_core::mrp_model::{
    derive_instance, enumerate_outcomes, make_random_features, make_random_mrp, stationary_distribution, td_a_matrix,
    td_b_vector, FeatureMap, FiniteMrp,
};
use tdlab_core::samplers::{iid_sampler, SeedSpec};
use tdlab_core::td_algorithms::{td_update_from_observation, TdContext, TdRunConfig};
use tdlab_core::{DMatrix, DVector};

fn instance(seed: u64, s: usize, d: usize, gamma: f64) -> (FiniteMrp, FeatureMap, tdlab_core::LsaInstance) {
    let mrp = make_random_mrp(s, 3.min(s), gamma, seed).unwrap();
    let f = make_random_features(&mrp, d, seed ^ 0xABCD).unwrap();
    let inst = derive_instance(&mrp, &f).unwrap();
    (mrp, f, inst)
}

#[test]
fn enumerated_expectations_match_system() {
    for seed in 0..8 {
        let (mrp, f, inst) = instance(seed, 10, 3, 0.9);
        let mut a = DMatrix::zeros(3, 3);
        let mut b = DVector::zeros(3);
        for z in enumerate_outcomes(&mrp, &inst.mu) {
            a += td_a_matrix(&f, mrp.gamma(), z.s, z.s_next) * z.prob;
            b += td_b_vector(&f, z.s, z.reward) * z.prob;
        }
        assert!((a - &inst.a_bar).amax() < 1e-12);
        assert!((b - &inst.b_bar).amax() < 1e-12);
    }
}

#[test]
fn relabeling_states_is_harmless() {
    let (mrp, f, inst) = instance(3, 7, 3, 0.85);
    let perm = [6, 2, 0, 5, 1, 3, 4];
    let mrp2 = mrp.relabel(&perm).unwrap();
    let f2 = f.relabel(&perm).unwrap();
    let inst2 = derive_instance(&mrp2, &f2).unwrap();
    let mu2 = stationary_distribution(&mrp2).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert!((inst.mu[i] - mu2[p]).abs() < 1e-12);
    }
    assert!((&inst.theta_star - &inst2.theta_star).amax() < 1e-10);
    let e1 = linalg::sym_eigenvalues(&inst.sigma_phi);
    let e2 = linalg::sym_eigenvalues(&inst2.sigma_phi);
    assert!(e1.iter().zip(&e2).all(|(a, b)| (a - b).abs() < 1e-12));
    assert_eq!(inst.t_mix, inst2.t_mix);
}

#[test]
fn two_state_mixing_closed_form() {
    for seed in 0..20u64 {
        let mut rng = SeedSpec::new(seed, 77).rng();
        let b: f64 = rand::Rng::random_range(&mut rng, 0.01..0.99);
        let c: f64 = rand::Rng::random_range(&mut rng, 0.01..0.99);
        let mrp =
            FiniteMrp::with_deterministic_rewards(DMatrix::from_row_slice(2, 2, &[1.0 - b, b, c, 1.0 - c]), &[0.0, 1.0], 0.5)
                .unwrap();
        let r = (1.0 - b - c).abs();
        let want = if r == 0.0 { 1 } else { ((4f64).ln() / (1.0 / r).ln()).ceil().max(1.0) as usize };
        assert_eq!(tdlab_core::mrp_model::mixing_time(&mrp, 10_000).unwrap(), want, "b={b} c={c}");
    }
}

#[test]
fn sampled_updates_respect_noise_constants() {
    let (mrp, f, inst) = instance(11, 12, 4, 0.9);
    let g = mrp.gamma();
    let th = inst.theta_star.norm();
    for obs in iid_sampler(&mrp, &inst.mu, SeedSpec::new(5, 0)).take(20_000) {
        let u = td_update_from_observation(&obs, &f, g);
        assert!(linalg::op_norm(&u.a_mat) <= 1.0 + g);
        assert!(inst.noise(&f, g, obs.s, obs.reward, obs.s_next).norm() <= 2.0 * (1.0 + g) * (th + 1.0));
    }
}

#[test]
fn decomposition_reconstructs_last_iterate() {
    let (mrp, f, inst) = instance(4, 6, 3, 0.7);
    let updates: Vec<LsaUpdate> = iid_sampler(&mrp, &inst.mu, SeedSpec::new(8, 0))
        .take(50)
        .map(|o| td_update_from_observation(&o, &f, 0.7))
        .collect();
    let theta0 = DVector::from_vec(vec![3.0, -2.0, 1.0]);
    let alpha = 0.05;
    let (tr, fl) = error_decomposition(&updates, &inst, &theta0, alpha, 50).unwrap();
    let run = run_lsa(&updates, &theta0, alpha, 50, 25, false).unwrap();
    assert!(((tr + fl) - (&run.final_iterate - &inst.theta_star)).norm() <= 1e-9);

    let (t1, f1) = error_decomposition(&updates, &inst, &theta0, alpha, 1).unwrap();
    let u = &updates[0];
    let eye = DMatrix::identity(3, 3);
    let want_t = (&eye - &u.a_mat * alpha) * (&theta0 - &inst.theta_star);
    let eps = (&u.a_mat - &inst.a_bar) * &inst.theta_star - (&u.b_vec - &inst.b_bar);
    assert!((t1 - want_t).amax() < 1e-14);
    assert!((f1 + eps * alpha).amax() < 1e-14);
}

#[test]
fn decomposition_vanishes_without_noise_at_the_solution() {
    let (_, _, inst) = instance(5, 5, 2, 0.6);
    let upd = LsaUpdate::new(inst.a_bar.clone(), inst.b_bar.clone()).unwrap();
    let ups = vec![upd; 30];
    let (t, f) = error_decomposition(&ups, &inst, &inst.theta_star, 0.1, 30).unwrap();
    assert!(t.amax() < 1e-15 && f.amax() < 1e-15);
}

#[test]
fn universal_step_never_diverges() {
    let (mrp, f, inst) = instance(21, 20, 5, 0.95);
    let alpha = (1.0 - 0.95) / 256.0;
    let ctx = TdContext::new(&mrp, &f, &inst).unwrap();
    let diverged: usize = (0..1000u64)
        .into_par_iter()
        .map(|r| ctx.run_td0(&TdRunConfig::new(alpha, 100_000, SeedSpec::new(31, r))).unwrap().diverged as usize)
        .sum();
    assert_eq!(diverged, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tail_average_ignores_order_within_window(vals in proptest::collection::vec(-5.0f64..5.0, 12)) {
        // constant A = I, alpha = 1 makes theta_k = b_k, so the iterates are chosen directly
        let ups: Vec<LsaUpdate> = vals
            .iter()
            .map(|&v| LsaUpdate::new(DMatrix::identity(1, 1), DVector::from_element(1, v)).unwrap())
            .collect();
        let mut rev = ups.clone();
        rev[6..].reverse();
        let t0 = DVector::zeros(1);
        let a = run_lsa_windowed(&ups, &t0, 1.0, 12, 6, false, TailWindow::Trailing).unwrap();
        let b = run_lsa_windowed(&rev, &t0, 1.0, 12, 6, false, TailWindow::Trailing).unwrap();
        prop_assert!((a.tail_average[0] - b.tail_average[0]).abs() < 1e-12);
    }

    #[test]
    fn symmetric_psd_outputs(seed in 0u64..1000) {
        let mrp = make_random_mrp(5, 2, 0.8, seed).unwrap();
        let f = make_random_features(&mrp, 2, seed).unwrap();
        let inst = derive_instance(&mrp, &f).unwrap();
        prop_assert!(inst.check_invariants(&mrp).is_empty());
    }
}
