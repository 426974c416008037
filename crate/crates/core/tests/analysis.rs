//! Stability condition, error bound and the mean and virtual dynamics.

mod common;

use common::*;
use mtnetopt::analysis::{
    drift_matrix, error_bound, error_bound_unchecked, estimate_params, integrate_mcts, leading_minors, local_rates, rho_closed_form,
    stability_condition, AnalysisError, EstimateOptions, RateMethod, SampleState,
};
use mtnetopt::oracle::{draw_fading_samples, solve_inner, solve_outer_with_samples, OracleConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn minors_of_a_diagonal_matrix() {
    let a = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 3.0, -1.0]));
    assert_eq!(leading_minors(&a), vec![2.0, 6.0, -6.0]);
}

#[test]
fn local_rates_are_positive_at_the_optimum() {
    let (problem, csi) = nominal();
    let y = [0.4, 0.3, 0.2, 0.25];
    let pt = solve_inner(&problem, &y, &csi, &OracleConfig::default()).unwrap();
    let lr = local_rates(&pt, &csi, &problem, 1e-6).unwrap();
    assert!(lr.alpha_x(RateMethod::SpectralAbscissa) > 0.0);
    assert!(lr.alpha_y > 0.0 && lr.alpha(RateMethod::SpectralAbscissa) > 0.0);
    // The symmetric part ignores the rotation of the saddle dynamics.
    assert!(lr.alpha_x(RateMethod::SymmetricPart) <= lr.alpha_x(RateMethod::SpectralAbscissa) + 1e-12);
}

#[test]
fn estimates_grow_with_the_sample() {
    let (problem, csi) = nominal();
    let y = [0.4, 0.3, 0.2, 0.25];
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let states: Vec<SampleState> = draw_fading_samples(problem.num_links(), 12, DOMAIN, &mut rng)
        .into_iter()
        .map(|hs| {
            let csi = mtnetopt::network::Csi::new(hs, csi.hl.clone());
            SampleState { point: solve_inner(&problem, &y, &csi, &OracleConfig::default()).unwrap(), csi }
        })
        .collect();
    let opts = EstimateOptions::default();
    let few = estimate_params(&problem, &states[..4], &opts).unwrap();
    let all = estimate_params(&problem, &states, &opts).unwrap();
    assert!(all.alpha_x <= few.alpha_x && all.alpha_y <= few.alpha_y && all.alpha <= few.alpha);
    assert!(all.l_x >= few.l_x && all.l_y >= few.l_y && all.v_h >= few.v_h && all.v_y >= few.v_y);
    assert!(matches!(estimate_params(&problem, &[], &opts), Err(AnalysisError::EmptySample)));
}

#[test]
fn unstable_parameters_have_no_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut p = random_params(&mut rng);
    p.l_y = 1e3;
    assert!(!stability_condition(&p, 10.0, 1e-3, 30.0, 0.25).stable);
    assert!(matches!(error_bound(&p, 10.0, 6e-4, 1e-3, 30.0, 0.25), Err(AnalysisError::Unstable { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn determinant_matches_closed_form(seed in any::<u64>(), n_s in 1.0f64..1000.0, a_h in 0.1f64..1000.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng);
        let a = drift_matrix(&p, a_h, 1e-3, n_s, 0.25);
        prop_assert_eq!(a.clone(), a.transpose());
        let b = error_bound_unchecked(&p, a_h, 6e-4, 1e-3, n_s, 0.25);
        let closed = rho_closed_form(&p, a_h, 1e-3, n_s, 0.25);
        prop_assert!((b.rho - closed).abs() <= 1e-9 * b.rho.max(closed));
    }

    /// For a positive definite 5x5 matrix, lambda_min >= det ((n-1)/||A||_F^2)^((n-1)/2).
    #[test]
    fn smallest_eigenvalue_is_bounded_by_the_determinant(seed in any::<u64>(), n_s in 1.0f64..1000.0, a_h in 0.1f64..1000.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng);
        let v = stability_condition(&p, a_h, 1e-3, n_s, 0.25);
        if v.minors_positive {
            let a = drift_matrix(&p, a_h, 1e-3, n_s, 0.25);
            let b = error_bound_unchecked(&p, a_h, 6e-4, 1e-3, n_s, 0.25);
            let det = a.determinant();
            let lower = det * (4.0 / a.norm_squared()).powi(2);
            prop_assert!(b.lambda_min >= lower * (1.0 - 1e-9));
            prop_assert!(b.lambda_min > 0.0);
        }
    }

    /// The numerator of the bound grows with the fading rate.
    #[test]
    fn bound_numerator_is_monotone_in_fading_rate(seed in any::<u64>(), n_s in 1.0f64..1000.0, a_h in 0.1f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng);
        let lo = stability_condition(&p, a_h, 1e-3, n_s, 0.25);
        let hi = stability_condition(&p, 2.0 * a_h, 1e-3, n_s, 0.25);
        if lo.stable && hi.stable {
            let b1 = error_bound_unchecked(&p, a_h, 6e-4, 1e-3, n_s, 0.25);
            let b2 = error_bound_unchecked(&p, 2.0 * a_h, 6e-4, 1e-3, n_s, 0.25);
            prop_assert!(b2.c >= b1.c * (1.0 - 1e-12));
            prop_assert!(b2.bound * b2.rho / b2.eta >= b1.bound * b1.rho / b1.eta * (1.0 - 1e-9));
        }
    }
}

#[test]
fn mean_dynamics_rest_at_stationary_points() {
    let (problem, csi) = nominal();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let samples = draw_fading_samples(problem.num_links(), 64, DOMAIN, &mut rng);
    let cfg = OracleConfig::default();
    let ystar = solve_outer_with_samples(&problem, &csi.hl, &samples, &cfg, None).unwrap();
    let xhat = solve_inner(&problem, &ystar, &csi, &cfg).unwrap().x();
    let traj = integrate_mcts(&problem, &xhat, &ystar, &|_| csi.clone(), &samples, 0.01, 200).unwrap();
    let end = traj.last().unwrap();
    assert!(max_abs_diff(&end.x, &xhat) <= 1e-8 && max_abs_diff(&end.y, &ystar) <= 1e-8);
}

#[test]
fn mean_dynamics_approach_the_target_on_a_static_channel() {
    let (problem, csi) = nominal();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let samples = draw_fading_samples(problem.num_links(), 64, DOMAIN, &mut rng);
    let ystar = solve_outer_with_samples(&problem, &csi.hl, &samples, &OracleConfig::default(), None).unwrap();
    let x0 = vec![0.0; problem.dim_x()];
    let run = |dt: f64, steps: usize| integrate_mcts(&problem, &x0, &[0.5; 4], &|_| csi.clone(), &samples, dt, steps).unwrap();
    let traj = run(0.02, 2000);
    assert!(dist(&traj.last().unwrap().y, &ystar) <= 1e-3);
    // First-order consistency: halving dt moves the endpoint by O(dt).
    let short = run(0.02, 50).last().unwrap().y.clone();
    let half = run(0.01, 100).last().unwrap().y.clone();
    let quarter = run(0.005, 200).last().unwrap().y.clone();
    assert!(dist(&half, &quarter) < 0.7 * dist(&short, &half));
}

#[test]
fn virtual_rate_error_vanishes_on_static_path_loss() {
    let (problem, csi) = nominal();
    let mean: f64 =
        (0..3).map(|seed| norm(&vsds_run(&problem, &csi, 10.0, true, 0.05, 600, 0.05, seed).last().unwrap().y_err)).sum::<f64>() / 3.0;
    assert!(mean <= 1e-3, "{mean:e}");
}

/// Without noise the gap pair dissipates in the norm ||x~||^2 + N_s ||y~||^2,
/// since the coupling blocks are negative transposes of each other.
#[test]
fn virtual_gap_energy_decays_without_noise() {
    let (problem, csi) = nominal();
    let mut static_csi = csi.clone();
    static_csi.hs.iter_mut().for_each(|h| *h = 0.0);
    for seed in [44, 45] {
        let path = vsds_gap_only(&problem, &static_csi, 0.05, 400, seed);
        let energy: Vec<f64> = path.iter().map(|u| norm(&u.x_gap).powi(2) + 30.0 * norm(&u.y_gap).powi(2)).collect();
        assert!(energy.windows(2).all(|w| w[1] <= w[0]));
        assert!(norm(&path.last().unwrap().x_gap) < 0.5 * norm(&path[0].x_gap));
        assert!(path.iter().all(|u| norm(&u.x_err) <= 1e-12 && norm(&u.y_err) <= 1e-12));
    }
}
