//! Fading, mobility and path-loss processes.

mod common;

use common::*;
use mtnetopt::channel::{
    mobility_step, ou_step, path_loss_from_positions, truncated_pareto, ChannelProcess, FadingDomain, LevyParams, MobilityState,
    NodeMotion, OuFading, PathLossParams, Phase,
};
use mtnetopt::network::Topology;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ou_moments_match_the_stationary_law() {
    // a_H dt = 0.5 keeps successive powers weakly correlated.
    let (power, cov) = ou_statistics(10.0, 0.05, 200_000, &[1, 2, 4], 7);
    assert!((power - 1.0).abs() < 0.02, "E|h|^2 = {power}");
    for (k, c) in [1usize, 2, 4].iter().zip(&cov) {
        let exact = (-10.0 * 0.05 * *k as f64 / 2.0).exp();
        assert!((c - exact).abs() < 0.03, "lag {k}: {c} vs {exact}");
    }
}

#[test]
fn ou_at_the_slot_length_decorrelates_at_the_right_rate() {
    let (_, cov) = ou_statistics(50.0, 1e-3, 200_000, &[10, 40], 8);
    for (k, c) in [10usize, 40].iter().zip(&cov) {
        let exact = (-50.0 * 1e-3 * *k as f64 / 2.0).exp();
        assert!((c - exact).abs() < 0.06, "lag {k}: {c} vs {exact}");
    }
}

#[test]
fn frozen_fading_stays_put() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = OuFading::stationary(3, 0.0, &mut rng).unwrap();
    let t = ou_step(&s, 1.0, &mut rng).unwrap();
    assert_eq!(s.h_s, t.h_s);
}

#[test]
fn invalid_parameters_are_rejected() {
    assert!(OuFading::new(vec![], -1.0).is_err());
    assert!(OuFading::new(vec![], f64::NAN).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = OuFading::stationary(1, 1.0, &mut rng).unwrap();
    assert!(ou_step(&s, -1e-3, &mut rng).is_err());
}

#[test]
fn path_loss_examples() {
    let pl = PathLossParams::normalized(1.8, 75.0);
    assert!((pl.gain_at(10.0) - 1.0).abs() < 1e-12);
    assert_eq!(pl.gain_at(10.0), pl.gain_at(75.0));
    assert!((pl.gain_at(150.0) - 2f64.powf(-1.8)).abs() < 1e-12);
    let v = pl.v_max_for_epsilon(6e-4);
    assert!((pl.epsilon(v) - 6e-4).abs() < 1e-15);
}

#[test]
fn clipped_mean_matches_monte_carlo() {
    let domain = FadingDomain { min: 0.5, max: 3.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 200_000;
    let mc = (0..n).map(|_| domain.sample(&mut rng)).sum::<f64>() / n as f64;
    assert!((mc - domain.mean_magnitude()).abs() < 5e-3);
    // Unclipped Rayleigh mean is sqrt(pi)/2.
    assert!((FadingDomain::UNBOUNDED.mean_magnitude() - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-9);
}

#[test]
fn composite_snapshot_respects_the_domain() {
    let topo = Topology::relay4();
    let mut fr = ChaCha8Rng::seed_from_u64(1);
    let mut mr = ChaCha8Rng::seed_from_u64(2);
    let pl = PathLossParams::normalized(1.8, 75.0);
    let mut ch = ChannelProcess::new(&topo, 10.0, LevyParams::new(1.0, 30.0), pl, &mut fr, &mut mr).unwrap();
    for _ in 0..500 {
        let csi = ch.csi(DOMAIN);
        assert!(csi.hs.iter().all(|h| (0.5..=3.0).contains(h)));
        assert!(csi.hl.iter().all(|h| *h > 0.0 && *h <= 1.0));
        ch.advance(&topo, 1e-3, &mut fr, &mut mr).unwrap();
    }
    assert!((ch.t - 0.5).abs() < 1e-12);
}

fn walk(v_max: f64, radius: f64, dt: f64, steps: usize, seed: u64) -> Vec<MobilityState> {
    let topo = Topology::relay4();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = LevyParams::new(v_max, radius);
    params.pause_min = 0.1;
    params.pause_max = 2.0;
    let mut s = MobilityState::from_topology(&topo, params, &mut rng);
    let mut out = vec![s.clone()];
    for _ in 0..steps {
        s = mobility_step(&s, dt, &mut rng);
        out.push(s.clone());
    }
    out
}

#[test]
fn walkers_move_pause_and_stay_in_their_region() {
    let path = walk(5.0, 20.0, 0.05, 4000, 9);
    let mut walked = false;
    let mut paused = false;
    for s in &path {
        for n in &s.nodes {
            if let NodeMotion::Mobile(m) = n {
                let off = (m.position[0] - m.anchor[0]).hypot(m.position[1] - m.anchor[1]);
                assert!(off <= 20.0 + 1e-9);
                walked |= m.phase == Phase::Walking;
                paused |= m.phase == Phase::Paused;
            }
        }
    }
    assert!(walked && paused);
    let topo = Topology::relay4();
    let first = path[0].positions();
    let last = path.last().unwrap().positions();
    for (k, n) in topo.nodes.iter().enumerate() {
        assert_eq!(first[k] == last[k], !n.mobile, "node {k}");
    }
}

#[test]
fn truncated_pareto_stays_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let v = truncated_pareto(&mut rng, 1.0, 1.0, 100.0);
        assert!((1.0..=100.0).contains(&v));
    }
    assert_eq!(truncated_pareto(&mut rng, 1.0, 5.0, 5.0), 5.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Speeds stay below v_max, so per-step path-loss changes stay below epsilon dt.
    #[test]
    fn path_loss_drift_is_bounded(seed in any::<u64>(), v_max in 0.5f64..20.0) {
        let topo = Topology::relay4();
        let pl = PathLossParams::normalized(1.8, 75.0);
        let dt = 0.02;
        let path = walk(v_max, 40.0, dt, 500, seed);
        let bound = pl.epsilon(v_max) * dt;
        for w in path.windows(2) {
            for (a, b) in w[0].positions().iter().zip(w[1].positions()) {
                prop_assert!((a[0] - b[0]).hypot(a[1] - b[1]) <= v_max * dt * (1.0 + 1e-9));
            }
            let h0 = path_loss_from_positions(&w[0], &topo, pl).h_l;
            let h1 = path_loss_from_positions(&w[1], &topo, pl).h_l;
            for (a, b) in h0.iter().zip(&h1) {
                prop_assert!((a - b).abs() <= bound * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn one_step_noise_has_the_exact_variance(a_h in 0.1f64..100.0, dt in 1e-4f64..0.5) {
        // Var of one exact step from a fixed state: 1 - exp(-a_H dt).
        let mut rng = ChaCha8Rng::seed_from_u64(a_h.to_bits() ^ dt.to_bits());
        let start = OuFading::new(vec![num_complex::Complex64::new(1.0, 0.0)], a_h).unwrap();
        let n = 4000;
        let mut acc = 0.0;
        for _ in 0..n {
            let s = ou_step(&start, dt, &mut rng).unwrap();
            acc += (s.h_s[0] - start.h_s[0] * (-0.5 * a_h * dt).exp()).norm_sqr();
        }
        let var = 1.0 - (-a_h * dt).exp();
        prop_assert!((acc / n as f64 - var).abs() <= 0.1 * var + 1e-12);
    }
}
