//! Two-timescale iteration on frozen and drifting channels.

mod common;

use common::*;
use mtnetopt::oracle::{solve_inner, solve_joint, OracleConfig};
use mtnetopt::solver::{
    inner_step, inner_step_projected, outer_step, Algorithm, CompensationConfig, FrameClock, ScheduleKind, SolverConfig, StepSchedule,
    TwoTimescale,
};

fn diminishing() -> StepSchedule {
    StepSchedule { kind: ScheduleKind::Diminishing, gamma: 0.25, mu0: 0.05, decay: 1000.0 }
}

#[test]
fn schedule_and_clock() {
    let s = StepSchedule { kind: ScheduleKind::Diminishing, gamma: 0.1, mu0: 0.4, decay: 1.0 };
    assert_eq!((s.mu(1), s.mu(2), s.mu(4)), (0.4, 0.2, 0.1));
    let c = StepSchedule { kind: ScheduleKind::Constant, ..s };
    assert_eq!(c.mu(1000), 0.4);
    let mut clock = FrameClock::new(1e-3, 30);
    for _ in 0..61 {
        clock.tick();
    }
    assert_eq!(clock.frame(), 2);
    assert!((clock.time() - 2e-3).abs() < 1e-15);
}

#[test]
fn stationary_points_are_fixed_points_of_both_updates() {
    let (problem, csi) = nominal();
    let opt = solve_joint(&problem, &csi, &OracleConfig::default(), None).unwrap();
    for gamma in [0.01, 0.25, 1.0] {
        let next = inner_step(&problem, &opt, &csi, gamma, None, None).unwrap();
        assert!(max_abs_diff(&next.x(), &opt.x()) <= 1e-9);
    }
    let r = outer_step(&problem, &opt, 0.05, None);
    assert!(max_abs_diff(&r, &opt.r) <= 1e-9);
}

#[test]
fn projected_gradient_step_keeps_power_feasible() {
    let (problem, csi) = nominal();
    let opt = solve_joint(&problem, &csi, &OracleConfig::default(), None).unwrap();
    let mut pt = opt.clone();
    pt.p.iter_mut().for_each(|p| *p *= 0.5);
    let next = inner_step_projected(&problem, &pt, &csi, 0.1, None).unwrap();
    let w = mtnetopt::network::capacity_residuals(&next.r, &next.p, &csi, &problem);
    assert!(w.iter().all(|&v| v <= 1e-8));
    assert!(next.lambda.iter().all(|&l| l >= 0.0));
}

#[test]
fn frozen_channel_converges_to_the_joint_optimum() {
    let (problem, csi) = nominal();
    let errs = static_run(&problem, &csi, diminishing(), 3000);
    let (ey, ex) = *errs.last().unwrap();
    assert!(ey <= 1e-6 && ex <= 1e-6, "{ey:e} {ex:e}");
}

#[test]
fn delayed_multipliers_still_converge_on_a_frozen_channel() {
    let (problem, csi) = nominal();
    let ocfg = OracleConfig::default();
    let ystar = solve_joint(&problem, &csi, &ocfg, None).unwrap().r;
    let start = solve_inner(&problem, &[0.5; 4], &csi, &ocfg).unwrap();
    let cfg = SolverConfig { schedule: diminishing(), outer_delay_frames: 5, ..SolverConfig::default() };
    let mut ts = TwoTimescale::new(cfg, start);
    for _ in 0..4000 {
        ts.run_frame(&problem, &csi).unwrap();
    }
    assert!(dist(&ts.point.r, &ystar) <= 1e-5);
}

#[test]
fn ill_conditioned_corrections_are_skipped() {
    let (problem, csi) = nominal();
    let start = solve_inner(&problem, &[0.3; 4], &csi, &OracleConfig::default()).unwrap();
    let comp = CompensationConfig { min_rcond: 1.0, ..CompensationConfig::default() };
    let mut ts = TwoTimescale::new(SolverConfig { comp, ..SolverConfig::default() }, start);
    let first = ts.run_frame(&problem, &csi).unwrap();
    assert!(!first.compensation_skipped);
    let mut moved = csi.clone();
    moved.hs[0] *= 1.01;
    let second = ts.run_frame(&problem, &moved).unwrap();
    assert!(second.compensation_skipped);
    assert_eq!(second.frame, 1);
}

#[test]
fn projected_gradient_variant_tracks_a_frozen_channel() {
    let (problem, csi) = nominal();
    let ocfg = OracleConfig::default();
    let opt = solve_joint(&problem, &csi, &ocfg, None).unwrap();
    let start = solve_inner(&problem, &[0.5; 4], &csi, &ocfg).unwrap();
    let schedule = StepSchedule { kind: ScheduleKind::Constant, gamma: 0.05, mu0: 0.02, decay: 1.0 };
    let cfg = SolverConfig { algorithm: Algorithm::ProjectedGradient, schedule, n_s: 10, ..SolverConfig::default() };
    let mut ts = TwoTimescale::new(cfg, start);
    for _ in 0..1500 {
        ts.run_frame(&problem, &csi).unwrap();
    }
    assert!(dist(&ts.point.r, &opt.r) <= 1e-4, "{:?} vs {:?}", ts.point.r, opt.r);
    assert!(dist(&ts.point.p, &opt.p) <= 1e-3);
}
