//! Check routines shared by the unit-level suites and the acceptance run.

use mtnetopt::network::{
    lagrangian_and_grads, primal_dual_jacobians, primal_dual_map, second_derivatives, Csi, PrimalDualPoint, RelayProblem,
};
use mtnetopt::oracle::{fd_sensitivity, solve_inner, OracleConfig, SensitivityTarget};
use mtnetopt::solver::{inner_sensitivities, reduced_rate_jacobians, CompensationConfig};
use rand::Rng;

use super::*;

pub const STEP: f64 = 1e-6;

fn with_x(pt: &PrimalDualPoint, x: &[f64]) -> PrimalDualPoint {
    let mut q = pt.clone();
    q.set_x(x);
    q
}

fn with_r(pt: &PrimalDualPoint, r: &[f64]) -> PrimalDualPoint {
    PrimalDualPoint { r: r.to_vec(), ..pt.clone() }
}

/// (dL/dp, lambda_i w_i).
fn kkt_map(problem: &RelayProblem, pt: &PrimalDualPoint, csi: &Csi) -> Vec<f64> {
    let g = lagrangian_and_grads(pt, csi, problem).unwrap();
    g.dp.into_iter().chain(g.dlambda.iter().zip(&pt.lambda).map(|(w, l)| w * l)).collect()
}

fn dr(problem: &RelayProblem, pt: &PrimalDualPoint, csi: &Csi) -> Vec<f64> {
    lagrangian_and_grads(pt, csi, problem).unwrap().dr
}

/// Worst relative error over every checked block at one point.
pub fn derivative_errors(problem: &RelayProblem, pt: &PrimalDualPoint, csi: &Csi) -> Vec<(&'static str, f64)> {
    let sd = second_derivatives(pt, csi, problem).unwrap();
    let gr = lagrangian_and_grads(pt, csi, problem).unwrap();
    let x = pt.x();
    let nl = problem.num_links();
    let value = |q: &PrimalDualPoint| lagrangian_and_grads(q, csi, problem).unwrap().value;
    let with_hs = |hs: &[f64]| Csi { hs: hs.to_vec(), hl: csi.hl.clone() };
    let with_hl = |hl: &[f64]| Csi { hs: csi.hs.clone(), hl: hl.to_vec() };

    let grad_x = flat(&fd_jacobian(&|v| vec![value(&with_x(pt, v))], &x, STEP));
    let grad_r = flat(&fd_jacobian(&|v| vec![value(&with_r(pt, v))], &pt.r, STEP));
    let analytic_x: Vec<f64> = gr.dp.iter().chain(&gr.dlambda).copied().collect();

    let hess_p = fd_jacobian(&|v| dr_free_dp(problem, &with_x(pt, &[v, &pt.lambda[..]].concat()), csi), &pt.p, STEP);
    let hess_pl = fd_jacobian(&|v| dr_free_dp(problem, &with_x(pt, &[&pt.p[..], v].concat()), csi), &pt.lambda, STEP);
    let g_x = fd_jacobian(&|v| kkt_map(problem, &with_x(pt, v), csi), &x, STEP);
    let g_hs = fd_jacobian(&|v| kkt_map(problem, pt, &with_hs(v)), &csi.hs, STEP);
    let g_hl = fd_jacobian(&|v| kkt_map(problem, pt, &with_hl(v)), &csi.hl, STEP);
    let g_y = fd_jacobian(&|v| kkt_map(problem, &with_r(pt, v), csi), &pt.r, STEP);
    let t_y = fd_jacobian(&|v| dr(problem, &with_r(pt, v), csi), &pt.r, STEP);
    let t_hl = fd_jacobian(&|v| dr(problem, pt, &with_hl(v)), &csi.hl, STEP);
    let k_x = fd_jacobian(&|v| dr(problem, &with_x(pt, v), csi), &x, STEP);
    let (jx, jy) = primal_dual_jacobians(&sd);
    let map_x = fd_jacobian(&|v| primal_dual_map(&with_x(pt, v), csi, problem).unwrap(), &x, STEP);
    let map_y = fd_jacobian(&|v| primal_dual_map(&with_r(pt, v), csi, problem).unwrap(), &pt.r, STEP);
    debug_assert_eq!(sd.hess_pp.nrows(), nl);

    vec![
        ("grad_x", rel_err(&analytic_x, &grad_x)),
        ("grad_r", rel_err(&gr.dr, &grad_r)),
        ("hess_pp", rel_err(&flat(&columns(&sd.hess_pp)), &flat(&hess_p))),
        ("hess_plambda", rel_err(&flat(&columns(&sd.hess_plambda)), &flat(&hess_pl))),
        ("g_x", rel_err(&flat(&columns(&sd.g_x)), &flat(&g_x))),
        ("g_hs", rel_err(&flat(&columns(&sd.g_hs)), &flat(&g_hs))),
        ("g_hl", rel_err(&flat(&columns(&sd.g_hl)), &flat(&g_hl))),
        ("g_y", rel_err(&flat(&columns(&sd.g_y)), &flat(&g_y))),
        ("t_y", rel_err(&flat(&columns(&sd.t_y)), &flat(&t_y))),
        ("t_hl", rel_err(&flat(&columns(&sd.t_hl)), &flat(&t_hl))),
        ("k_x", rel_err(&flat(&columns(&sd.k_x)), &flat(&k_x))),
        ("jac_x", rel_err(&flat(&columns(&jx)), &flat(&map_x))),
        ("jac_y", rel_err(&flat(&columns(&jy)), &flat(&map_y))),
    ]
}

fn dr_free_dp(problem: &RelayProblem, pt: &PrimalDualPoint, csi: &Csi) -> Vec<f64> {
    lagrangian_and_grads(pt, csi, problem).unwrap().dp
}

pub fn comp_cfg() -> CompensationConfig {
    CompensationConfig { enabled: true, tikhonov_delta: 1e-12, active_set_tol: 1e-9, min_rcond: 0.0, safeguard: false }
}

/// Fading draw whose gains at each receiver are pairwise separated, so the
/// inner optimum is strictly complementary.
pub fn separated_csi<R: Rng>(problem: &RelayProblem, rng: &mut R) -> Csi {
    loop {
        let csi = random_csi(problem, rng);
        let g = problem.gains(&csi);
        let ok = problem
            .topo
            .l_plus
            .values()
            .all(|inb| inb.iter().all(|&a| inb.iter().all(|&b| a == b || (g[a] - g[b]).abs() > 0.05 * g[a].max(g[b]))));
        if ok {
            return csi;
        }
    }
}

/// Worst relative error of the analytic d x_hat / d|h_s| columns against
/// central differences of the oracle.
pub fn hs_sensitivity_error(problem: &RelayProblem, r: &[f64], csi: &Csi) -> f64 {
    let ocfg = OracleConfig::default();
    let xhat = solve_inner(problem, r, csi, &ocfg).unwrap();
    let (_, zs, _) = inner_sensitivities(problem, &xhat, csi, &comp_cfg()).unwrap();
    let nl = problem.num_links();
    let mut worst = 0.0f64;
    for k in 0..nl {
        let mut dir = vec![0.0; 2 * nl];
        dir[k] = 1.0;
        let fd = fd_sensitivity(problem, SensitivityTarget::Inner { r }, csi, &dir, 1e-6 * csi.hs[k], &ocfg).unwrap();
        let col: Vec<f64> = zs.column(k).iter().copied().collect();
        worst = worst.max(rel_err(&col, &fd));
    }
    worst
}

/// Worst relative error of the single-link stationary point, its
/// sensitivities and the reduced rate Jacobians against their closed forms.
/// With g = s |h_s|^2 h_l^2 the inner optimum is p = (e^r - 1)/g, lambda = v e^r / g.
pub fn single_link_closed_form_error(problem: &RelayProblem, hs: f64, hl: f64, r: f64) -> f64 {
    let v = problem.v;
    let csi = Csi::new(vec![hs], vec![hl]);
    let g = problem.gains(&csi)[0];
    let xhat = solve_inner(problem, &[r], &csi, &OracleConfig::default()).unwrap();
    let e = r.exp();
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    let mut worst = rel(xhat.p[0], (e - 1.0) / g).max(rel(xhat.lambda[0], v * e / g));
    let (zy, zs, zl) = inner_sensitivities(problem, &xhat, &csi, &comp_cfg()).unwrap();
    // g is quadratic in both |h_s| and h_l.
    let exact_hs = [-2.0 * (e - 1.0) / (g * hs), -2.0 * v * e / (g * hs)];
    let exact_hl = [-2.0 * (e - 1.0) / (g * hl), -2.0 * v * e / (g * hl)];
    let exact_r = [e / g, v * e / g];
    for (m, exact) in [(&zs, exact_hs), (&zl, exact_hl), (&zy, exact_r)] {
        for i in 0..2 {
            worst = worst.max(rel(m[(i, 0)], exact[i]));
        }
    }
    let (ty, thl) = reduced_rate_jacobians(problem, &xhat, &csi, &comp_cfg()).unwrap();
    worst = worst.max(rel(ty[(0, 0)], -1.0 / (r * r) - v * e / g));
    worst.max(rel(thl[(0, 0)], 2.0 * v * e / (g * hl)))
}
