//! Stability and tracking-error analysis.
//!
//! Local convergence rates from the iteration Jacobians, the drift matrix of
//! the Lyapunov bound with its stability test and error bound, and numerical
//! integrators for the mean ODE and the virtual error SDE.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::channel::FadingDomain;
use crate::network::{
    primal_dual_jacobians, primal_dual_map, rate_gradient, second_derivatives, Csi, NetworkError, PrimalDualPoint, RelayProblem,
};
use crate::oracle::{outer_model, solve_inner, solve_outer_with_samples, OracleConfig, OracleError};
use crate::solver::{inner_sensitivities, project_nonneg, project_rates, CompensationConfig, SolverError, R_CEIL, R_FLOOR};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("stability condition fails (margin {margin:e}); check stability_condition before bounding the error")]
    Unstable { margin: f64 },
    #[error("empty sample")]
    EmptySample,
}

/// How a convergence rate is read off an iteration Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMethod {
    /// -lambda_max of the symmetric part.
    SymmetricPart,
    /// -max Re(eig) of the Jacobian restricted to primal and active dual coordinates.
    SpectralAbscissa,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalRates {
    pub alpha_x_sym: f64,
    pub alpha_x_spec: f64,
    pub alpha_y: f64,
    pub alpha_sym: f64,
    pub alpha_spec: f64,
}

impl LocalRates {
    pub fn alpha_x(&self, m: RateMethod) -> f64 {
        match m {
            RateMethod::SymmetricPart => self.alpha_x_sym,
            RateMethod::SpectralAbscissa => self.alpha_x_spec,
        }
    }

    pub fn alpha(&self, m: RateMethod) -> f64 {
        match m {
            RateMethod::SymmetricPart => self.alpha_sym,
            RateMethod::SpectralAbscissa => self.alpha_spec,
        }
    }
}

/// Largest eigenvalue of (M + M')/2.
pub fn symmetric_part_max_eig(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(s).eigenvalues.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
}

/// Largest real part among the eigenvalues of a square matrix.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    m.complex_eigenvalues().iter().fold(f64::NEG_INFINITY, |a, z| a.max(z.re))
}

fn submatrix(m: &DMatrix<f64>, keep: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(keep.len(), keep.len(), |a, b| m[(keep[a], keep[b])])
}

/// Local rates of the inner map, the rate map and the joint map at a point.
pub fn local_rates(point: &PrimalDualPoint, csi: &Csi, problem: &RelayProblem, active_tol: f64) -> Result<LocalRates, AnalysisError> {
    let sd = second_derivatives(point, csi, problem)?;
    let (jx, jy) = primal_dual_jacobians(&sd);
    let nl = problem.num_links();
    let nx = problem.dim_x();
    let nf = problem.num_flows();
    let keep: Vec<usize> =
        (0..nl).chain((0..problem.num_constraints()).filter(|&i| point.lambda[i] > active_tol).map(|i| nl + i)).collect();
    let alpha_x_sym = -symmetric_part_max_eig(&jx);
    let alpha_x_spec = -spectral_abscissa(&submatrix(&jx, &keep));
    let alpha_y = -symmetric_part_max_eig(&sd.t_y);
    let mut joint = DMatrix::zeros(nx + nf, nx + nf);
    joint.view_mut((0, 0), (nx, nx)).copy_from(&jx);
    joint.view_mut((0, nx), (nx, nf)).copy_from(&jy);
    joint.view_mut((nx, 0), (nf, nx)).copy_from(&sd.k_x);
    joint.view_mut((nx, nx), (nf, nf)).copy_from(&sd.t_y);
    let keep_joint: Vec<usize> = keep.iter().copied().chain(nx..nx + nf).collect();
    let alpha_sym = -symmetric_part_max_eig(&joint);
    let alpha_spec = -spectral_abscissa(&submatrix(&joint, &keep_joint));
    Ok(LocalRates { alpha_x_sym, alpha_x_spec, alpha_y, alpha_sym, alpha_spec })
}

/// Inputs of the stability condition and the error bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityParams {
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub alpha: f64,
    pub l_x: f64,
    pub l_y: f64,
    pub v_h: f64,
    pub v_y: f64,
    pub varpi: f64,
    pub sigma_bar: f64,
    /// CSI dimension.
    pub n: f64,
}

/// One sampled operating point: inner stationary point at rates r and CSI.
#[derive(Debug, Clone)]
pub struct SampleState {
    pub point: PrimalDualPoint,
    pub csi: Csi,
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub method: RateMethod,
    pub active_tol: f64,
    /// Relative step for finite differences.
    pub fd_step: f64,
    /// Fading draws for the outer map and the estimator covariance; the
    /// second-difference estimate of varpi is skipped when empty.
    pub fading_samples: Vec<Vec<f64>>,
    pub oracle: OracleConfig,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            method: RateMethod::SpectralAbscissa,
            active_tol: 1e-6,
            fd_step: 1e-4,
            fading_samples: Vec::new(),
            oracle: OracleConfig::default(),
        }
    }
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().fold(0.0f64, |a, &b| a.max(b))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Lipschitz ratio of K in x along the most sensitive direction, by finite differences.
fn lipschitz_kx(problem: &RelayProblem, st: &SampleState, step: f64) -> f64 {
    let sd = match second_derivatives(&st.point, &st.csi, problem) {
        Ok(sd) => sd,
        Err(_) => return 0.0,
    };
    let svd = sd.k_x.clone().svd(false, true);
    let vt = match svd.v_t {
        Some(v) => v,
        None => return 0.0,
    };
    let dir: Vec<f64> = vt.row(0).iter().copied().collect();
    let base = rate_gradient(&st.point, problem);
    let mut moved = st.point.clone();
    let x: Vec<f64> = st.point.x().iter().zip(&dir).map(|(a, d)| a + step * d).collect();
    moved.set_x(&x);
    let k = rate_gradient(&moved, problem);
    norm(&k.iter().zip(&base).map(|(a, b)| a - b).collect::<Vec<_>>()) / step
}

/// Lipschitz ratio of K in r at fixed x, by finite differences along each axis.
fn lipschitz_ky(problem: &RelayProblem, st: &SampleState, rel: f64) -> f64 {
    let base = rate_gradient(&st.point, problem);
    let mut best: f64 = 0.0;
    for j in 0..st.point.r.len() {
        let h = rel * st.point.r[j];
        let mut moved = st.point.clone();
        moved.r[j] += h;
        let k = rate_gradient(&moved, problem);
        best = best.max(norm(&k.iter().zip(&base).map(|(a, b)| a - b).collect::<Vec<_>>()) / h);
    }
    best
}

/// dy*/dh_l by central differences on the sample-average outer problem.
pub fn outer_sensitivity(
    problem: &RelayProblem,
    hl: &[f64],
    samples: &[Vec<f64>],
    step: f64,
    cfg: &OracleConfig,
) -> Result<DMatrix<f64>, AnalysisError> {
    let nl = hl.len();
    let nf = problem.num_flows();
    let base = solve_outer_with_samples(problem, hl, samples, cfg, None)?;
    let mut psi = DMatrix::zeros(nf, nl);
    for k in 0..nl {
        let h = step * hl[k].abs().max(1e-3);
        let mut up = hl.to_vec();
        up[k] += h;
        let mut dn = hl.to_vec();
        dn[k] -= h;
        let yu = solve_outer_with_samples(problem, &up, samples, cfg, Some(&base))?;
        let yd = solve_outer_with_samples(problem, &dn, samples, cfg, Some(&base))?;
        for j in 0..nf {
            psi[(j, k)] = (yu[j] - yd[j]) / (2.0 * h);
        }
    }
    Ok(psi)
}

/// Empirical covariance of K(x_hat(y, h_s), y) over fading draws.
pub fn estimator_covariance(
    problem: &RelayProblem,
    r: &[f64],
    hl: &[f64],
    samples: &[Vec<f64>],
    cfg: &OracleConfig,
) -> Result<DMatrix<f64>, AnalysisError> {
    let nf = problem.num_flows();
    let mut ks = Vec::with_capacity(samples.len());
    for hs in samples {
        let pt = solve_inner(problem, r, &Csi::new(hs.clone(), hl.to_vec()), cfg)?;
        ks.push(DVector::from_vec(rate_gradient(&pt, problem)));
    }
    let m = ks.len();
    if m < 2 {
        return Ok(DMatrix::zeros(nf, nf));
    }
    let mean = ks.iter().fold(DVector::zeros(nf), |a, k| a + k) / m as f64;
    let mut cov = DMatrix::zeros(nf, nf);
    for k in &ks {
        let d = k - &mean;
        cov += &d * d.transpose();
    }
    Ok(cov / (m - 1) as f64)
}

/// Symmetric square root with negative eigenvalues clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let s = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(s);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Estimates the stability parameters over a sample of operating points.
///
/// Rates are sample infima, sensitivities and Lipschitz ratios sample
/// suprema. varpi and the estimator covariance use the fading draws in
/// `opts` at the first state's path loss and rates.
pub fn estimate_params(problem: &RelayProblem, states: &[SampleState], opts: &EstimateOptions) -> Result<StabilityParams, AnalysisError> {
    let first = states.first().ok_or(AnalysisError::EmptySample)?;
    let comp = CompensationConfig { enabled: true, tikhonov_delta: 0.0, active_set_tol: opts.active_tol, min_rcond: 0.0, safeguard: false };
    let mut p = StabilityParams {
        alpha_x: f64::INFINITY,
        alpha_y: f64::INFINITY,
        alpha: f64::INFINITY,
        l_x: 0.0,
        l_y: 0.0,
        v_h: 0.0,
        v_y: 0.0,
        varpi: 0.0,
        sigma_bar: 0.0,
        n: problem.num_links() as f64,
    };
    for st in states {
        let lr = local_rates(&st.point, &st.csi, problem, opts.active_tol)?;
        p.alpha_x = p.alpha_x.min(lr.alpha_x(opts.method));
        p.alpha_y = p.alpha_y.min(lr.alpha_y);
        p.alpha = p.alpha.min(lr.alpha(opts.method));
        let (zy, zs, _) = inner_sensitivities(problem, &st.point, &st.csi, &comp)?;
        p.v_h = p.v_h.max(spectral_norm(&zs));
        p.v_y = p.v_y.max(spectral_norm(&zy));
        p.l_x = p.l_x.max(lipschitz_kx(problem, st, opts.fd_step));
        p.l_y = p.l_y.max(lipschitz_ky(problem, st, opts.fd_step));
    }
    if opts.fading_samples.len() >= 2 {
        let cov = estimator_covariance(problem, &first.point.r, &first.csi.hl, &opts.fading_samples, &opts.oracle)?;
        p.sigma_bar = cov.trace();
        let hl = &first.csi.hl;
        let psi0 = outer_sensitivity(problem, hl, &opts.fading_samples, opts.fd_step, &opts.oracle)?;
        let nl = hl.len();
        for k in 0..nl {
            let h = 10.0 * opts.fd_step * hl[k].abs().max(1e-3);
            let mut moved = hl.clone();
            moved[k] += h;
            let psi1 = outer_sensitivity(problem, &moved, &opts.fading_samples, opts.fd_step, &opts.oracle)?;
            p.varpi = p.varpi.max(spectral_norm(&(psi1 - &psi0)) / h);
        }
    }
    Ok(p)
}

/// Symmetric 5x5 drift matrix of the Lyapunov bound over the error norms
/// (||x~||, ||y~||, ||x~e||, ||y~e||, ||h~s||).
pub fn drift_matrix(p: &StabilityParams, a_h: f64, tau: f64, n_s: f64, gamma: f64) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(5, 5);
    let s = a_h * tau / (n_s * gamma);
    a[(0, 0)] = p.alpha / n_s;
    a[(1, 1)] = p.alpha / n_s;
    a[(2, 2)] = p.alpha_x;
    a[(3, 3)] = p.alpha_y / n_s;
    a[(4, 4)] = 0.5 * s;
    a[(1, 2)] = -p.l_x / (2.0 * n_s);
    a[(2, 3)] = -p.v_y * p.l_y / (2.0 * n_s);
    a[(2, 4)] = -p.v_h * s / 4.0;
    for i in 0..5 {
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
    }
    a
}

/// Leading principal minors of a square matrix.
pub fn leading_minors(a: &DMatrix<f64>) -> Vec<f64> {
    (1..=a.nrows()).map(|k| a.view((0, 0), (k, k)).into_owned().determinant()).collect()
}

/// Closed-form |det(N_s A)|.
pub fn rho_closed_form(p: &StabilityParams, a_h: f64, tau: f64, n_s: f64, gamma: f64) -> f64 {
    let at = a_h * tau / gamma;
    (p.alpha * a_h * tau / (16.0 * gamma)
        * (8.0 * n_s * p.alpha * p.alpha_x * p.alpha_y
            - p.alpha * p.alpha_y * at * p.v_h * p.v_h
            - 2.0 * p.alpha_y * p.l_x * p.l_x
            - 2.0 * p.alpha * p.l_y * p.l_y * p.v_y * p.v_y))
        .abs()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityVerdict {
    pub margin: f64,
    pub stable: bool,
    pub minors: Vec<f64>,
    pub minors_positive: bool,
}

/// Sufficient stability condition and the direct minor test on the drift matrix.
pub fn stability_condition(p: &StabilityParams, a_h: f64, tau: f64, n_s: f64, gamma: f64) -> StabilityVerdict {
    let margin = p.alpha * n_s * (8.0 * p.alpha_x - a_h * tau / (n_s * gamma) * p.v_h * p.v_h)
        - 2.0 * p.l_x * p.l_x
        - 2.0 * p.l_y * p.l_y * p.v_y * p.v_y;
    let minors = leading_minors(&drift_matrix(p, a_h, tau, n_s, gamma));
    let minors_positive = minors.iter().all(|&m| m > 0.0);
    StabilityVerdict { margin, stable: margin > 0.0, minors, minors_positive }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBound {
    pub rho: f64,
    pub rho_closed_form: f64,
    pub eta: f64,
    pub c_b: f64,
    pub c: f64,
    pub bound: f64,
    /// Smallest eigenvalue of A.
    pub lambda_min: f64,
}

/// Upper bound on e_x + e_y for a stable parameter set.
pub fn error_bound(p: &StabilityParams, a_h: f64, epsilon: f64, tau: f64, n_s: f64, gamma: f64) -> Result<ErrorBound, AnalysisError> {
    let v = stability_condition(p, a_h, tau, n_s, gamma);
    if !v.stable {
        return Err(AnalysisError::Unstable { margin: v.margin });
    }
    Ok(error_bound_unchecked(p, a_h, epsilon, tau, n_s, gamma))
}

/// The bound formula without the stability precondition.
pub fn error_bound_unchecked(p: &StabilityParams, a_h: f64, epsilon: f64, tau: f64, n_s: f64, gamma: f64) -> ErrorBound {
    let a = drift_matrix(p, a_h, tau, n_s, gamma);
    let a0 = &a * n_s;
    let rho = a0.determinant().abs();
    let eta = 2f64.powf(1.5) * a0.norm();
    let ns1 = 1.0 / n_s;
    let ns2 = ns1 * ns1;
    let lx2 = p.l_x * p.l_x;
    let lyvy2 = p.l_y * p.l_y * p.v_y * p.v_y;
    let c_b = (epsilon * p.varpi * tau / (n_s * gamma)).powi(2) * (4.0 * ns1 * p.alpha * p.alpha_x - ns2 * lx2 - ns2 * lyvy2)
        / (ns1 * p.alpha * (8.0 * p.alpha_x - a_h * tau / (n_s * gamma) * p.v_h * p.v_h) - 2.0 * ns2 * lx2 - 2.0 * ns2 * lyvy2);
    let c_b = if c_b.is_nan() { 0.0 } else { c_b };
    let c = a_h * tau / gamma * p.n * (1.0 + p.v_h * p.v_h) + 4.0 * c_b;
    let bound = eta / rho * (tau * p.sigma_bar + c);
    let lambda_min = SymmetricEigen::new(a).eigenvalues.iter().fold(f64::INFINITY, |x, &y| x.min(y));
    ErrorBound { rho, rho_closed_form: rho_closed_form(p, a_h, tau, n_s, gamma), eta, c_b, c, bound, lambda_min }
}

/// One state of the mean ODE.
#[derive(Debug, Clone, PartialEq)]
pub struct MctsState {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Projected Euler integration of the mean ODE: the short-term variable follows
/// the primal-dual map, the rates follow the fading-averaged estimator.
pub fn integrate_mcts(
    problem: &RelayProblem,
    x0: &[f64],
    y0: &[f64],
    csi_at: &dyn Fn(f64) -> Csi,
    samples: &[Vec<f64>],
    dt: f64,
    steps: usize,
) -> Result<Vec<MctsState>, AnalysisError> {
    let nl = problem.num_links();
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let mut out = vec![MctsState { t: 0.0, x: x.clone(), y: y.clone() }];
    for s in 0..steps {
        let t = s as f64 * dt;
        let csi = csi_at(t);
        let pt = PrimalDualPoint { p: x[..nl].to_vec(), lambda: x[nl..].to_vec(), r: y.clone() };
        let g = primal_dual_map(&pt, &csi, problem)?;
        let k = if samples.is_empty() { rate_gradient(&pt, problem) } else { outer_model(problem, &y, &csi.hl, samples)?.k };
        x = project_nonneg(&x.iter().zip(&g).map(|(a, b)| a + dt * b).collect::<Vec<_>>());
        y = project_rates(&y.iter().zip(&k).map(|(a, b)| a + dt * b).collect::<Vec<_>>(), R_FLOOR);
        out.push(MctsState { t: t + dt, x: x.clone(), y: y.clone() });
    }
    Ok(out)
}

/// State of the virtual error system.
#[derive(Debug, Clone, PartialEq)]
pub struct VsdsState {
    pub t: f64,
    pub x_gap: Vec<f64>,
    pub y_gap: Vec<f64>,
    pub x_err: Vec<f64>,
    pub y_err: Vec<f64>,
    pub hs: Vec<f64>,
    pub hl: Vec<f64>,
}

impl VsdsState {
    pub fn norm_sq(&self) -> f64 {
        [&self.x_gap, &self.y_gap, &self.x_err, &self.y_err, &self.hs].iter().map(|v| v.iter().map(|x| x * x).sum::<f64>()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct VsdsConfig {
    pub a_h: f64,
    pub tau: f64,
    pub n_s: f64,
    pub gamma: f64,
    /// Per-link path-loss drift rates (diagonal of H_L).
    pub h_l_rate: Vec<f64>,
    pub diffusion: bool,
    pub dt: f64,
    pub steps: usize,
    pub domain: FadingDomain,
    /// Fading draws for the averaged rate map and the estimator covariance.
    pub samples: Vec<Vec<f64>>,
    pub oracle: OracleConfig,
    pub comp: CompensationConfig,
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(v)).as_slice().to_vec()
}

fn axpy(a: &mut [f64], s: f64, b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += s * y;
    }
}

/// (I - h J)^{-1} v, falling back to v when singular.
fn implicit_solve(j: &DMatrix<f64>, h: f64, v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let a = DMatrix::identity(n, n) - j * h;
    a.lu().solve(&DVector::from_column_slice(v)).map(|s| s.as_slice().to_vec()).unwrap_or_else(|| v.to_vec())
}

/// Euler-Maruyama integration of the virtual error system.
///
/// The linear parts of the gap and error dynamics are taken implicitly
/// (linearly implicit Euler), the rest explicitly; the rate error is
/// reflected so that y* + y_err stays in the rate box, and the
/// short-term error so that x_hat + x_err stays non-negative.
pub fn integrate_vsds<R: Rng + ?Sized>(
    problem: &RelayProblem,
    init: &VsdsState,
    cfg: &VsdsConfig,
    rng: &mut R,
) -> Result<Vec<VsdsState>, AnalysisError> {
    let nl = problem.num_links();
    let nx = problem.dim_x();
    let nf = problem.num_flows();
    let s = cfg.a_h * cfg.tau / (cfg.n_s * cfg.gamma);
    let hl_speed = cfg.tau / (cfg.n_s * cfg.gamma);
    let dt = cfg.dt;
    let sq = dt.sqrt();
    let mut u = init.clone();
    let mut out = vec![u.clone()];
    let mut ystar = solve_outer_with_samples(problem, &u.hl, &cfg.samples, &cfg.oracle, None)?;
    let mut ystar_hl = u.hl.clone();
    for _ in 0..cfg.steps {
        if norm(&u.hl.iter().zip(&ystar_hl).map(|(a, b)| a - b).collect::<Vec<_>>()) > cfg.oracle.cache_tol {
            ystar = solve_outer_with_samples(problem, &u.hl, &cfg.samples, &cfg.oracle, Some(&ystar))?;
            ystar_hl = u.hl.clone();
        }
        let sign: Vec<f64> = u.hs.iter().map(|h| if *h < 0.0 { -1.0 } else { 1.0 }).collect();
        let csi = Csi::new(u.hs.iter().map(|h| cfg.domain.clip(h.abs())).collect(), u.hl.clone());
        let y_c = project_rates(&ystar.iter().zip(&u.y_err).map(|(a, b)| a + b).collect::<Vec<_>>(), R_FLOOR);
        let xhat = solve_inner(problem, &y_c, &csi, &cfg.oracle)?;
        let xh = xhat.x();
        let x_c = project_nonneg(&xh.iter().zip(&u.x_err).map(|(a, b)| a + b).collect::<Vec<_>>());
        let mut pt_c = xhat.clone();
        pt_c.set_x(&x_c);
        let g = primal_dual_map(&pt_c, &csi, problem)?;
        let sd_c = second_derivatives(&pt_c, &csi, problem)?;
        let (jx, jy) = primal_dual_jacobians(&sd_c);
        let sd_hat = second_derivatives(&xhat, &csi, problem)?;
        let (zy, zs, _) = inner_sensitivities(problem, &xhat, &csi, &cfg.comp)?;
        // G~x^{-1} G~hs with respect to the signed virtual fading.
        let mut ghs = -zs;
        for k in 0..nl {
            ghs.column_mut(k).scale_mut(sign[k] * if cfg.domain.clip(u.hs[k].abs()) == u.hs[k].abs() { 1.0 } else { 0.0 });
        }
        let gy = -zy;
        let om = outer_model(problem, &y_c, &u.hl, &cfg.samples)?;
        let k = om.k.clone();
        let psi = if cfg.h_l_rate.iter().any(|&v| v != 0.0) {
            outer_sensitivity(problem, &u.hl, &cfg.samples, 1e-4, &cfg.oracle)?
        } else {
            DMatrix::zeros(nf, nl)
        };

        // Noise.
        let dw_y: Vec<f64> = (0..nf).map(|_| rng.sample::<f64, _>(StandardNormal) * sq).collect();
        let dw_h: Vec<f64> = (0..nl).map(|_| rng.sample::<f64, _>(StandardNormal) * sq).collect();
        let diffusion = if cfg.diffusion { 1.0 } else { 0.0 };

        // Gap pair (x~, y~): linear, implicit in its own Jacobian.
        let mut jgap = DMatrix::zeros(nx + nf, nx + nf);
        jgap.view_mut((0, 0), (nx, nx)).copy_from(&jx);
        jgap.view_mut((0, nx), (nx, nf)).copy_from(&jy);
        jgap.view_mut((nx, 0), (nf, nx)).copy_from(&(&sd_hat.k_x / cfg.n_s));
        jgap.view_mut((nx, nx), (nf, nf)).copy_from(&(&sd_hat.t_y / cfg.n_s));
        let mut rhs: Vec<f64> = u.x_gap.iter().chain(&u.y_gap).copied().collect();
        let kx_xe = mat_vec(&sd_hat.k_x, &u.x_err);
        axpy(&mut rhs[nx..], dt / cfg.n_s, &kx_xe);
        if cfg.diffusion {
            let sig = psd_sqrt(&estimator_covariance(problem, &y_c, &u.hl, &cfg.samples, &cfg.oracle)?);
            let noise = mat_vec(&sig, &dw_y);
            axpy(&mut rhs[nx..], (cfg.tau / cfg.n_s).sqrt(), &noise);
        }
        let gap = implicit_solve(&jgap, dt, &rhs);

        // Short-term error: G(x_c) - jx x_err is the nonlinear remainder.
        let mut xe_rhs = u.x_err.clone();
        let lin = mat_vec(&jx, &u.x_err);
        let remainder: Vec<f64> = g.iter().zip(&lin).map(|(a, b)| a - b).collect();
        axpy(&mut xe_rhs, dt, &remainder);
        axpy(&mut xe_rhs, -0.5 * s * dt, &mat_vec(&ghs, &u.hs));
        axpy(&mut xe_rhs, dt / cfg.n_s, &mat_vec(&gy, &k));
        axpy(&mut xe_rhs, diffusion * s.sqrt(), &mat_vec(&ghs, &dw_h));
        // Components held on the boundary by the reflection are pinned
        // inside the implicit solve, so their outward drift does not leak
        // into the free components through the coupling.
        let pinned: Vec<bool> = (0..nx).map(|i| xh[i] == 0.0 && x_c[i] == 0.0 && g[i] <= 0.0).collect();
        let mut jx_free = jx.clone();
        for (i, &pin) in pinned.iter().enumerate() {
            if pin {
                jx_free.row_mut(i).fill(0.0);
                jx_free.column_mut(i).fill(0.0);
                xe_rhs[i] = 0.0;
            }
        }
        let mut x_err = implicit_solve(&jx_free, dt, &xe_rhs);

        // Rate error: k(y_c) - kJ y_err is the remainder.
        let kj = &om.jacobian / cfg.n_s;
        let mut ye_rhs = u.y_err.clone();
        let lin = mat_vec(&kj, &u.y_err);
        let remainder: Vec<f64> = k.iter().zip(&lin).map(|(a, b)| a / cfg.n_s - b).collect();
        axpy(&mut ye_rhs, dt, &remainder);
        axpy(&mut ye_rhs, dt * hl_speed, &mat_vec(&psi, &cfg.h_l_rate));
        let mut y_err = implicit_solve(&kj, dt, &ye_rhs);

        // Reflection onto the domains.
        for (e, y) in y_err.iter_mut().zip(&ystar) {
            *e = (y + *e).clamp(R_FLOOR, R_CEIL) - y;
        }
        for (e, x) in x_err.iter_mut().zip(&xh) {
            if x + *e < 0.0 {
                *e = -x;
            }
        }

        let hs: Vec<f64> = u.hs.iter().zip(&dw_h).map(|(h, w)| h - 0.5 * s * h * dt + diffusion * s.sqrt() * w).collect();
        let hl: Vec<f64> = u.hl.iter().zip(&cfg.h_l_rate).map(|(h, r)| h - hl_speed * r * dt).collect();
        u = VsdsState { t: u.t + dt, x_gap: gap[..nx].to_vec(), y_gap: gap[nx..].to_vec(), x_err, y_err, hs, hl };
        out.push(u.clone());
    }
    Ok(out)
}
