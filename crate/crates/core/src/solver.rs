//! Two-timescale iteration engine.
//!
//! The short-term variable x = (p, lambda) is updated every slot by a
//! projected primal-dual step; the rates r are updated once per frame from
//! the gradient of the Lagrangian at the current short-term iterate. At frame
//! boundaries both updates can be corrected by first-order estimates of how
//! the targets moved with the channel.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::network::{
    self, lagrangian_and_grads, primal_dual_map, rate_gradient, second_derivatives, Csi, NetworkError, PrimalDualPoint, RelayProblem,
};

/// Lower bound kept on every rate so the log utility stays finite.
/// Flow rates live in the box [R_FLOOR, R_CEIL].
pub const R_FLOOR: f64 = 1e-2;
pub const R_CEIL: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("projection did not converge after {iterations} iterations (KKT residual {residual:e})")]
    Projection { iterations: usize, residual: f64, last: Vec<f64> },
    #[error("compensation system is singular after damping ({0})")]
    Conditioning(String),
    #[error("{0} became non-finite")]
    NonFinite(&'static str),
}

pub fn project_nonneg(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

/// Projection onto the rate box [floor, R_CEIL].
pub fn project_rates(v: &[f64], floor: f64) -> Vec<f64> {
    v.iter().map(|&x| x.clamp(floor, R_CEIL.max(floor))).collect()
}

/// Constraint set {x : c_i(x) <= 0} given through residual and gradient callbacks.
pub trait ConvexConstraints {
    fn count(&self) -> usize;
    fn residual(&self, x: &[f64], i: usize) -> f64;
    fn gradient(&self, x: &[f64], i: usize) -> Vec<f64>;
    /// Curvature of constraint i; linear constraints keep the default.
    fn hessian(&self, _x: &[f64], _i: usize) -> Option<DMatrix<f64>> {
        None
    }
}

/// {x : A x <= b}.
#[derive(Debug, Clone)]
pub struct Polytope {
    pub a: DMatrix<f64>,
    pub b: Vec<f64>,
}

impl ConvexConstraints for Polytope {
    fn count(&self) -> usize {
        self.b.len()
    }
    fn residual(&self, x: &[f64], i: usize) -> f64 {
        self.a.row(i).iter().zip(x).map(|(a, x)| a * x).sum::<f64>() - self.b[i]
    }
    fn gradient(&self, _x: &[f64], i: usize) -> Vec<f64> {
        self.a.row(i).iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 200 }
    }
}

/// Dual coordinate ascent for min 1/2 d'Bd + q'd s.t. A d <= b, then an
/// exact equality-constrained solve on the detected active set.
fn solve_qp(bmat: &DMatrix<f64>, q: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = q.len();
    let m = b.len();
    let binv = bmat.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(n, n));
    let binv_at = &binv * a.transpose();
    let pmat = a * &binv_at;
    let mut nu: DVector<f64> = DVector::zeros(m);
    let base = -(&binv * q);
    let mut d = base.clone();
    for _sweep in 0..100_000 {
        let mut change: f64 = 0.0;
        for i in 0..m {
            if pmat[(i, i)] <= 1e-300 {
                continue;
            }
            let viol: f64 = (a.row(i) * &d)[0] - b[i];
            let new = (nu[i] + viol / pmat[(i, i)]).max(0.0);
            let delta = new - nu[i];
            if delta != 0.0 {
                nu[i] = new;
                d -= binv_at.column(i) * delta;
                change = change.max(delta.abs() * pmat[(i, i)].sqrt());
            }
        }
        if change < 1e-15 {
            break;
        }
    }
    // Polish on the active set.
    let act: Vec<usize> = (0..m).filter(|&i| nu[i] > 0.0 || (a.row(i).dot(&d.transpose()) - b[i]).abs() < 1e-12).collect();
    if !act.is_empty() {
        let k = act.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(bmat);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-q));
        for (r, &i) in act.iter().enumerate() {
            for c in 0..n {
                kkt[(n + r, c)] = a[(i, c)];
                kkt[(c, n + r)] = a[(i, c)];
            }
            rhs[n + r] = b[i];
        }
        if let Some(sol) = kkt.lu().solve(&rhs) {
            let dd = sol.rows(0, n).into_owned();
            let ok_sign = act.iter().enumerate().all(|(r, _)| sol[n + r] >= -1e-13);
            let ok_feas = (0..m).all(|i| a.row(i).dot(&dd.transpose()) - b[i] <= 1e-12 * (1.0 + b[i].abs()));
            if ok_sign && ok_feas && sol.iter().all(|v| v.is_finite()) {
                let mut nn = DVector::zeros(m);
                for (r, &i) in act.iter().enumerate() {
                    nn[i] = sol[n + r].max(0.0);
                }
                return (dd, nn);
            }
        }
    }
    (d, nu)
}

/// Euclidean projection of `v` onto a convex set, with the constraint multipliers.
///
/// Sequential quadratic steps on the KKT system: each step linearizes the
/// constraints, uses the multiplier-weighted curvature, and solves the
/// resulting quadratic program exactly. Polytopes converge in one step.
pub fn project_convex(v: &[f64], set: &dyn ConvexConstraints, opts: ProjectionOptions) -> Result<(Vec<f64>, Vec<f64>), SolverError> {
    let n = v.len();
    let m = set.count();
    let vv = DVector::from_column_slice(v);
    let mut x = vv.clone();
    let mut nu = DVector::<f64>::zeros(m);
    let mut residual = f64::INFINITY;
    for it in 0..opts.max_iter {
        let xs = x.as_slice().to_vec();
        let res: Vec<f64> = (0..m).map(|i| set.residual(&xs, i)).collect();
        let mut jac = DMatrix::zeros(m, n);
        for i in 0..m {
            jac.row_mut(i).copy_from_slice(&set.gradient(&xs, i));
        }
        let stat = &x - &vv + jac.transpose() * &nu;
        let feas = res.iter().fold(0.0f64, |a, &r| a.max(r));
        let comp = (0..m).fold(0.0f64, |a, i| a.max((nu[i] * res[i]).abs()));
        residual = stat.amax().max(feas).max(comp);
        if residual <= opts.tol && it > 0 || (it == 0 && feas <= 0.0) {
            return Ok((xs, nu.as_slice().to_vec()));
        }
        let mut bmat = DMatrix::identity(n, n);
        for i in 0..m {
            if nu[i] > 0.0 {
                if let Some(h) = set.hessian(&xs, i) {
                    bmat += h * nu[i];
                }
            }
        }
        let q = &x - &vv;
        let b = DVector::from_iterator(m, res.iter().map(|r| -r));
        let (d, new_nu) = solve_qp(&bmat, &q, &jac, &b);
        x += d;
        nu = new_nu;
    }
    Err(SolverError::Projection { iterations: opts.max_iter, residual, last: x.as_slice().to_vec() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    /// mu_n = mu0 / (1 + (n - 1) / decay).
    Diminishing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub kind: ScheduleKind,
    pub gamma: f64,
    pub mu0: f64,
    /// Frames over which a diminishing step halves; 1 gives mu0 / n.
    pub decay: f64,
}

impl StepSchedule {
    /// Outer step for frame `n_f` (counted from 1).
    pub fn mu(&self, n_f: u64) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.mu0,
            ScheduleKind::Diminishing => self.mu0 / (1.0 + (n_f.max(1) - 1) as f64 / self.decay.max(f64::MIN_POSITIVE)),
        }
    }
}

/// Slot and frame counters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameClock {
    pub tau: f64,
    pub n_s: u64,
    pub slot: u64,
}

impl FrameClock {
    pub fn new(tau: f64, n_s: u64) -> Self {
        Self { tau, n_s: n_s.max(1), slot: 0 }
    }

    pub fn frame(&self) -> u64 {
        self.slot / self.n_s
    }

    pub fn tick(&mut self) {
        self.slot += 1;
    }

    pub fn time(&self) -> f64 {
        self.frame() as f64 * self.tau
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompensationConfig {
    pub enabled: bool,
    pub tikhonov_delta: f64,
    pub active_set_tol: f64,
    /// Corrections are skipped when sigma_min / sigma_max of the Jacobian falls below this.
    pub min_rcond: f64,
    /// Shrink or drop a short-term correction that would raise the fixed-point residual.
    pub safeguard: bool,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        Self { enabled: true, tikhonov_delta: 1e-8, active_set_tol: 1e-6, min_rcond: 1e-6, safeguard: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    PrimalDual,
    ProjectedGradient,
}

/// One projected primal-dual step on x = (p, lambda) with rates held fixed.
///
/// `scaling` is an optional diagonal preconditioner over x; `comp` is added
/// inside the projection.
pub fn inner_step(
    problem: &RelayProblem,
    point: &PrimalDualPoint,
    csi: &Csi,
    gamma: f64,
    scaling: Option<&[f64]>,
    comp: Option<&[f64]>,
) -> Result<PrimalDualPoint, SolverError> {
    let g = primal_dual_map(point, csi, problem)?;
    let x = point.x();
    let mut next: Vec<f64> =
        x.iter().enumerate().map(|(i, &xi)| xi + gamma * scaling.map_or(1.0, |s| s[i]) * g[i] + comp.map_or(0.0, |c| c[i])).collect();
    next = project_nonneg(&next);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFinite("short-term iterate"));
    }
    let mut out = point.clone();
    out.set_x(&next);
    Ok(out)
}

/// Feasible power region {p >= 0 : capacity residuals <= 0} at fixed rates.
pub struct PowerRegion<'a> {
    pub problem: &'a RelayProblem,
    pub gains: Vec<f64>,
    pub link_rates: Vec<f64>,
}

impl<'a> PowerRegion<'a> {
    pub fn new(problem: &'a RelayProblem, r: &[f64], csi: &Csi) -> Self {
        Self { problem, gains: problem.gains(csi), link_rates: network::link_rates(r, &problem.topo) }
    }

    fn denom(&self, x: &[f64], i: usize) -> f64 {
        1.0 + self.problem.constraints[i].links.iter().map(|&k| self.gains[k] * x[k]).sum::<f64>()
    }
}

impl ConvexConstraints for PowerRegion<'_> {
    fn count(&self) -> usize {
        self.problem.num_constraints() + self.problem.num_links()
    }
    fn residual(&self, x: &[f64], i: usize) -> f64 {
        let w = self.problem.num_constraints();
        if i < w {
            let con = &self.problem.constraints[i];
            con.links.iter().map(|&k| self.link_rates[k]).sum::<f64>() - self.denom(x, i).ln()
        } else {
            -x[i - w]
        }
    }
    fn gradient(&self, x: &[f64], i: usize) -> Vec<f64> {
        let w = self.problem.num_constraints();
        let mut g = vec![0.0; x.len()];
        if i < w {
            let d = self.denom(x, i);
            for &k in &self.problem.constraints[i].links {
                g[k] = -self.gains[k] / d;
            }
        } else {
            g[i - w] = -1.0;
        }
        g
    }
    fn hessian(&self, x: &[f64], i: usize) -> Option<DMatrix<f64>> {
        let w = self.problem.num_constraints();
        if i >= w {
            return None;
        }
        let d = self.denom(x, i);
        let mut h = DMatrix::zeros(x.len(), x.len());
        let links = &self.problem.constraints[i].links;
        for &k in links {
            for &l in links {
                h[(k, l)] = self.gains[k] * self.gains[l] / (d * d);
            }
        }
        Some(h)
    }
}

/// Projected-gradient step on p: p' = proj_X(r, h)[p - gamma V]. The projection
/// multipliers divided by gamma serve as lambda for the rate update.
pub fn inner_step_projected(
    problem: &RelayProblem,
    point: &PrimalDualPoint,
    csi: &Csi,
    gamma: f64,
    comp: Option<&[f64]>,
) -> Result<PrimalDualPoint, SolverError> {
    let nl = problem.num_links();
    let v: Vec<f64> = point.p.iter().enumerate().map(|(k, p)| p - gamma * problem.v + comp.map_or(0.0, |c| c[k])).collect();
    let region = PowerRegion::new(problem, &point.r, csi);
    let (p, nu) = project_convex(&v, &region, ProjectionOptions { tol: 1e-10, max_iter: 200 })?;
    let mut out = point.clone();
    out.p = p.into_iter().map(|x| x.max(0.0)).collect();
    out.lambda = nu[..problem.num_constraints()].iter().map(|n| n / gamma.max(f64::MIN_POSITIVE)).collect();
    debug_assert_eq!(out.p.len(), nl);
    Ok(out)
}

/// r' = max(r + mu dL/dr + comp, floor).
pub fn outer_step(problem: &RelayProblem, point: &PrimalDualPoint, mu: f64, comp: Option<&[f64]>) -> Vec<f64> {
    let k = rate_gradient(point, problem);
    let next: Vec<f64> = point.r.iter().zip(&k).enumerate().map(|(j, (r, k))| r + mu * k + comp.map_or(0.0, |c| c[j])).collect();
    project_rates(&next, R_FLOOR)
}

/// KKT Jacobian over x with inactive multipliers pinned, plus the matching
/// row mask. Rows of inactive constraints become unit rows so their
/// multipliers are held at zero by the correction.
fn active_kkt(sd: &network::SecondDerivatives, lambda: &[f64], nl: usize, cfg: &CompensationConfig) -> (DMatrix<f64>, Vec<bool>) {
    let nx = sd.g_x.nrows();
    let mut gx = sd.g_x.clone();
    let mut active = vec![true; nx];
    for (i, &lam) in lambda.iter().enumerate() {
        if lam <= cfg.active_set_tol {
            active[nl + i] = false;
            gx.row_mut(nl + i).fill(0.0);
            gx[(nl + i, nl + i)] = 1.0;
        }
    }
    for i in 0..nx {
        gx[(i, i)] += cfg.tikhonov_delta;
    }
    (gx, active)
}

fn solve_checked(a: DMatrix<f64>, b: &DMatrix<f64>, min_rcond: f64, what: &str) -> Result<DMatrix<f64>, SolverError> {
    if min_rcond > 0.0 {
        let sv = a.singular_values();
        let hi = sv.max();
        if !(sv.min() >= min_rcond * hi) {
            return Err(SolverError::Conditioning(what.to_string()));
        }
    }
    let lu = a.lu();
    match lu.solve(b) {
        Some(x) if x.iter().all(|v| v.is_finite()) => Ok(x),
        _ => Err(SolverError::Conditioning(what.to_string())),
    }
}

/// ||x - proj(x + G(x))|| of the primal-dual map at fixed rates.
pub fn fixed_point_residual(problem: &RelayProblem, point: &PrimalDualPoint, csi: &Csi) -> Result<f64, SolverError> {
    let g = primal_dual_map(point, csi, problem)?;
    Ok(point.x().iter().zip(&g).map(|(x, g)| (x - (x + g).max(0.0)).powi(2)).sum::<f64>().sqrt())
}

/// Largest of u, u/2, u/4 whose projected application does not raise the
/// fixed-point residual at the new channel; `None` when all of them do.
pub fn safeguard_compensation(
    problem: &RelayProblem,
    point: &PrimalDualPoint,
    csi: &Csi,
    u: &[f64],
) -> Result<Option<Vec<f64>>, SolverError> {
    let base = fixed_point_residual(problem, point, csi)?;
    let x = point.x();
    let mut t = 1.0;
    for _ in 0..3 {
        let mut cand = point.clone();
        cand.set_x(&project_nonneg(&x.iter().zip(u).map(|(a, b)| a + t * b).collect::<Vec<_>>()));
        if fixed_point_residual(problem, &cand, csi)? <= base {
            return Ok(Some(u.iter().map(|v| t * v).collect()));
        }
        t *= 0.5;
    }
    Ok(None)
}

/// Short-term correction -G_x^{-1} (G_hs dhs + G_y dr) at the current iterate.
pub fn compensation_x(
    problem: &RelayProblem,
    point: &PrimalDualPoint,
    csi: &Csi,
    d_hs: &[f64],
    d_r: &[f64],
    cfg: &CompensationConfig,
) -> Result<Vec<f64>, SolverError> {
    let nx = problem.dim_x();
    if d_hs.iter().all(|&v| v == 0.0) && d_r.iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; nx]);
    }
    let sd = second_derivatives(point, csi, problem)?;
    let (gx, active) = active_kkt(&sd, &point.lambda, problem.num_links(), cfg);
    let mut rhs = -(&sd.g_hs * DVector::from_column_slice(d_hs) + &sd.g_y * DVector::from_column_slice(d_r));
    for (i, a) in active.iter().enumerate() {
        if !a {
            rhs[i] = 0.0;
        }
    }
    let rhs = DMatrix::from_column_slice(nx, 1, rhs.as_slice());
    let u = solve_checked(gx, &rhs, cfg.min_rcond, "short-term KKT Jacobian")?;
    Ok(u.as_slice().to_vec())
}

/// Sensitivities of the inner stationary point: (dx/dr, dx/d|h_s|, dx/dh_l).
pub fn inner_sensitivities(
    problem: &RelayProblem,
    point: &PrimalDualPoint,
    csi: &Csi,
    cfg: &CompensationConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>), SolverError> {
    let sd = second_derivatives(point, csi, problem)?;
    let (gx, active) = active_kkt(&sd, &point.lambda, problem.num_links(), cfg);
    let nx = problem.dim_x();
    let (nf, nl) = (problem.num_flows(), problem.num_links());
    let mut rhs = DMatrix::zeros(nx, nf + 2 * nl);
    rhs.view_mut((0, 0), (nx, nf)).copy_from(&(-&sd.g_y));
    rhs.view_mut((0, nf), (nx, nl)).copy_from(&(-&sd.g_hs));
    rhs.view_mut((0, nf + nl), (nx, nl)).copy_from(&(-&sd.g_hl));
    for (i, a) in active.iter().enumerate() {
        if !a {
            rhs.row_mut(i).fill(0.0);
        }
    }
    let z = solve_checked(gx, &rhs, cfg.min_rcond, "short-term KKT Jacobian")?;
    Ok((z.columns(0, nf).into_owned(), z.columns(nf, nl).into_owned(), z.columns(nf + nl, nl).into_owned()))
}

/// Jacobians of K(x_hat(r, h), r) with the short-term variable at its
/// stationary response: (d/dr, d/dh_l).
pub fn reduced_rate_jacobians(
    problem: &RelayProblem,
    point: &PrimalDualPoint,
    csi: &Csi,
    cfg: &CompensationConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>), SolverError> {
    let sd = second_derivatives(point, csi, problem)?;
    let (zy, _zs, zl) = inner_sensitivities(problem, point, csi, cfg)?;
    Ok((&sd.t_y + &sd.k_x * zy, &sd.t_hl + &sd.k_x * zl))
}

/// Long-term correction -(T_y + delta I)^{-1} T_hl dh_l.
pub fn compensation_y(
    problem: &RelayProblem,
    point: &PrimalDualPoint,
    csi: &Csi,
    d_hl: &[f64],
    cfg: &CompensationConfig,
) -> Result<Vec<f64>, SolverError> {
    let nf = problem.num_flows();
    if d_hl.iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; nf]);
    }
    let (ty, thl) = reduced_rate_jacobians(problem, point, csi, cfg)?;
    let a = ty + DMatrix::identity(nf, nf) * cfg.tikhonov_delta;
    let rhs = -(thl * DVector::from_column_slice(d_hl));
    let u = solve_checked(a, &DMatrix::from_column_slice(nf, 1, rhs.as_slice()), cfg.min_rcond, "rate Jacobian")?;
    Ok(u.as_slice().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub algorithm: Algorithm,
    pub schedule: StepSchedule,
    pub n_s: u64,
    pub tau: f64,
    pub comp: CompensationConfig,
    /// Diagonal preconditioner over x = (p, lambda); identity when absent.
    pub scaling: Option<Vec<f64>>,
    /// Frames of delay on the multipliers seen by the rate update.
    pub outer_delay_frames: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::PrimalDual,
            schedule: StepSchedule { kind: ScheduleKind::Constant, gamma: 0.05, mu0: 0.01, decay: 1.0 },
            n_s: 30,
            tau: 1e-3,
            comp: CompensationConfig::default(),
            scaling: None,
            outer_delay_frames: 0,
        }
    }
}

/// What happened during one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame: u64,
    /// Iterate after the first slot of the frame, with the rates in force.
    pub boundary: PrimalDualPoint,
    /// Whether a compensation solve failed and was skipped.
    pub compensation_skipped: bool,
}

/// Sequential two-timescale state machine for one trajectory.
#[derive(Debug, Clone)]
pub struct TwoTimescale {
    pub cfg: SolverConfig,
    pub point: PrimalDualPoint,
    pub clock: FrameClock,
    prev_csi: Option<Csi>,
    prev_r: Option<Vec<f64>>,
    lambda_history: std::collections::VecDeque<Vec<f64>>,
}

impl TwoTimescale {
    pub fn new(cfg: SolverConfig, start: PrimalDualPoint) -> Self {
        let clock = FrameClock::new(cfg.tau, cfg.n_s);
        Self { cfg, point: start, clock, prev_csi: None, prev_r: None, lambda_history: Default::default() }
    }

    /// Runs one frame on `csi`: compensation at the boundary, N_s inner steps,
    /// then one rate update.
    pub fn run_frame(&mut self, problem: &RelayProblem, csi: &Csi) -> Result<FrameRecord, SolverError> {
        let frame = self.clock.frame();
        let nl = problem.num_links();
        let mut skipped = false;
        let mut comp_x = None;
        let mut comp_r = None;
        if self.cfg.comp.enabled {
            if let (Some(prev), Some(prev_r)) = (&self.prev_csi, &self.prev_r) {
                let d_hs: Vec<f64> = csi.hs.iter().zip(&prev.hs).map(|(a, b)| a - b).collect();
                let d_hl: Vec<f64> = csi.hl.iter().zip(&prev.hl).map(|(a, b)| a - b).collect();
                let d_r: Vec<f64> = self.point.r.iter().zip(prev_r).map(|(a, b)| a - b).collect();
                match compensation_x(problem, &self.point, csi, &d_hs, &d_r, &self.cfg.comp) {
                    Ok(u) if self.cfg.comp.safeguard => {
                        comp_x = safeguard_compensation(problem, &self.point, csi, &u)?;
                        skipped |= comp_x.is_none();
                    }
                    Ok(u) => comp_x = Some(u),
                    Err(SolverError::Conditioning(_)) => skipped = true,
                    Err(e) => return Err(e),
                }
                match compensation_y(problem, &self.point, csi, &d_hl, &self.cfg.comp) {
                    Ok(u) => comp_r = Some(u),
                    Err(SolverError::Conditioning(_)) => skipped = true,
                    Err(e) => return Err(e),
                }
            }
        }
        let gamma = self.cfg.schedule.gamma;
        let mut boundary = None;
        for s in 0..self.cfg.n_s {
            let c = if s == 0 { comp_x.as_deref() } else { None };
            self.point = match self.cfg.algorithm {
                Algorithm::PrimalDual => inner_step(problem, &self.point, csi, gamma, self.cfg.scaling.as_deref(), c)?,
                Algorithm::ProjectedGradient => inner_step_projected(problem, &self.point, csi, gamma, c.map(|c| &c[..nl]))?,
            };
            if s == 0 {
                boundary = Some(self.point.clone());
            }
            self.clock.tick();
        }
        // Rate update, possibly on stale multipliers.
        self.lambda_history.push_back(self.point.lambda.clone());
        while self.lambda_history.len() > self.cfg.outer_delay_frames + 1 {
            self.lambda_history.pop_front();
        }
        let mut seen = self.point.clone();
        seen.lambda = self.lambda_history.front().cloned().unwrap_or_default();
        let mu = self.cfg.schedule.mu(frame + 1);
        let r_next = outer_step(problem, &seen, mu, comp_r.as_deref());
        if r_next.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite("rates"));
        }
        self.prev_r = Some(self.point.r.clone());
        self.prev_csi = Some(csi.clone());
        self.point.r = r_next;
        Ok(FrameRecord { frame, boundary: boundary.unwrap_or_else(|| self.point.clone()), compensation_skipped: skipped })
    }
}

/// Lagrangian value at a point; convenience for monitoring.
pub fn lagrangian_value(problem: &RelayProblem, point: &PrimalDualPoint, csi: &Csi) -> Result<f64, SolverError> {
    Ok(lagrangian_and_grads(point, csi, problem)?.value)
}
