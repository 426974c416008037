//! Reference solutions for the moving targets and the tracking errors
//! measured against them.
//!
//! At fixed rates the inner problem splits per receiver into minimizing
//! total power over a multi-access region, which is a contra-polymatroid
//! in received power. The greedy ordering that serves the weakest link
//! first gives the exact optimum and its multipliers. Every closed-form
//! answer is checked against the fixed-point residual of the projected
//! primal-dual map before it is returned; if the check fails, the damped
//! iteration takes over.

use nalgebra::DMatrix;
use rand::Rng;
use thiserror::Error;

use crate::channel::FadingDomain;
use crate::network::{link_rates, primal_dual_map, rate_gradient, Csi, NetworkError, PrimalDualPoint, RelayProblem};
use crate::solver::{project_nonneg, project_rates, R_CEIL, R_FLOOR};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("inner solve hit {iterations} iterations with fixed-point residual {residual:e}")]
    InnerMaxIter { iterations: usize, residual: f64 },
    #[error("outer solve hit {iterations} iterations with fixed-point residual {residual:e}")]
    OuterMaxIter { iterations: usize, residual: f64 },
    #[error("trajectory has {len} frames, burn-in needs more than {burn_in}")]
    ShortTrajectory { len: usize, burn_in: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub inner_tol: f64,
    pub outer_samples: usize,
    pub outer_tol: f64,
    pub max_iter: usize,
    /// Re-solve the outer target once h_l has moved this far.
    pub cache_tol: f64,
    pub burn_in_frac: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { inner_tol: 1e-10, outer_samples: 4096, outer_tol: 1e-9, max_iter: 200_000, cache_tol: 1e-4, burn_in_frac: 0.1 }
    }
}

/// ||x - proj(x + G(x))|| for the primal-dual map at fixed rates.
pub fn inner_fixed_point_residual(problem: &RelayProblem, point: &PrimalDualPoint, csi: &Csi) -> Result<f64, OracleError> {
    let g = primal_dual_map(point, csi, problem)?;
    let x = point.x();
    let moved: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + b).collect();
    let proj = project_nonneg(&moved);
    Ok(x.iter().zip(&proj).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

/// Greedy solution of the inner problem; `None` when some gain is not positive.
pub fn inner_closed_form(problem: &RelayProblem, r: &[f64], csi: &Csi) -> Option<PrimalDualPoint> {
    let g = problem.gains(csi);
    let c = link_rates(r, &problem.topo);
    let mut p = vec![0.0; problem.num_links()];
    let mut lambda = vec![0.0; problem.num_constraints()];
    for (m, inbound) in &problem.topo.l_plus {
        let mut order: Vec<usize> = (0..inbound.len()).collect();
        order.sort_by(|&a, &b| g[inbound[a]].total_cmp(&g[inbound[b]]).then(a.cmp(&b)));
        let index = &problem.constraint_index[m];
        let mut mask = 0u32;
        let mut c_prev = 0.0;
        for (pos, &b) in order.iter().enumerate() {
            let k = inbound[b];
            if !(g[k] > 0.0) || !g[k].is_finite() {
                return None;
            }
            mask |= 1 << b;
            let c_set = c_prev + c[k];
            p[k] = (c_set.exp() - c_prev.exp()) / g[k];
            let mu = match order.get(pos + 1) {
                Some(&nb) => problem.v * (1.0 / g[k] - 1.0 / g[inbound[nb]]),
                None => problem.v / g[k],
            };
            lambda[index[&mask]] = mu * c_set.exp();
            c_prev = c_set;
        }
    }
    Some(PrimalDualPoint { p, lambda, r: r.to_vec() })
}

/// Damped extragradient iteration of the projected primal-dual map.
pub fn solve_inner_iterative(
    problem: &RelayProblem,
    start: &PrimalDualPoint,
    csi: &Csi,
    cfg: &OracleConfig,
) -> Result<PrimalDualPoint, OracleError> {
    let g = problem.gains(csi);
    let scale = g.iter().fold(problem.v, |a, &b| a.max(b));
    let step = 0.25 / scale;
    let mut pt = start.clone();
    let mut residual = inner_fixed_point_residual(problem, &pt, csi)?;
    for it in 0..cfg.max_iter {
        if residual <= cfg.inner_tol {
            return Ok(pt);
        }
        let x = pt.x();
        let g0 = primal_dual_map(&pt, csi, problem)?;
        let mut half = pt.clone();
        half.set_x(&project_nonneg(&x.iter().zip(&g0).map(|(a, b)| a + step * b).collect::<Vec<_>>()));
        let g1 = primal_dual_map(&half, csi, problem)?;
        pt.set_x(&project_nonneg(&x.iter().zip(&g1).map(|(a, b)| a + step * b).collect::<Vec<_>>()));
        if pt.p.iter().chain(&pt.lambda).any(|v| !v.is_finite()) {
            return Err(OracleError::InnerMaxIter { iterations: it, residual: f64::INFINITY });
        }
        residual = inner_fixed_point_residual(problem, &pt, csi)?;
    }
    Err(OracleError::InnerMaxIter { iterations: cfg.max_iter, residual })
}

/// Partial stationary point x_hat(r, h).
pub fn solve_inner(problem: &RelayProblem, r: &[f64], csi: &Csi, cfg: &OracleConfig) -> Result<PrimalDualPoint, OracleError> {
    if let Some(pt) = inner_closed_form(problem, r, csi) {
        let res = inner_fixed_point_residual(problem, &pt, csi)?;
        let scale = 1.0 + pt.p.iter().chain(&pt.lambda).fold(0.0f64, |a, b| a.max(b.abs()));
        if res <= cfg.inner_tol * scale {
            return Ok(pt);
        }
        return solve_inner_iterative(problem, &pt, csi, cfg);
    }
    let start = PrimalDualPoint { p: vec![0.0; problem.num_links()], lambda: vec![0.0; problem.num_constraints()], r: r.to_vec() };
    solve_inner_iterative(problem, &start, csi, cfg)
}

/// Stationary fading magnitudes for the sample-average outer problem.
pub fn draw_fading_samples<R: Rng + ?Sized>(n_links: usize, m: usize, domain: FadingDomain, rng: &mut R) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..n_links).map(|_| domain.sample(rng)).collect()).collect()
}

/// Sample averages at rates r: objective, gradient k_bar and its Jacobian.
#[derive(Debug, Clone)]
pub struct OuterModel {
    pub value: f64,
    pub k: Vec<f64>,
    pub jacobian: DMatrix<f64>,
}

/// Evaluates the averaged outer model over fixed fading samples.
pub fn outer_model(problem: &RelayProblem, r: &[f64], hl: &[f64], samples: &[Vec<f64>]) -> Result<OuterModel, OracleError> {
    let nf = problem.num_flows();
    let mut value = 0.0;
    let mut k = vec![0.0; nf];
    let mut jac = DMatrix::zeros(nf, nf);
    let cfg = OracleConfig::default();
    for hs in samples {
        let csi = Csi { hs: hs.clone(), hl: hl.to_vec() };
        let pt = solve_inner(problem, r, &csi, &cfg)?;
        value -= problem.v * pt.p.iter().sum::<f64>();
        let kk = rate_gradient(&pt, problem);
        for j in 0..nf {
            k[j] += kk[j];
        }
        // d lambda_i / d r = lambda_i * n_i on the greedy chain, so the
        // reduced Jacobian is -diag(1/r^2) - sum_i lambda_i n_i n_i'.
        for (i, con) in problem.constraints.iter().enumerate() {
            let lam = pt.lambda[i];
            if lam == 0.0 {
                continue;
            }
            for a in 0..nf {
                for b in 0..nf {
                    jac[(a, b)] -= lam * con.flow_counts[a] * con.flow_counts[b];
                }
            }
        }
    }
    let m = samples.len().max(1) as f64;
    value /= m;
    value += r.iter().map(|v| v.ln()).sum::<f64>();
    for j in 0..nf {
        k[j] /= m;
    }
    jac /= m;
    for j in 0..nf {
        jac[(j, j)] -= 1.0 / (r[j] * r[j]);
    }
    Ok(OuterModel { value, k, jacobian: jac })
}

/// ||r - proj(r + k_bar(r))||.
pub fn outer_fixed_point_residual(r: &[f64], k: &[f64]) -> f64 {
    let moved: Vec<f64> = r.iter().zip(k).map(|(a, b)| a + b).collect();
    let proj = project_rates(&moved, R_FLOOR);
    r.iter().zip(&proj).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Maximizes the sample-average outer objective over fixed fading samples.
///
/// Projected Newton ascent with backtracking on the averaged objective; the
/// rate box is handled by freezing coordinates that sit on a face with an
/// outward gradient.
pub fn solve_outer_with_samples(
    problem: &RelayProblem,
    hl: &[f64],
    samples: &[Vec<f64>],
    cfg: &OracleConfig,
    start: Option<&[f64]>,
) -> Result<Vec<f64>, OracleError> {
    let nf = problem.num_flows();
    let mut r: Vec<f64> = start.map(|s| s.to_vec()).unwrap_or_else(|| vec![0.5; nf]);
    let mut model = outer_model(problem, &r, hl, samples)?;
    let max_newton = 200.min(cfg.max_iter.max(1));
    let mut residual = outer_fixed_point_residual(&r, &model.k);
    for _ in 0..max_newton {
        if residual <= cfg.outer_tol {
            return Ok(r);
        }
        let free: Vec<usize> =
            (0..nf).filter(|&j| !(r[j] <= R_FLOOR && model.k[j] < 0.0) && !(r[j] >= R_CEIL && model.k[j] > 0.0)).collect();
        let mut dir = vec![0.0; nf];
        if !free.is_empty() {
            let n = free.len();
            let h = DMatrix::from_fn(n, n, |a, b| -model.jacobian[(free[a], free[b])]);
            let g = nalgebra::DVector::from_iterator(n, free.iter().map(|&j| model.k[j]));
            let step = h.clone().cholesky().map(|c| c.solve(&g)).unwrap_or(g);
            for (a, &j) in free.iter().enumerate() {
                dir[j] = step[a];
            }
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = project_rates(&r.iter().zip(&dir).map(|(a, d)| a + t * d).collect::<Vec<_>>(), R_FLOOR);
            let cm = outer_model(problem, &cand, hl, samples)?;
            let gain: f64 = cand.iter().zip(&r).zip(&model.k).map(|((c, a), k)| k * (c - a)).sum();
            let armijo = cm.value >= model.value + 1e-4 * gain;
            if armijo || outer_fixed_point_residual(&cand, &cm.k) < residual {
                r = cand;
                model = cm;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        residual = outer_fixed_point_residual(&r, &model.k);
        if !accepted {
            break;
        }
    }
    if residual <= cfg.outer_tol {
        Ok(r)
    } else {
        Err(OracleError::OuterMaxIter { iterations: max_newton, residual })
    }
}

/// Outer target y*(h_l) from `cfg.outer_samples` fresh stationary fading draws.
pub fn solve_outer<R: Rng + ?Sized>(
    problem: &RelayProblem,
    hl: &[f64],
    domain: FadingDomain,
    cfg: &OracleConfig,
    rng: &mut R,
) -> Result<Vec<f64>, OracleError> {
    let samples = draw_fading_samples(problem.num_links(), cfg.outer_samples.max(1), domain, rng);
    solve_outer_with_samples(problem, hl, &samples, cfg, None)
}

/// Deterministic joint optimum at a frozen channel (no expectation).
pub fn solve_joint(problem: &RelayProblem, csi: &Csi, cfg: &OracleConfig, start: Option<&[f64]>) -> Result<PrimalDualPoint, OracleError> {
    let r = solve_outer_with_samples(problem, &csi.hl, std::slice::from_ref(&csi.hs), cfg, start)?;
    solve_inner(problem, &r, csi, cfg)
}

/// Outer targets cached by path loss.
#[derive(Debug, Clone)]
pub struct OuterCache {
    pub samples: Vec<Vec<f64>>,
    pub cfg: OracleConfig,
    entry: Option<(Vec<f64>, Vec<f64>)>,
    pub solves: usize,
}

impl OuterCache {
    pub fn new(samples: Vec<Vec<f64>>, cfg: OracleConfig) -> Self {
        Self { samples, cfg, entry: None, solves: 0 }
    }

    pub fn target(&mut self, problem: &RelayProblem, hl: &[f64]) -> Result<Vec<f64>, OracleError> {
        if let Some((h, y)) = &self.entry {
            let moved = h.iter().zip(hl).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if moved <= self.cfg.cache_tol {
                return Ok(y.clone());
            }
        }
        let start = self.entry.as_ref().map(|(_, y)| y.clone());
        let y = solve_outer_with_samples(problem, hl, &self.samples, &self.cfg, start.as_deref())?;
        self.solves += 1;
        self.entry = Some((hl.to_vec(), y.clone()));
        Ok(y)
    }
}

/// One frame-boundary sample of a trajectory.
#[derive(Debug, Clone)]
pub struct TrackingSample {
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub csi: Csi,
}

/// Instantaneous squared distances to the targets at one frame boundary.
pub fn tracking_instant(problem: &RelayProblem, sample: &TrackingSample, cache: &mut OuterCache) -> Result<(f64, f64), OracleError> {
    let xhat = solve_inner(problem, &sample.r, &sample.csi, &cache.cfg)?.x();
    let ex = sample.x.iter().zip(&xhat).map(|(a, b)| (a - b).powi(2)).sum();
    let ystar = cache.target(problem, &sample.csi.hl)?;
    let ey = sample.r.iter().zip(&ystar).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((ex, ey))
}

/// Time-averaged tracking errors (e_x, e_y) after discarding burn-in frames.
pub fn tracking_errors(problem: &RelayProblem, trajectory: &[TrackingSample], cache: &mut OuterCache) -> Result<(f64, f64), OracleError> {
    let burn_in = (trajectory.len() as f64 * cache.cfg.burn_in_frac).floor() as usize;
    if trajectory.len() <= burn_in {
        return Err(OracleError::ShortTrajectory { len: trajectory.len(), burn_in });
    }
    let mut ex = 0.0;
    let mut ey = 0.0;
    for s in &trajectory[burn_in..] {
        let (a, b) = tracking_instant(problem, s, cache)?;
        ex += a;
        ey += b;
    }
    let n = (trajectory.len() - burn_in) as f64;
    Ok((ex / n, ey / n))
}

/// Averages already-computed per-frame errors after burn-in.
pub fn fold_tracking(instant: &[(f64, f64)], burn_in_frac: f64) -> Option<(f64, f64)> {
    let burn_in = (instant.len() as f64 * burn_in_frac).floor() as usize;
    let tail = instant.get(burn_in..)?;
    if tail.is_empty() {
        return None;
    }
    let n = tail.len() as f64;
    Some((tail.iter().map(|e| e.0).sum::<f64>() / n, tail.iter().map(|e| e.1).sum::<f64>() / n))
}

/// Which target a finite-difference sensitivity is taken of.
#[derive(Debug, Clone)]
pub enum SensitivityTarget<'a> {
    /// x_hat(r, h) along a direction in |h_s| (first half) and h_l (second half).
    Inner { r: &'a [f64] },
    /// y*(h_l) along a direction in h_l, with fixed fading samples.
    Outer { samples: &'a [Vec<f64>] },
}

/// Central finite difference of a target along `dir`.
pub fn fd_sensitivity(
    problem: &RelayProblem,
    target: SensitivityTarget<'_>,
    csi: &Csi,
    dir: &[f64],
    step: f64,
    cfg: &OracleConfig,
) -> Result<Vec<f64>, OracleError> {
    let nl = problem.num_links();
    if dir.iter().all(|&d| d == 0.0) {
        return Ok(match target {
            SensitivityTarget::Inner { .. } => vec![0.0; problem.dim_x()],
            SensitivityTarget::Outer { .. } => vec![0.0; problem.num_flows()],
        });
    }
    let shifted = |s: f64| -> Csi {
        match &target {
            SensitivityTarget::Inner { .. } => Csi {
                hs: csi.hs.iter().zip(dir).map(|(h, d)| h + s * d).collect(),
                hl: csi.hl.iter().enumerate().map(|(k, h)| h + s * dir.get(nl + k).copied().unwrap_or(0.0)).collect(),
            },
            SensitivityTarget::Outer { .. } => Csi { hs: csi.hs.clone(), hl: csi.hl.iter().zip(dir).map(|(h, d)| h + s * d).collect() },
        }
    };
    let eval = |c: &Csi| -> Result<Vec<f64>, OracleError> {
        match &target {
            SensitivityTarget::Inner { r } => Ok(solve_inner(problem, r, c, cfg)?.x()),
            SensitivityTarget::Outer { samples } => solve_outer_with_samples(problem, &c.hl, samples, cfg, None),
        }
    };
    let plus = eval(&shifted(step))?;
    let minus = eval(&shifted(-step))?;
    Ok(plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * step)).collect())
}
