//! Reference schemes the two-timescale controller is compared against.
//!
//! The global-CSI scheme re-solves the deterministic joint problem every
//! frame on possibly stale CSI. The statistical scheme replaces each capacity
//! constraint by a sampled chance constraint and solves once per hold window.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::network::{Csi, PrimalDualPoint, RelayProblem};
use crate::oracle::{solve_inner, solve_joint, OracleConfig, OracleError};
use crate::solver::{project_rates, R_CEIL, R_FLOOR};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("chance-constrained solve did not converge: {0}")]
    Barrier(&'static str),
}

/// Global-CSI decision for one frame. On an outer failure the previous rates
/// are halved until the inner problem solves; the flag reports that fallback.
pub fn baseline1_step(
    problem: &RelayProblem,
    delayed: &Csi,
    cfg: &OracleConfig,
    warm: Option<&[f64]>,
) -> Result<(PrimalDualPoint, bool), OracleError> {
    match solve_joint(problem, delayed, cfg, warm) {
        Ok(pt) => Ok((pt, false)),
        Err(OracleError::OuterMaxIter { .. }) => {
            let base = warm.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.5; problem.num_flows()]);
            let mut scale = 1.0;
            let mut last = None;
            for _ in 0..40 {
                let r = project_rates(&base.iter().map(|v| v * scale).collect::<Vec<_>>(), R_FLOOR);
                match solve_inner(problem, &r, delayed, cfg) {
                    Ok(pt) => return Ok((pt, true)),
                    Err(e) => last = Some(e),
                }
                scale *= 0.5;
            }
            Err(last.unwrap_or(OracleError::OuterMaxIter { iterations: 0, residual: f64::NAN }))
        }
        Err(e) => Err(e),
    }
}

/// Power and rates held over one statistical-CSI window.
#[derive(Debug, Clone, PartialEq)]
pub struct ChanceDecision {
    pub p: Vec<f64>,
    pub r: Vec<f64>,
}

/// Number of samples each constraint must satisfy.
pub fn retained_count(m: usize, theta: f64) -> usize {
    (((1.0 - theta) * m as f64).ceil() as usize).min(m)
}

fn sample_gains(problem: &RelayProblem, hl: &[f64], samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
    samples.iter().map(|hs| problem.gains(&Csi { hs: hs.clone(), hl: hl.to_vec() })).collect()
}

/// Per constraint, the `k` samples with the largest capacity at power `p`.
fn easiest(problem: &RelayProblem, gains: &[Vec<f64>], p: &[f64], k: usize) -> Vec<Vec<usize>> {
    problem
        .constraints
        .iter()
        .map(|con| {
            let cap: Vec<f64> = gains.iter().map(|g| con.links.iter().map(|&l| g[l] * p[l]).sum::<f64>()).collect();
            let mut idx: Vec<usize> = (0..gains.len()).collect();
            idx.sort_by(|&a, &b| cap[b].total_cmp(&cap[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx.sort_unstable();
            idx
        })
        .collect()
}

/// Worst residual per constraint over its retained samples.
fn worst_residuals(problem: &RelayProblem, gains: &[Vec<f64>], sets: &[Vec<usize>], p: &[f64], r: &[f64]) -> Vec<f64> {
    problem
        .constraints
        .iter()
        .zip(sets)
        .map(|(con, set)| {
            let load: f64 = con.flow_counts.iter().zip(r).map(|(a, b)| a * b).sum();
            set.iter()
                .map(|&m| load - (1.0 + con.links.iter().map(|&l| gains[m][l] * p[l]).sum::<f64>()).ln())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Duality-gap tolerance of the barrier path.
const GAP_TOL: f64 = 1e-5;

struct Barrier<'a> {
    problem: &'a RelayProblem,
    gains: &'a [Vec<f64>],
    sets: &'a [Vec<usize>],
}

impl Barrier<'_> {
    fn terms(&self) -> usize {
        self.sets.iter().map(Vec::len).sum::<usize>() + self.problem.num_links() + 2 * self.problem.num_flows()
    }

    /// Barrier objective (minimized), gradient and Hessian; None outside the domain.
    fn eval(&self, z: &[f64], t: f64, derivs: bool) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let nl = self.problem.num_links();
        let nf = self.problem.num_flows();
        let n = nl + nf;
        let (p, r) = z.split_at(nl);
        if p.iter().any(|&v| v <= 0.0) || r.iter().any(|&v| v <= R_FLOOR || v >= R_CEIL) {
            return None;
        }
        let v = self.problem.v;
        let mut f = -t * (r.iter().map(|x| x.ln()).sum::<f64>() - v * p.iter().sum::<f64>());
        let (mut g, mut h) = if derivs { (DVector::zeros(n), DMatrix::zeros(n, n)) } else { (DVector::zeros(0), DMatrix::zeros(0, 0)) };
        for k in 0..nl {
            f -= p[k].ln();
            if !derivs {
                continue;
            }
            g[k] = t * v - 1.0 / p[k];
            h[(k, k)] = 1.0 / (p[k] * p[k]);
        }
        for j in 0..nf {
            let (lo, hi) = (r[j] - R_FLOOR, R_CEIL - r[j]);
            f -= lo.ln() + hi.ln();
            if !derivs {
                continue;
            }
            g[nl + j] = -t / r[j] - 1.0 / lo + 1.0 / hi;
            h[(nl + j, nl + j)] = t / (r[j] * r[j]) + 1.0 / (lo * lo) + 1.0 / (hi * hi);
        }
        let mut idx = Vec::with_capacity(n);
        let mut grad = Vec::with_capacity(n);
        for (con, set) in self.problem.constraints.iter().zip(self.sets) {
            let load: f64 = con.flow_counts.iter().zip(r).map(|(a, b)| a * b).sum();
            let nlinks = con.links.len();
            for &m in set {
                let gm = &self.gains[m];
                let d = 1.0 + con.links.iter().map(|&l| gm[l] * p[l]).sum::<f64>();
                let s = d.ln() - load;
                if s <= 0.0 {
                    return None;
                }
                f -= s.ln();
                if !derivs {
                    continue;
                }
                idx.clear();
                grad.clear();
                for &l in &con.links {
                    idx.push(l);
                    grad.push(-gm[l] / d);
                }
                for (j, &a) in con.flow_counts.iter().enumerate() {
                    if a != 0.0 {
                        idx.push(nl + j);
                        grad.push(a);
                    }
                }
                for a in 0..idx.len() {
                    g[idx[a]] += grad[a] / s;
                    for b in 0..idx.len() {
                        let mut e = grad[a] * grad[b] / (s * s);
                        if a < nlinks && b < nlinks {
                            e += grad[a] * grad[b] / s;
                        }
                        h[(idx[a], idx[b])] += e;
                    }
                }
            }
        }
        Some((f, g, h))
    }

    /// Barrier path-following from a strictly feasible point.
    fn solve(&self, mut z: Vec<f64>) -> Result<Vec<f64>, BaselineError> {
        let m = self.terms() as f64;
        let mut t = 1.0;
        loop {
            for it in 0.. {
                if it == 500 {
                    return Err(BaselineError::Barrier("centering"));
                }
                let (f, g, h) = self.eval(&z, t, true).ok_or(BaselineError::Barrier("left the domain"))?;
                let step = newton_step(h, &g).ok_or(BaselineError::Barrier("singular Hessian"))?;
                let dec = -g.dot(&step);
                if dec / 2.0 < 1e-10 * (1.0 + f.abs()) {
                    break;
                }
                let mut s = 1.0;
                loop {
                    let cand: Vec<f64> = z.iter().zip(step.iter()).map(|(a, d)| a + s * d).collect();
                    if let Some((fc, _, _)) = self.eval(&cand, t, false) {
                        if fc <= f - 0.25 * s * dec {
                            z = cand;
                            break;
                        }
                    }
                    s *= 0.5;
                    if s < 1e-14 {
                        return Err(BaselineError::Barrier("line search"));
                    }
                }
            }
            if m / t < GAP_TOL {
                return Ok(z);
            }
            t *= 16.0;
        }
    }
}

/// Solves H d = -g, adding a growing diagonal shift if H is numerically indefinite.
fn newton_step(h: DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = h.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
    let mut shift = 0.0;
    for _ in 0..8 {
        let shifted = &h + DMatrix::identity(h.nrows(), h.ncols()) * shift;
        if let Some(c) = shifted.cholesky() {
            return Some(c.solve(&(-g)));
        }
        shift = if shift == 0.0 { 1e-12 * scale } else { shift * 100.0 };
    }
    None
}

/// Moves (p, r) strictly inside the sampled constraints in `sets`: rates
/// shrink toward the floor first, then power grows.
fn restore(problem: &RelayProblem, gains: &[Vec<f64>], sets: &[Vec<usize>], p: &mut [f64], r: &mut [f64]) -> bool {
    for _ in 0..120 {
        if worst_residuals(problem, gains, sets, p, r).iter().all(|&w| w < 0.0) {
            return true;
        }
        if r.iter().any(|&v| v > 1.5 * R_FLOOR) {
            r.iter_mut().for_each(|v| *v = (*v * 0.8).max(1.5 * R_FLOOR));
        } else {
            p.iter_mut().for_each(|v| *v *= 2.0);
        }
    }
    false
}

/// Exact optimum subject to every sample in `sets`, by cutting planes: the
/// barrier sees only a working subset, and the most violated sample of each
/// constraint joins it until none is violated.
fn solve_sampled(
    problem: &RelayProblem,
    gains: &[Vec<f64>],
    sets: &[Vec<usize>],
    p: &mut Vec<f64>,
    r: &mut Vec<f64>,
) -> Result<(), BaselineError> {
    let nl = problem.num_links();
    let mut working: Vec<Vec<usize>> = vec![Vec::new(); sets.len()];
    for round in 0..400 {
        let mut added = false;
        for (i, con) in problem.constraints.iter().enumerate() {
            let load: f64 = con.flow_counts.iter().zip(r.iter()).map(|(a, b)| a * b).sum();
            let worst = sets[i].iter().copied().map(|m| {
                let cap = (1.0 + con.links.iter().map(|&l| gains[m][l] * p[l]).sum::<f64>()).ln();
                (m, load - cap)
            });
            if let Some((m, res)) = worst.max_by(|a, b| a.1.total_cmp(&b.1)) {
                if (working[i].is_empty() || res > 0.0) && !working[i].contains(&m) {
                    working[i].push(m);
                    added = true;
                }
            }
        }
        if !added && round > 0 {
            return Ok(());
        }
        if !restore(problem, gains, &working, p, r) {
            return Err(BaselineError::Barrier("no strictly feasible start"));
        }
        let z: Vec<f64> = p.iter().chain(r.iter()).copied().collect();
        let z = (Barrier { problem, gains, sets: &working }).solve(z)?;
        p.copy_from_slice(&z[..nl]);
        r.copy_from_slice(&z[nl..]);
    }
    Err(BaselineError::Barrier("cutting planes"))
}

/// Scenario approximation of the chance-constrained problem: every capacity
/// constraint must hold on the ceil((1-theta) M) samples that are easiest for
/// it at the chosen power. The easy sets are re-selected at each solution
/// until they settle. If the solve fails, `previous` rates are halved until
/// they fit at the previous power; the flag reports that.
pub fn baseline2_step(
    problem: &RelayProblem,
    hl: &[f64],
    samples: &[Vec<f64>],
    theta: f64,
    previous: Option<&ChanceDecision>,
) -> Result<(ChanceDecision, bool), BaselineError> {
    let nl = problem.num_links();
    let nf = problem.num_flows();
    let gains = sample_gains(problem, hl, samples);
    let k = retained_count(samples.len(), theta);
    let mut p = vec![1.0; nl];
    let mut r = vec![1.5 * R_FLOOR; nf];
    let mut sets = easiest(problem, &gains, &p, k);
    // Last solution together with the sample sets it satisfies.
    let mut solved: Option<(Vec<f64>, Vec<f64>, Vec<Vec<usize>>)> = None;
    let mut failure = BaselineError::Barrier("no rounds");
    for _ in 0..6 {
        match solve_sampled(problem, &gains, &sets, &mut p, &mut r) {
            Ok(()) => solved = Some((p.clone(), r.clone(), sets.clone())),
            Err(e) => {
                failure = e;
                break;
            }
        }
        let next = easiest(problem, &gains, &p, k);
        if next == sets {
            break;
        }
        sets = next;
    }
    if let Some((p, r, sets)) = solved {
        if worst_residuals(problem, &gains, &sets, &p, &r).iter().all(|&w| w <= 1e-9) {
            return Ok((ChanceDecision { p, r }, false));
        }
    }
    // Fallback: shrink the previous rates until they fit.
    let prev = previous.cloned().unwrap_or(ChanceDecision { p: vec![1.0; nl], r: vec![0.5; nf] });
    let sets = easiest(problem, &gains, &prev.p, k);
    let mut scale = 1.0;
    for _ in 0..60 {
        let r = project_rates(&prev.r.iter().map(|v| v * scale).collect::<Vec<_>>(), R_FLOOR);
        if worst_residuals(problem, &gains, &sets, &prev.p, &r).iter().all(|&w| w <= 0.0) {
            return Ok((ChanceDecision { p: prev.p.clone(), r }, true));
        }
        scale *= 0.5;
    }
    Err(failure)
}

/// Largest per-constraint fraction of `samples` on which the decision
/// violates its planned capacity.
pub fn violation_rate(problem: &RelayProblem, decision: &ChanceDecision, hl: &[f64], samples: &[Vec<f64>]) -> f64 {
    let gains = sample_gains(problem, hl, samples);
    let all: Vec<usize> = (0..samples.len()).collect();
    problem
        .constraints
        .iter()
        .map(|con| {
            let load: f64 = con.flow_counts.iter().zip(&decision.r).map(|(a, b)| a * b).sum();
            let bad =
                all.iter().filter(|&&m| load > (1.0 + con.links.iter().map(|&l| gains[m][l] * decision.p[l]).sum::<f64>()).ln()).count();
            bad as f64 / samples.len().max(1) as f64
        })
        .fold(0.0, f64::max)
}
