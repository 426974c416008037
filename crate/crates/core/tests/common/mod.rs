//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod checks;

use mtnetopt::channel::{FadingDomain, PathLossParams};
use mtnetopt::network::{capacity_residuals, mac_residuals, Csi, PrimalDualPoint, RelayProblem, Topology};
use rand::Rng;

pub const SNR_11DB: f64 = 12.589254117941673;
pub const DOMAIN: FadingDomain = FadingDomain { min: 0.5, max: 3.0 };

/// Path loss of every link at the nominal node positions.
pub fn nominal_hl(topo: &Topology) -> Vec<f64> {
    let pl = PathLossParams::normalized(1.8, 75.0);
    topo.links
        .iter()
        .map(|l| {
            let a = topo.nodes[l.tx].position;
            let b = topo.nodes[l.rx].position;
            pl.gain_at((a[0] - b[0]).hypot(a[1] - b[1]))
        })
        .collect()
}

pub fn problem(margin: f64) -> RelayProblem {
    RelayProblem::new(Topology::relay4(), 1.0).with_snr(SNR_11DB, margin)
}

pub fn nominal() -> (RelayProblem, Csi) {
    let p = problem(1.5);
    let hl = nominal_hl(&p.topo);
    (p, Csi::new(vec![0.9, 1.1, 0.8, 1.0, 1.2, 0.95], hl))
}

/// Single flow over a single link.
pub fn single_link() -> RelayProblem {
    let text = r#"{
        "nodes": [
            {"id": 0, "role": "bs", "position": [0.0, 0.0], "mobile": false},
            {"id": 1, "role": "user", "position": [60.0, 0.0], "mobile": true}
        ],
        "links": [{"id": 1, "tx": 1, "rx": 0}],
        "flows": [{"id": 1, "source": 1, "path": [1]}]
    }"#;
    RelayProblem::new(Topology::from_json(text).unwrap(), 1.0).with_snr(SNR_11DB, 1.0)
}

pub fn random_csi<R: Rng>(problem: &RelayProblem, rng: &mut R) -> Csi {
    let n = problem.num_links();
    Csi::new((0..n).map(|_| rng.random_range(0.5..3.0)).collect(), (0..n).map(|_| rng.random_range(0.3..1.0)).collect())
}

/// Point with positive power, multipliers and rates, strictly inside every
/// capacity constraint.
pub fn random_interior_point<R: Rng>(problem: &RelayProblem, csi: &Csi, rng: &mut R) -> PrimalDualPoint {
    let r: Vec<f64> = (0..problem.num_flows()).map(|_| rng.random_range(0.05..0.8)).collect();
    let mut p: Vec<f64> = (0..problem.num_links()).map(|_| rng.random_range(0.1..2.0)).collect();
    while mac_residuals(&r, &p, csi, problem).iter().any(|&w| w >= -1e-3) {
        p.iter_mut().for_each(|v| *v *= 1.5);
    }
    debug_assert!(capacity_residuals(&r, &p, csi, problem).iter().all(|&w| w < 0.0));
    let lambda = (0..problem.num_constraints()).map(|_| rng.random_range(0.05..2.0)).collect();
    PrimalDualPoint { p, lambda, r }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// ||a - b|| / max(||a||, ||b||), zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        dist(a, b) / scale
    }
}

/// Central-difference Jacobian of `f` at `x` (columns follow `x`).
pub fn fd_jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], rel_step: f64) -> Vec<Vec<f64>> {
    (0..x.len())
        .map(|j| {
            let h = rel_step * x[j].abs().max(1e-2);
            let mut up = x.to_vec();
            up[j] += h;
            let mut dn = x.to_vec();
            dn[j] -= h;
            f(&up).iter().zip(f(&dn)).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        })
        .collect()
}

/// Column-major flattening of a nalgebra matrix.
pub fn columns(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.ncols()).map(|j| m.column(j).iter().copied().collect()).collect()
}

pub fn flat(cols: &[Vec<f64>]) -> Vec<f64> {
    cols.iter().flatten().copied().collect()
}

/// Single-link OU run: mean |h_s|^2 and Re E[h(t + k dt) conj(h(t))] at each lag k.
pub fn ou_statistics(a_h: f64, dt: f64, steps: usize, lags: &[usize], seed: u64) -> (f64, Vec<f64>) {
    use mtnetopt::channel::{ou_step, OuFading};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut state = OuFading::stationary(1, a_h, &mut rng).unwrap();
    let mut path = Vec::with_capacity(steps);
    for _ in 0..steps {
        path.push(state.h_s[0]);
        state = ou_step(&state, dt, &mut rng).unwrap();
    }
    let power = path.iter().map(|h| h.norm_sqr()).sum::<f64>() / steps as f64;
    let cov = lags.iter().map(|&k| path.iter().zip(&path[k..]).map(|(a, b)| (b * a.conj()).re).sum::<f64>() / (steps - k) as f64).collect();
    (power, cov)
}

/// Random nonempty polytope {x : A x <= b} in `n` dimensions with `m` rows.
pub fn random_polytope<R: Rng>(n: usize, m: usize, rng: &mut R) -> mtnetopt::solver::Polytope {
    let a = nalgebra::DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = (0..m).map(|i| (0..n).map(|j| a[(i, j)] * x0[j]).sum::<f64>() + rng.random_range(0.0..0.5)).collect();
    mtnetopt::solver::Polytope { a, b }
}

/// Projection onto a polytope by enumerating every active set.
pub fn brute_force_projection(v: &[f64], poly: &mtnetopt::solver::Polytope) -> Vec<f64> {
    use nalgebra::{DMatrix, DVector};
    let (m, n) = poly.a.shape();
    let vv = DVector::from_column_slice(v);
    let feasible = |x: &DVector<f64>| (0..m).all(|i| poly.a.row(i).transpose().dot(x) - poly.b[i] <= 1e-10);
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let x = if rows.is_empty() {
            vv.clone()
        } else {
            let a_s = DMatrix::from_fn(rows.len(), n, |r, c| poly.a[(rows[r], c)]);
            let b_s = DVector::from_iterator(rows.len(), rows.iter().map(|&i| poly.b[i]));
            let gram = &a_s * a_s.transpose();
            let Some(nu) = gram.lu().solve(&(&a_s * &vv - b_s)) else { continue };
            if nu.iter().any(|&l| l < -1e-12) {
                continue;
            }
            &vv - a_s.transpose() * nu
        };
        if feasible(&x) {
            let d = (&x - &vv).norm();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, x));
            }
        }
    }
    best.expect("nonempty polytope has a projection").1.as_slice().to_vec()
}

/// Two-timescale run on frozen CSI; returns per-frame (||r - y*||, ||x - x_hat||).
pub fn static_run(problem: &RelayProblem, csi: &Csi, schedule: mtnetopt::solver::StepSchedule, frames: usize) -> Vec<(f64, f64)> {
    use mtnetopt::oracle::{solve_inner, solve_joint, OracleConfig};
    use mtnetopt::solver::{SolverConfig, TwoTimescale};
    let ocfg = OracleConfig::default();
    let ystar = solve_joint(problem, csi, &ocfg, None).unwrap().r;
    let start = PrimalDualPoint {
        p: vec![0.0; problem.num_links()],
        lambda: vec![0.0; problem.num_constraints()],
        r: vec![0.5; problem.num_flows()],
    };
    let cfg = SolverConfig { schedule, ..SolverConfig::default() };
    let mut ts = TwoTimescale::new(cfg, start);
    (0..frames)
        .map(|_| {
            ts.run_frame(problem, csi).unwrap();
            let xhat = solve_inner(problem, &ts.point.r, csi, &ocfg).unwrap();
            (dist(&ts.point.r, &ystar), dist(&ts.point.x(), &xhat.x()))
        })
        .collect()
}

/// Virtual error system from a perturbed start: every gap and error
/// component begins at `offset`, fading at `csi.hs`.
pub fn vsds_run(
    problem: &RelayProblem,
    csi: &Csi,
    a_h: f64,
    diffusion: bool,
    dt: f64,
    steps: usize,
    offset: f64,
    seed: u64,
) -> Vec<mtnetopt::analysis::VsdsState> {
    let (nx, nf) = (problem.dim_x(), problem.num_flows());
    let init = mtnetopt::analysis::VsdsState {
        t: 0.0,
        x_gap: vec![offset; nx],
        y_gap: vec![offset; nf],
        x_err: vec![offset; nx],
        y_err: vec![offset; nf],
        hs: csi.hs.clone(),
        hl: csi.hl.clone(),
    };
    vsds_from(problem, init, a_h, diffusion, dt, steps, seed)
}

/// Noise-free virtual system on a frozen channel, started with only the
/// short-term gap displaced.
pub fn vsds_gap_only(problem: &RelayProblem, csi: &Csi, dt: f64, steps: usize, seed: u64) -> Vec<mtnetopt::analysis::VsdsState> {
    let (nx, nf) = (problem.dim_x(), problem.num_flows());
    let init = mtnetopt::analysis::VsdsState {
        t: 0.0,
        x_gap: (0..nx).map(|i| 0.05 * (1.0 + i as f64 / 3.0)).collect(),
        y_gap: vec![0.0; nf],
        x_err: vec![0.0; nx],
        y_err: vec![0.0; nf],
        hs: csi.hs.clone(),
        hl: csi.hl.clone(),
    };
    vsds_from(problem, init, 0.0, false, dt, steps, seed)
}

fn vsds_from(
    problem: &RelayProblem,
    init: mtnetopt::analysis::VsdsState,
    a_h: f64,
    diffusion: bool,
    dt: f64,
    steps: usize,
    seed: u64,
) -> Vec<mtnetopt::analysis::VsdsState> {
    use mtnetopt::analysis::{integrate_vsds, VsdsConfig};
    use mtnetopt::oracle::OracleConfig;
    use mtnetopt::solver::CompensationConfig;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let samples = mtnetopt::oracle::draw_fading_samples(problem.num_links(), 64, DOMAIN, &mut rng);
    let cfg = VsdsConfig {
        a_h,
        tau: 1e-3,
        n_s: 30.0,
        gamma: 0.25,
        h_l_rate: vec![0.0; problem.num_links()],
        diffusion,
        dt,
        steps,
        domain: DOMAIN,
        samples,
        oracle: OracleConfig::default(),
        comp: CompensationConfig { min_rcond: 0.0, safeguard: false, ..CompensationConfig::default() },
    };
    integrate_vsds(problem, &init, &cfg, &mut rng).unwrap()
}

/// Log-uniform random stability parameters.
pub fn random_params<R: Rng>(rng: &mut R) -> mtnetopt::analysis::StabilityParams {
    let mut lg = |lo: f64, hi: f64| 10f64.powf(rng.random_range(lo..hi));
    mtnetopt::analysis::StabilityParams {
        alpha_x: lg(-2.0, 1.0),
        alpha_y: lg(-2.0, 1.0),
        alpha: lg(-2.0, 1.0),
        l_x: lg(-2.0, 1.0),
        l_y: lg(-2.0, 1.0),
        v_h: lg(-2.0, 1.0),
        v_y: lg(-2.0, 1.0),
        varpi: lg(-1.0, 1.0),
        sigma_bar: lg(-1.0, 1.0),
        n: 6.0,
    }
}
