//! Experiment driver: configuration, the controller and its baselines over
//! simulated channels, metric folds and file outputs.

pub mod baselines;
pub mod config;
pub mod metrics;
pub mod output;
pub mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use config::{Config, ConfigError, Scheme};
pub use metrics::{aggregate, metrics_fold, Aggregate, FrameRow, MeanCi, MetricsSummary};
pub use run::{run_single, RunRecord, Setup};

use crate::analysis::{
    error_bound_unchecked, estimate_params, stability_condition, AnalysisError, ErrorBound, EstimateOptions, SampleState, StabilityParams,
    StabilityVerdict,
};
use crate::channel::ChannelError;
use crate::oracle::{draw_fading_samples, solve_inner, OracleError};
use crate::solver::SolverError;
use baselines::BaselineError;
use output::{line_plot, Series};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    /// Process exit code: 2 for configuration problems, 3 for numerical
    /// failures, 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Io { .. } => 1,
            _ => 3,
        }
    }
}

/// One swept key and its values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    pub section: String,
    pub key: String,
    pub values: Vec<f64>,
}

impl Grid {
    /// Parses `key=v1,v2,...`; `key` may be bare or `section.key`.
    pub fn parse(spec: &str) -> Result<Self, ConfigError> {
        let bad = |m: &str| ConfigError::Invalid(format!("grid `{spec}`: {m}"));
        let (key, vals) = spec.split_once('=').ok_or_else(|| bad("expected key=v1,v2"))?;
        let key = key.trim();
        let (section, key) = match key.split_once('.') {
            Some((s, k)) => (s.to_string(), k.to_string()),
            None => (Config::section_of(key).ok_or_else(|| bad("unknown key"))?.to_string(), key.to_string()),
        };
        let key = if key == "a_H" { "a_h".to_string() } else { key };
        let values =
            vals.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad("values must be numbers"))).collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() {
            return Err(bad("no values"));
        }
        Ok(Self { section, key, values })
    }

    /// Config for one grid value.
    pub fn apply(&self, cfg: &Config, value: f64) -> Result<Config, ConfigError> {
        let mut c = cfg.clone();
        c.set(&self.section, &self.key, &value.to_string(), Path::new("."))?;
        c.validate()?;
        Ok(c)
    }
}

/// Aggregate for one (scheme, grid value) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub scheme: Scheme,
    pub grid_value: Option<f64>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub config: Config,
    pub grid: Option<Grid>,
    pub runs: Vec<RunRecord>,
    pub cells: Vec<Cell>,
}

/// Thread count from `MTNETOPT_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>, ConfigError> {
    match std::env::var("MTNETOPT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| ConfigError::Invalid(format!("MTNETOPT_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Runs every (grid value, scheme, seed) combination in parallel and
/// aggregates across seeds. Results are ordered independently of scheduling.
pub fn run_scenario(cfg: &Config, grid: Option<&Grid>) -> Result<ExperimentResult, ExperimentError> {
    cfg.validate()?;
    let points: Vec<(Option<f64>, Config)> = match grid {
        None => vec![(None, cfg.clone())],
        Some(g) => g.values.iter().map(|&v| Ok((Some(v), g.apply(cfg, v)?))).collect::<Result<_, ConfigError>>()?,
    };
    let mut jobs = Vec::new();
    for (gi, (_, c)) in points.iter().enumerate() {
        for &scheme in &c.experiment.schemes {
            for &seed in &c.experiment.seeds {
                jobs.push((gi, scheme, seed));
            }
        }
    }
    let work = || -> Result<Vec<RunRecord>, ExperimentError> {
        jobs.par_iter()
            .map(|&(gi, scheme, seed)| {
                let (gv, c) = &points[gi];
                let mut rec = run_single(c, scheme, seed)?;
                rec.grid = grid.zip(*gv).map(|(g, v)| (g.key.clone(), v));
                Ok(rec)
            })
            .collect()
    };
    let runs = match thread_cap()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| ConfigError::Invalid(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let mut groups: BTreeMap<(usize, Scheme), Vec<MetricsSummary>> = BTreeMap::new();
    for (&(gi, scheme, _), rec) in jobs.iter().zip(&runs) {
        groups.entry((gi, scheme)).or_default().push(rec.summary);
    }
    let cells = groups.into_iter().map(|((gi, scheme), v)| Cell { scheme, grid_value: points[gi].0, aggregate: aggregate(&v) }).collect();
    Ok(ExperimentResult { config: cfg.clone(), grid: grid.cloned(), runs, cells })
}

fn run_tag(rec: &RunRecord) -> String {
    match &rec.grid {
        Some((k, v)) => format!("{}_{k}{v}_seed{}", rec.scheme, rec.seed),
        None => format!("{}_seed{}", rec.scheme, rec.seed),
    }
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    throughput_definition: &'static str,
    utility_definition: &'static str,
    ci_method: &'static str,
    burn_in_frames: usize,
    config: &'a Config,
    grid: &'a Option<Grid>,
    runs: &'a [RunRecord],
    cells: &'a [Cell],
}

/// Writes per-frame CSVs, the JSON summary and SVG plots under `out`.
pub fn emit_outputs(result: &ExperimentResult, out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut written = Vec::new();
    for rec in &result.runs {
        let path = out.join("frames").join(format!("{}.csv", run_tag(rec)));
        output::write_file(&path, &output::frames_csv(&rec.rows))?;
        written.push(path);
        if !rec.channel.is_empty() {
            let path = out.join("channel").join(format!("{}.csv", run_tag(rec)));
            output::write_file(&path, &output::channel_csv(&rec.channel))?;
            written.push(path);
        }
    }
    let doc = SummaryDoc {
        throughput_definition: "mean over post-burn-in frames of the sum rate, counted only on frames where every capacity constraint holds at the true channel",
        utility_definition: "mean over feasible post-burn-in frames of the sum of log rates",
        ci_method: "normal approximation, 1.96 standard errors across seeds",
        burn_in_frames: result.config.burn_in(),
        config: &result.config,
        grid: &result.grid,
        runs: &result.runs,
        cells: &result.cells,
    };
    let json = serde_json::to_string_pretty(&doc).expect("summary serializes");
    let path = out.join("summary.json");
    output::write_file(&path, &json)?;
    written.push(path);

    let x_label = result.grid.as_ref().map_or("a_h".to_string(), |g| g.key.clone());
    let default_x = result.config.channel.a_h;
    let metrics: [(&str, &str, fn(&Aggregate) -> f64); 5] = [
        ("p_out", "outage probability", |a| a.p_out.mean),
        ("throughput", "effective throughput (nats/s/Hz)", |a| a.throughput.mean),
        ("utility", "proportional-fair utility", |a| a.utility.mean),
        ("e_x", "mean squared x tracking error", |a| a.e_x.mean),
        ("e_y", "mean squared y tracking error", |a| a.e_y.mean),
    ];
    for (name, label, get) in metrics {
        let mut series: Vec<Series> = Vec::new();
        for cell in &result.cells {
            let point = (cell.grid_value.unwrap_or(default_x), get(&cell.aggregate));
            match series.iter_mut().find(|s| s.name == cell.scheme.name()) {
                Some(s) => s.points.push(point),
                None => series.push(Series { name: cell.scheme.name().to_string(), points: vec![point] }),
            }
        }
        let path = out.join(format!("{name}.svg"));
        output::write_file(&path, &line_plot(label, &x_label, label, &series))?;
        written.push(path);
    }

    // Power trajectory of the traced link against its moving target, for the
    // first seed and grid point.
    let first_seed = result.config.experiment.seeds.first().copied();
    let first_grid = result.runs.first().and_then(|r| r.grid.clone());
    let mut series = Vec::new();
    let burn_in = result.config.burn_in();
    for rec in result.runs.iter().filter(|r| Some(r.seed) == first_seed && r.grid == first_grid) {
        let window = rec.rows.iter().skip(burn_in).take(400);
        series.push(Series { name: rec.scheme.name().to_string(), points: window.clone().map(|r| (r.t_sec, r.trace_p)).collect() });
        if matches!(rec.scheme, Scheme::ProposedComp) {
            series.push(Series { name: "target".to_string(), points: window.map(|r| (r.t_sec, r.trace_p_opt)).collect() });
        }
    }
    let path = out.join("trajectory.svg");
    let title = format!("power on link {}", result.config.experiment.trace_link);
    output::write_file(&path, &line_plot(&title, "t (s)", "power", &series))?;
    written.push(path);
    Ok(written)
}

/// Stability report at the initial channel of the first seed.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub params: StabilityParams,
    pub verdict: StabilityVerdict,
    pub bound: ErrorBound,
    /// Measured e_x + e_y of the compensated controller on the first seed.
    pub measured: Option<f64>,
    pub bound_holds: Option<bool>,
}

pub fn analyze(cfg: &Config) -> Result<AnalysisReport, ExperimentError> {
    let setup = Setup::new(cfg)?;
    let problem = &setup.problem;
    let seed = cfg.experiment.seeds[0];
    let (ch, _, _) = setup.channel(cfg.channel.a_h, seed)?;
    let csi0 = ch.csi(setup.domain);
    let mut cache = setup.outer_cache(cfg);
    let ystar = cache.target(problem, &csi0.hl)?;
    let mut rng = run::stream_rng(seed, 3);
    let ocfg = cfg.oracle_config();
    let states = draw_fading_samples(problem.num_links(), cfg.experiment.analysis_states.max(1), setup.domain, &mut rng)
        .into_iter()
        .map(|hs| {
            let csi = crate::network::Csi::new(hs, csi0.hl.clone());
            Ok(SampleState { point: solve_inner(problem, &ystar, &csi, &ocfg)?, csi })
        })
        .collect::<Result<Vec<_>, OracleError>>()?;
    let opts = EstimateOptions {
        active_tol: cfg.solver.active_set_tol,
        fading_samples: draw_fading_samples(problem.num_links(), 256, setup.domain, &mut rng),
        oracle: ocfg,
        ..EstimateOptions::default()
    };
    let params = estimate_params(problem, &states, &opts)?;
    let (a_h, tau, n_s, gamma) = (cfg.channel.a_h, cfg.tau(), cfg.solver.n_s as f64, cfg.solver.gamma);
    let verdict = stability_condition(&params, a_h, tau, n_s, gamma);
    let bound = error_bound_unchecked(&params, a_h, cfg.channel.epsilon, tau, n_s, gamma);
    let measured = if cfg.experiment.track_errors {
        let rec = run_single(cfg, Scheme::ProposedComp, seed)?;
        Some(rec.summary.e_x + rec.summary.e_y)
    } else {
        None
    };
    let bound_holds = measured.filter(|_| verdict.stable).map(|m| m <= bound.bound);
    Ok(AnalysisReport { params, verdict, bound, measured, bound_holds })
}

/// Targets at the first frame of the first seed.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub seed: u64,
    pub hs: Vec<f64>,
    pub hl: Vec<f64>,
    pub y_star: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub lambda_hat: Vec<f64>,
}

pub fn oracle_report(cfg: &Config) -> Result<OracleReport, ExperimentError> {
    let setup = Setup::new(cfg)?;
    let seed = cfg.experiment.seeds[0];
    let (ch, _, _) = setup.channel(cfg.channel.a_h, seed)?;
    let csi = ch.csi(setup.domain);
    let y_star = setup.outer_cache(cfg).target(&setup.problem, &csi.hl)?;
    let x = solve_inner(&setup.problem, &y_star, &csi, &cfg.oracle_config())?;
    Ok(OracleReport { seed, hs: csi.hs, hl: csi.hl, y_star, p_hat: x.p, lambda_hat: x.lambda })
}
