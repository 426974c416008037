//! One scheme over one channel trajectory.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::baselines::{baseline1_step, baseline2_step, ChanceDecision};
use super::config::{Config, Scheme};
use super::metrics::{metrics_fold, FrameRow, MetricsSummary};
use super::ExperimentError;
use crate::channel::{ChannelProcess, FadingDomain, LevyParams, PathLossParams};
use crate::network::{Csi, PrimalDualPoint, RelayProblem};
use crate::oracle::{draw_fading_samples, solve_inner, OracleConfig, OuterCache};
use crate::solver::TwoTimescale;

const STREAM_FADING: u64 = 0;
const STREAM_MOBILITY: u64 = 1;
const STREAM_SCHEME: u64 = 2;

/// Independent random stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Problem instance, channel and fading domain built from a config.
pub struct Setup {
    pub problem: RelayProblem,
    pub domain: FadingDomain,
    pub path_loss: PathLossParams,
    pub levy: LevyParams,
}

impl Setup {
    pub fn new(cfg: &Config) -> Result<Self, ExperimentError> {
        let topo = cfg.load_topology()?;
        let c = &cfg.channel;
        let problem = RelayProblem::new(topo, cfg.solver.power_price).with_snr(10f64.powf(c.snr_db / 10.0), cfg.solver.snr_margin);
        let path_loss = PathLossParams::normalized(c.path_loss_exponent, c.d_min);
        let levy = LevyParams::new(path_loss.v_max_for_epsilon(c.epsilon), c.region_radius);
        Ok(Self { problem, domain: FadingDomain { min: c.fading_min, max: c.fading_max }, path_loss, levy })
    }

    /// Channel trajectory of `seed`, identical for every scheme.
    pub fn channel(&self, a_h: f64, seed: u64) -> Result<(ChannelProcess, ChaCha8Rng, ChaCha8Rng), ExperimentError> {
        let mut fr = stream_rng(seed, STREAM_FADING);
        let mut mr = stream_rng(seed, STREAM_MOBILITY);
        let ch = ChannelProcess::new(&self.problem.topo, a_h, self.levy, self.path_loss, &mut fr, &mut mr)?;
        Ok((ch, fr, mr))
    }

    /// Sample-average cache for the outer target, shared by all seeds.
    pub fn outer_cache(&self, cfg: &Config) -> OuterCache {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.oracle.sample_seed);
        let samples = draw_fading_samples(self.problem.num_links(), cfg.oracle.outer_samples, self.domain, &mut rng);
        OuterCache::new(samples, cfg.oracle_config())
    }
}

/// Per-frame fading and path loss, when a channel dump is requested.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelRow {
    pub frame: usize,
    pub hs: Vec<f64>,
    pub hl: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub scheme: Scheme,
    /// Grid label and value this run belongs to.
    pub grid: Option<(String, f64)>,
    pub seed: u64,
    #[serde(skip)]
    pub rows: Vec<FrameRow>,
    #[serde(skip)]
    pub channel: Vec<ChannelRow>,
    pub summary: MetricsSummary,
    pub compensation_skips: usize,
    pub fallbacks: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Decision state carried between frames.
enum State {
    TwoTimescale(Box<TwoTimescale>),
    GlobalCsi { history: VecDeque<Csi>, last: Option<PrimalDualPoint> },
    Statistical { hold: Option<ChanceDecision>, rng: ChaCha8Rng },
}

/// Runs `scheme` over the trajectory of `seed` and folds its metrics.
pub fn run_single(cfg: &Config, scheme: Scheme, seed: u64) -> Result<RunRecord, ExperimentError> {
    let setup = Setup::new(cfg)?;
    let problem = &setup.problem;
    let trace = problem.topo.link_position(cfg.experiment.trace_link).ok_or_else(|| {
        ExperimentError::Config(super::ConfigError::Invalid(format!("trace_link {} is not a link", cfg.experiment.trace_link)))
    })?;
    let ocfg: OracleConfig = cfg.oracle_config();
    let mut cache = setup.outer_cache(cfg);
    let (mut ch, mut fr, mut mr) = setup.channel(cfg.channel.a_h, seed)?;
    let tau = cfg.tau();
    let latency = cfg.latency_frames();
    let hold_frames = cfg.hold_frames();
    let track = cfg.experiment.track_errors;

    let csi0 = ch.csi(setup.domain);
    let mut state = match scheme {
        Scheme::ProposedComp | Scheme::Baseline3Nocomp => {
            let y0 = cache.target(problem, &csi0.hl)?;
            let x0 = solve_inner(problem, &y0, &csi0, &ocfg)?;
            let scfg = cfg.solver_config(scheme == Scheme::ProposedComp && cfg.solver.compensation);
            State::TwoTimescale(Box::new(TwoTimescale::new(scfg, x0)))
        }
        Scheme::Baseline1Gcsi => State::GlobalCsi { history: VecDeque::new(), last: None },
        Scheme::Baseline2Stat => State::Statistical { hold: None, rng: stream_rng(seed, STREAM_SCHEME) },
    };

    let mut rows = Vec::with_capacity(cfg.experiment.horizon_frames);
    let mut dump = Vec::new();
    let mut skips = 0;
    let mut fallbacks = 0;
    for frame in 0..cfg.experiment.horizon_frames {
        let csi = ch.csi(setup.domain);
        // Applied decision and, when the scheme has them, its multipliers.
        let (r, p, lambda): (Vec<f64>, Vec<f64>, Option<Vec<f64>>) = match &mut state {
            State::TwoTimescale(ts) => {
                let rec = ts.run_frame(problem, &csi)?;
                skips += usize::from(rec.compensation_skipped);
                let b = rec.boundary;
                (b.r, b.p, Some(b.lambda))
            }
            State::GlobalCsi { history, last } => {
                history.push_back(csi.clone());
                while history.len() > latency + 1 {
                    history.pop_front();
                }
                let delayed = history.front().expect("history holds the current frame");
                let (pt, fell_back) = baseline1_step(problem, delayed, &ocfg, last.as_ref().map(|p| p.r.as_slice()))?;
                fallbacks += usize::from(fell_back);
                *last = Some(pt.clone());
                (pt.r, pt.p, Some(pt.lambda))
            }
            State::Statistical { hold, rng } => {
                if frame % hold_frames == 0 {
                    let samples = draw_fading_samples(problem.num_links(), cfg.experiment.scenario_samples, setup.domain, rng);
                    let (d, fell_back) = baseline2_step(problem, &csi.hl, &samples, cfg.experiment.theta_out, hold.as_ref())?;
                    fallbacks += usize::from(fell_back);
                    *hold = Some(d);
                }
                let d = hold.as_ref().expect("decision made on the first frame");
                (d.r.clone(), d.p.clone(), None)
            }
        };
        let mut row = FrameRow::evaluate(frame, ch.t, &r, &p, &csi, problem);
        row.trace_p = p[trace];
        if track {
            let xhat = solve_inner(problem, &r, &csi, &ocfg)?;
            row.trace_p_opt = xhat.p[trace];
            if let Some(lambda) = &lambda {
                let x: Vec<f64> = p.iter().chain(lambda).copied().collect();
                row.e_x_inst = sq_dist(&x, &xhat.x());
            }
            row.e_y_inst = sq_dist(&r, &cache.target(problem, &csi.hl)?);
        }
        rows.push(row);
        if cfg.experiment.dump_channel {
            dump.push(ChannelRow { frame, hs: csi.hs.clone(), hl: csi.hl.clone() });
        }
        ch.advance(&problem.topo, tau, &mut fr, &mut mr)?;
    }
    let summary = metrics_fold(&rows, cfg.burn_in());
    Ok(RunRecord { scheme, grid: None, seed, rows, channel: dump, summary, compensation_skips: skips, fallbacks })
}
