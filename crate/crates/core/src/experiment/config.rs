//! Experiment configuration: flat `key = value` text grouped in sections.
//!
//! ```text
//! [channel]
//! a_h = 10
//! [experiment]
//! schemes = proposed_comp, baseline3_nocomp
//! seeds = 1, 2, 3
//! ```
//!
//! `#` starts a comment. Unknown sections and keys are errors, as are
//! repeated keys.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::network::{NetworkError, Topology};
use crate::oracle::OracleConfig;
use crate::solver::{Algorithm, CompensationConfig, ScheduleKind, SolverConfig, StepSchedule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key `{key}` in [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("key `{key}` in [{section}] given twice")]
    Duplicate { section: String, key: String },
    #[error("bad value `{value}` for `{key}` in [{section}]: {reason}")]
    Value { section: String, key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("topology {path}: {source}")]
    Topology { path: PathBuf, source: NetworkError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ProposedComp,
    Baseline1Gcsi,
    Baseline2Stat,
    Baseline3Nocomp,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::ProposedComp, Scheme::Baseline1Gcsi, Scheme::Baseline2Stat, Scheme::Baseline3Nocomp];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::ProposedComp => "proposed_comp",
            Scheme::Baseline1Gcsi => "baseline1_gcsi",
            Scheme::Baseline2Stat => "baseline2_stat",
            Scheme::Baseline3Nocomp => "baseline3_nocomp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TopologySource {
    Relay4,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelSection {
    pub a_h: f64,
    /// Bound on the path-loss drift rate; sets the node speed limit.
    pub epsilon: f64,
    pub snr_db: f64,
    pub path_loss_exponent: f64,
    pub d_min: f64,
    pub region_radius: f64,
    pub fading_min: f64,
    pub fading_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverSection {
    #[serde(skip)]
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub diminishing: bool,
    pub mu0: f64,
    pub mu_decay: f64,
    pub n_s: u64,
    pub tau_ms: f64,
    pub compensation: bool,
    pub tikhonov_delta: f64,
    pub active_set_tol: f64,
    pub min_rcond: f64,
    pub safeguard: bool,
    pub scaling: Option<Vec<f64>>,
    pub power_price: f64,
    pub snr_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSection {
    pub inner_tol: f64,
    pub outer_samples: usize,
    pub outer_tol: f64,
    pub max_iter: usize,
    pub cache_tol: f64,
    pub burn_in_frac: f64,
    pub sample_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSection {
    pub schemes: Vec<Scheme>,
    pub horizon_frames: usize,
    pub burn_in_frames: Option<usize>,
    pub seeds: Vec<u64>,
    pub latency_ms: f64,
    pub t_s_ms: f64,
    pub theta_out: f64,
    pub scenario_samples: usize,
    pub track_errors: bool,
    /// Link (by id) whose power trajectory is plotted.
    pub trace_link: usize,
    pub dump_channel: bool,
    pub analysis_states: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub topology: TopologySource,
    pub channel: ChannelSection,
    pub solver: SolverSection,
    pub oracle: OracleSection,
    pub experiment: ExperimentSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            topology: TopologySource::Relay4,
            channel: ChannelSection {
                a_h: 10.0,
                epsilon: 6e-4,
                snr_db: 11.0,
                path_loss_exponent: 1.8,
                d_min: 75.0,
                region_radius: 20.0,
                fading_min: 0.5,
                fading_max: 3.0,
            },
            solver: SolverSection {
                algorithm: Algorithm::PrimalDual,
                gamma: 0.25,
                diminishing: false,
                mu0: 0.002,
                mu_decay: 1.0,
                n_s: 30,
                tau_ms: 1.0,
                compensation: true,
                tikhonov_delta: 1e-8,
                active_set_tol: 1e-6,
                min_rcond: 1e-3,
                safeguard: true,
                scaling: None,
                power_price: 1.0,
                snr_margin: 1.5,
            },
            oracle: OracleSection {
                inner_tol: 1e-10,
                outer_samples: 4096,
                outer_tol: 1e-9,
                max_iter: 200_000,
                cache_tol: 1e-4,
                burn_in_frac: 0.1,
                sample_seed: 7,
            },
            experiment: ExperimentSection {
                schemes: vec![Scheme::ProposedComp],
                horizon_frames: 3000,
                burn_in_frames: None,
                seeds: (1..=20).collect(),
                latency_ms: 0.0,
                t_s_ms: 100.0,
                theta_out: 0.05,
                scenario_samples: 2048,
                track_errors: true,
                trace_link: 5,
                dump_channel: false,
                analysis_states: 40,
            },
        }
    }
}

fn on_off(v: &str) -> Result<bool, String> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err("expected on/off".into()),
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|_| "not a number".to_string())
}

fn list<T, F: Fn(&str) -> Result<T, String>>(v: &str, f: F) -> Result<Vec<T>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

const KEYS: &[(&str, &[&str])] = &[
    ("topology", &["file"]),
    ("channel", &["a_h", "epsilon", "snr_db", "path_loss_exponent", "d_min", "region_radius", "fading_min", "fading_max"]),
    (
        "solver",
        &[
            "algorithm",
            "gamma",
            "mu_schedule",
            "mu0",
            "mu_decay",
            "n_s",
            "tau_ms",
            "compensation",
            "tikhonov_delta",
            "active_set_tol",
            "min_rcond",
            "safeguard",
            "scaling",
            "power_price",
            "snr_margin",
        ],
    ),
    ("oracle", &["inner_tol", "outer_samples", "outer_tol", "max_iter", "cache_tol", "burn_in_frac", "sample_seed"]),
    (
        "experiment",
        &[
            "schemes",
            "horizon_frames",
            "burn_in_frames",
            "seeds",
            "latency_ms",
            "t_s_ms",
            "theta_out",
            "scenario_samples",
            "track_errors",
            "trace_link",
            "dump_channel",
            "analysis_states",
        ],
    ),
];

impl Config {
    /// Parses configuration text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::Syntax { line: i + 1, message: "unterminated section header".into() })?
                    .trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(ConfigError::UnknownSection(name.to_string()));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, message: "expected key = value".into() })?;
            let sec = section.clone().ok_or_else(|| ConfigError::Syntax { line: i + 1, message: "key outside of a section".into() })?;
            let key = key.trim();
            if !seen.insert((sec.clone(), key.to_string())) {
                return Err(ConfigError::Duplicate { section: sec, key: key.to_string() });
            }
            cfg.set(&sec, key, value.trim(), base)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Section that owns a bare key, when exactly one does. `a_H` is accepted for `a_h`.
    pub fn section_of(key: &str) -> Option<&'static str> {
        let key = if key == "a_H" { "a_h" } else { key };
        let mut owners = KEYS.iter().filter(|(_, ks)| ks.contains(&key));
        match (owners.next(), owners.next()) {
            (Some((s, _)), None) => Some(s),
            _ => None,
        }
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, section: &str, key: &str, value: &str, base: &Path) -> Result<(), ConfigError> {
        let key = if key == "a_H" { "a_h" } else { key };
        let bad =
            |reason: String| ConfigError::Value { section: section.to_string(), key: key.to_string(), value: value.to_string(), reason };
        let known = KEYS.iter().find(|(s, _)| *s == section).ok_or_else(|| ConfigError::UnknownSection(section.to_string()))?;
        if !known.1.contains(&key) {
            return Err(ConfigError::UnknownKey { section: section.to_string(), key: key.to_string() });
        }
        let c = &mut self.channel;
        let s = &mut self.solver;
        let o = &mut self.oracle;
        let e = &mut self.experiment;
        match (section, key) {
            ("topology", "file") => {
                self.topology = if value == "relay4" { TopologySource::Relay4 } else { TopologySource::File(base.join(value)) }
            }
            ("channel", "a_h") => c.a_h = num(value).map_err(bad)?,
            ("channel", "epsilon") => c.epsilon = num(value).map_err(bad)?,
            ("channel", "snr_db") => c.snr_db = num(value).map_err(bad)?,
            ("channel", "path_loss_exponent") => c.path_loss_exponent = num(value).map_err(bad)?,
            ("channel", "d_min") => c.d_min = num(value).map_err(bad)?,
            ("channel", "region_radius") => c.region_radius = num(value).map_err(bad)?,
            ("channel", "fading_min") => c.fading_min = num(value).map_err(bad)?,
            ("channel", "fading_max") => c.fading_max = num(value).map_err(bad)?,
            ("solver", "algorithm") => {
                s.algorithm = match value {
                    "primal_dual" => Algorithm::PrimalDual,
                    "projected_gradient" => Algorithm::ProjectedGradient,
                    _ => return Err(bad("expected primal_dual or projected_gradient".into())),
                }
            }
            ("solver", "gamma") => s.gamma = num(value).map_err(bad)?,
            ("solver", "mu_schedule") => {
                s.diminishing = match value {
                    "constant" => false,
                    "one_over_n" => true,
                    _ => return Err(bad("expected constant or one_over_n".into())),
                }
            }
            ("solver", "mu0") => s.mu0 = num(value).map_err(bad)?,
            ("solver", "mu_decay") => s.mu_decay = num(value).map_err(bad)?,
            ("solver", "n_s") => s.n_s = num(value).map_err(bad)?,
            ("solver", "tau_ms") => s.tau_ms = num(value).map_err(bad)?,
            ("solver", "compensation") => s.compensation = on_off(value).map_err(bad)?,
            ("solver", "tikhonov_delta") => s.tikhonov_delta = num(value).map_err(bad)?,
            ("solver", "active_set_tol") => s.active_set_tol = num(value).map_err(bad)?,
            ("solver", "min_rcond") => s.min_rcond = num(value).map_err(bad)?,
            ("solver", "safeguard") => s.safeguard = on_off(value).map_err(bad)?,
            ("solver", "scaling") => {
                s.scaling = if value == "identity" {
                    None
                } else if let Some(file) = value.strip_prefix("diag:") {
                    let path = base.join(file.trim());
                    let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                    let d = list(&text.split_whitespace().collect::<Vec<_>>().join(","), num::<f64>).map_err(bad)?;
                    Some(d)
                } else {
                    return Err(bad("expected identity or diag:<file>".into()));
                }
            }
            ("solver", "power_price") => s.power_price = num(value).map_err(bad)?,
            ("solver", "snr_margin") => s.snr_margin = num(value).map_err(bad)?,
            ("oracle", "inner_tol") => o.inner_tol = num(value).map_err(bad)?,
            ("oracle", "outer_samples") => o.outer_samples = num(value).map_err(bad)?,
            ("oracle", "outer_tol") => o.outer_tol = num(value).map_err(bad)?,
            ("oracle", "max_iter") => o.max_iter = num(value).map_err(bad)?,
            ("oracle", "cache_tol") => o.cache_tol = num(value).map_err(bad)?,
            ("oracle", "burn_in_frac") => o.burn_in_frac = num(value).map_err(bad)?,
            ("oracle", "sample_seed") => o.sample_seed = num(value).map_err(bad)?,
            ("experiment", "schemes") => {
                e.schemes = list(value, |v| Scheme::parse(v).ok_or_else(|| format!("unknown scheme `{v}`"))).map_err(bad)?
            }
            ("experiment", "horizon_frames") => e.horizon_frames = num(value).map_err(bad)?,
            ("experiment", "burn_in_frames") => e.burn_in_frames = Some(num(value).map_err(bad)?),
            ("experiment", "seeds") => e.seeds = list(value, num::<u64>).map_err(bad)?,
            ("experiment", "latency_ms") => e.latency_ms = num(value).map_err(bad)?,
            ("experiment", "t_s_ms") => e.t_s_ms = num(value).map_err(bad)?,
            ("experiment", "theta_out") => e.theta_out = num(value).map_err(bad)?,
            ("experiment", "scenario_samples") => e.scenario_samples = num(value).map_err(bad)?,
            ("experiment", "track_errors") => e.track_errors = on_off(value).map_err(bad)?,
            ("experiment", "trace_link") => e.trace_link = num(value).map_err(bad)?,
            ("experiment", "dump_channel") => e.dump_channel = on_off(value).map_err(bad)?,
            ("experiment", "analysis_states") => e.analysis_states = num(value).map_err(bad)?,
            _ => unreachable!("key table and setter disagree on {section}.{key}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let c = &self.channel;
        let s = &self.solver;
        let e = &self.experiment;
        if !(c.a_h >= 0.0) || !(c.epsilon >= 0.0) {
            return fail("a_h and epsilon must be non-negative");
        }
        if !(c.d_min > 0.0) || !(c.path_loss_exponent > 0.0) || !(c.region_radius >= 0.0) {
            return fail("d_min and path_loss_exponent must be positive, region_radius non-negative");
        }
        if !(c.fading_min >= 0.0 && c.fading_min < c.fading_max) {
            return fail("need 0 <= fading_min < fading_max");
        }
        if !(s.gamma > 0.0) || !(s.mu0 >= 0.0) || !(s.mu_decay > 0.0) || s.n_s == 0 || !(s.tau_ms > 0.0) {
            return fail("need gamma > 0, mu0 >= 0, mu_decay > 0, n_s >= 1 and tau_ms > 0");
        }
        if !(s.tikhonov_delta >= 0.0) || !(s.snr_margin >= 1.0) || !(s.power_price > 0.0) {
            return fail("need tikhonov_delta >= 0, snr_margin >= 1 and power_price > 0");
        }
        if !(self.oracle.inner_tol > 0.0) || !(self.oracle.outer_tol > 0.0) || self.oracle.outer_samples == 0 {
            return fail("oracle tolerances must be positive and outer_samples >= 1");
        }
        if !(0.0..1.0).contains(&self.oracle.burn_in_frac) {
            return fail("burn_in_frac must lie in [0, 1)");
        }
        if e.seeds.is_empty() || e.schemes.is_empty() {
            return fail("seeds and schemes must be nonempty");
        }
        if e.horizon_frames <= self.burn_in() {
            return fail("horizon_frames must exceed the burn-in");
        }
        if !(0.0..=1.0).contains(&e.theta_out) || e.scenario_samples == 0 {
            return fail("theta_out must lie in [0, 1] and scenario_samples >= 1");
        }
        if !(e.latency_ms >= 0.0) || !(e.t_s_ms > 0.0) {
            return fail("latency_ms must be >= 0 and t_s_ms > 0");
        }
        let ratio = e.t_s_ms / s.tau_ms;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return fail("t_s_ms must be a multiple of tau_ms");
        }
        Ok(())
    }

    pub fn burn_in(&self) -> usize {
        self.experiment.burn_in_frames.unwrap_or((self.experiment.horizon_frames as f64 * self.oracle.burn_in_frac).floor() as usize)
    }

    pub fn tau(&self) -> f64 {
        self.solver.tau_ms * 1e-3
    }

    pub fn latency_frames(&self) -> usize {
        (self.experiment.latency_ms / self.solver.tau_ms).round() as usize
    }

    pub fn hold_frames(&self) -> usize {
        ((self.experiment.t_s_ms / self.solver.tau_ms).round() as usize).max(1)
    }

    pub fn load_topology(&self) -> Result<Topology, ConfigError> {
        match &self.topology {
            TopologySource::Relay4 => Ok(Topology::relay4()),
            TopologySource::File(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                Topology::from_json(&text).map_err(|source| ConfigError::Topology { path: path.clone(), source })
            }
        }
    }

    pub fn oracle_config(&self) -> OracleConfig {
        let o = &self.oracle;
        OracleConfig {
            inner_tol: o.inner_tol,
            outer_samples: o.outer_samples,
            outer_tol: o.outer_tol,
            max_iter: o.max_iter,
            cache_tol: o.cache_tol,
            burn_in_frac: o.burn_in_frac,
        }
    }

    /// Solver settings; `compensation` overrides the configured switch.
    pub fn solver_config(&self, compensation: bool) -> SolverConfig {
        let s = &self.solver;
        SolverConfig {
            algorithm: s.algorithm,
            schedule: StepSchedule {
                kind: if s.diminishing { ScheduleKind::Diminishing } else { ScheduleKind::Constant },
                gamma: s.gamma,
                mu0: s.mu0,
                decay: s.mu_decay,
            },
            n_s: s.n_s,
            tau: self.tau(),
            comp: CompensationConfig {
                enabled: compensation,
                tikhonov_delta: s.tikhonov_delta,
                active_set_tol: s.active_set_tol,
                min_rcond: s.min_rcond,
                safeguard: s.safeguard,
            },
            scaling: s.scaling.clone(),
            outer_delay_frames: self.latency_frames(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_lists() {
        let text = "[channel]\na_h = 50 # fast\n[experiment]\nschemes = proposed_comp, baseline2_stat\nseeds = 3,4\nhorizon_frames = 100\n";
        let c = Config::parse(text, Path::new(".")).unwrap();
        assert_eq!(c.channel.a_h, 50.0);
        assert_eq!(c.experiment.schemes, vec![Scheme::ProposedComp, Scheme::Baseline2Stat]);
        assert_eq!(c.experiment.seeds, vec![3, 4]);
        assert_eq!(c.burn_in(), 10);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::parse("[solver]\ngama = 0.1\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("gama"), "{err}");
        assert!(matches!(Config::parse("[nope]\n", Path::new(".")), Err(ConfigError::UnknownSection(_))));
        assert!(matches!(Config::parse("[solver]\ngamma = 1\ngamma = 2\n", Path::new(".")), Err(ConfigError::Duplicate { .. })));
    }

    #[test]
    fn horizon_must_exceed_burn_in() {
        let err = Config::parse("[experiment]\nhorizon_frames = 10\nburn_in_frames = 10\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn bare_key_lookup() {
        assert_eq!(Config::section_of("a_H"), Some("channel"));
        assert_eq!(Config::section_of("gamma"), Some("solver"));
        assert_eq!(Config::section_of("bogus"), None);
    }
}
