//! Exogenous channel processes.
//!
//! Small-scale fading follows a complex Ornstein-Uhlenbeck process sampled
//! with its exact Gaussian transition. Large-scale path loss is driven by
//! node positions, which move according to a truncated Lévy walk.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::network::Topology;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("time step must be non-negative, got {0}")]
    NegativeStep(f64),
    #[error("length mismatch: {fading} fading coefficients vs {path_loss} path-loss values")]
    LengthMismatch { fading: usize, path_loss: usize },
    #[error("invalid channel parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
}

/// Draws a circularly symmetric complex Gaussian with unit variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Per-link small-scale fading state.
#[derive(Debug, Clone, PartialEq)]
pub struct OuFading {
    pub h_s: Vec<Complex64>,
    /// Mean-reversion rate of the fading process (1/s).
    pub a_h: f64,
}

impl OuFading {
    pub fn new(h_s: Vec<Complex64>, a_h: f64) -> Result<Self, ChannelError> {
        if !(a_h >= 0.0) || !a_h.is_finite() {
            return Err(ChannelError::InvalidParameter { name: "a_H", value: a_h });
        }
        Ok(Self { h_s, a_h })
    }

    /// Starts every link from the stationary law.
    pub fn stationary<R: Rng + ?Sized>(n: usize, a_h: f64, rng: &mut R) -> Result<Self, ChannelError> {
        let h_s = (0..n).map(|_| complex_gaussian(rng)).collect();
        Self::new(h_s, a_h)
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.h_s.iter().map(|h| h.norm()).collect()
    }
}

/// Advances the fading by `dt` seconds with the exact OU transition.
///
/// One complex draw is consumed per link regardless of `dt` and `a_H`, so
/// runs that differ only in those values share their noise sequence.
pub fn ou_step<R: Rng + ?Sized>(state: &OuFading, dt: f64, rng: &mut R) -> Result<OuFading, ChannelError> {
    if !(dt >= 0.0) {
        return Err(ChannelError::NegativeStep(dt));
    }
    let decay = (-0.5 * state.a_h * dt).exp();
    let spread = (1.0 - (-state.a_h * dt).exp()).max(0.0).sqrt();
    let h_s = state
        .h_s
        .iter()
        .map(|&h| {
            let xi = complex_gaussian(rng);
            if spread == 0.0 {
                h * decay
            } else {
                h * decay + xi * spread
            }
        })
        .collect();
    Ok(OuFading { h_s, a_h: state.a_h })
}

/// Box on |h_s| applied before the fading magnitude reaches the optimizer.
///
/// Rayleigh fading has E[1/|h_s|^2] = inf, which makes the expected power of
/// the relay problem unbounded; restricting magnitudes to a compact domain
/// keeps every expectation finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FadingDomain {
    pub min: f64,
    pub max: f64,
}

impl FadingDomain {
    pub const UNBOUNDED: FadingDomain = FadingDomain { min: 0.0, max: f64::INFINITY };

    pub fn clip(&self, mag: f64) -> f64 {
        mag.clamp(self.min, self.max)
    }

    /// One stationary magnitude draw, clipped to the domain.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.clip(complex_gaussian(rng).norm())
    }

    /// Mean of the clipped Rayleigh magnitude, where |h_s|^2 ~ Exp(1).
    pub fn mean_magnitude(&self) -> f64 {
        // E[clip(R)] = min + int_min^max P(R > t) dt with P(R > t) = exp(-t^2).
        let upper = self.max.min(8.0);
        if upper <= self.min {
            return self.min;
        }
        let n = 4000;
        let h = (upper - self.min) / n as f64;
        let f = |t: f64| (-t * t).exp();
        let mut acc = f(self.min) + f(upper);
        for i in 1..n {
            let t = self.min + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(t);
        }
        self.min + acc * h / 3.0
    }
}

/// Truncated Pareto draw: density proportional to l^(-1-beta) on [lo, hi].
pub fn truncated_pareto<R: Rng + ?Sized>(rng: &mut R, beta: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let u: f64 = rng.random();
    let a = lo.powf(-beta);
    let b = hi.powf(-beta);
    (a - u * (a - b)).powf(-1.0 / beta).clamp(lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevyParams {
    pub v_max: f64,
    pub region_radius: f64,
    pub beta_flight: f64,
    pub beta_pause: f64,
    pub flight_min: f64,
    pub flight_max: f64,
    pub pause_min: f64,
    pub pause_max: f64,
}

impl LevyParams {
    pub fn new(v_max: f64, region_radius: f64) -> Self {
        Self {
            v_max,
            region_radius,
            beta_flight: 1.0,
            beta_pause: 1.0,
            flight_min: 1.0,
            flight_max: region_radius.max(1.0),
            pause_min: 1.0,
            pause_max: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Walking,
    Paused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobileNode {
    /// Centre of the region the node is confined to.
    pub anchor: [f64; 2],
    pub position: [f64; 2],
    pub phase: Phase,
    pub destination: [f64; 2],
    pub speed: f64,
    pub pause_remaining: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeMotion {
    Static([f64; 2]),
    Mobile(MobileNode),
}

impl NodeMotion {
    pub fn position(&self) -> [f64; 2] {
        match self {
            NodeMotion::Static(p) => *p,
            NodeMotion::Mobile(m) => m.position,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobilityState {
    pub nodes: Vec<NodeMotion>,
    pub params: LevyParams,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl MobilityState {
    /// Places nodes at the topology positions; mobile nodes start paused.
    pub fn from_topology<R: Rng + ?Sized>(topo: &Topology, params: LevyParams, rng: &mut R) -> Self {
        let nodes = topo
            .nodes
            .iter()
            .map(|n| {
                if n.mobile {
                    NodeMotion::Mobile(MobileNode {
                        anchor: n.position,
                        position: n.position,
                        phase: Phase::Paused,
                        destination: n.position,
                        speed: 0.0,
                        pause_remaining: truncated_pareto(rng, params.beta_pause, params.pause_min, params.pause_max),
                    })
                } else {
                    NodeMotion::Static(n.position)
                }
            })
            .collect();
        Self { nodes, params }
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.nodes.iter().map(NodeMotion::position).collect()
    }
}

fn new_flight<R: Rng + ?Sized>(node: &mut MobileNode, params: &LevyParams, rng: &mut R) {
    let len = truncated_pareto(rng, params.beta_flight, params.flight_min, params.flight_max);
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let mut dest = [node.position[0] + len * angle.cos(), node.position[1] + len * angle.sin()];
    let off = [dest[0] - node.anchor[0], dest[1] - node.anchor[1]];
    let r = off[0].hypot(off[1]);
    if r > params.region_radius {
        let s = params.region_radius / r;
        dest = [node.anchor[0] + off[0] * s, node.anchor[1] + off[1] * s];
    }
    node.destination = dest;
    // Uniform on (0, v_max].
    node.speed = params.v_max * (1.0 - rng.random::<f64>());
    node.phase = Phase::Walking;
}

fn advance_node<R: Rng + ?Sized>(node: &mut MobileNode, params: &LevyParams, dt: f64, rng: &mut R) {
    let mut left = dt;
    // Each pass either finishes the step or crosses a phase boundary; pauses
    // last at least `pause_min`, so the loop terminates.
    while left > 0.0 {
        match node.phase {
            Phase::Paused => {
                if node.pause_remaining > left {
                    node.pause_remaining -= left;
                    left = 0.0;
                } else {
                    left -= node.pause_remaining;
                    node.pause_remaining = 0.0;
                    if params.v_max > 0.0 {
                        new_flight(node, params, rng);
                    } else {
                        node.pause_remaining = truncated_pareto(rng, params.beta_pause, params.pause_min, params.pause_max);
                    }
                }
            }
            Phase::Walking => {
                let d = dist(node.position, node.destination);
                let reach = node.speed * left;
                if reach < d {
                    let s = reach / d;
                    node.position[0] += (node.destination[0] - node.position[0]) * s;
                    node.position[1] += (node.destination[1] - node.position[1]) * s;
                    left = 0.0;
                } else {
                    left -= d / node.speed;
                    node.position = node.destination;
                    node.phase = Phase::Paused;
                    node.pause_remaining = truncated_pareto(rng, params.beta_pause, params.pause_min, params.pause_max);
                }
            }
        }
    }
}

/// Advances every mobile node by `dt` seconds, sub-stepping across phase changes.
pub fn mobility_step<R: Rng + ?Sized>(state: &MobilityState, dt: f64, rng: &mut R) -> MobilityState {
    let mut next = state.clone();
    if dt <= 0.0 {
        return next;
    }
    for node in next.nodes.iter_mut() {
        if let NodeMotion::Mobile(m) = node {
            advance_node(m, &state.params, dt, rng);
        }
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLossParams {
    pub c0: f64,
    pub iota: f64,
    pub d_min: f64,
}

impl PathLossParams {
    /// Normalizes the antenna gain so that h_l = 1 at the minimum distance.
    pub fn normalized(iota: f64, d_min: f64) -> Self {
        Self { c0: d_min.powf(iota), iota, d_min }
    }

    pub fn gain_at(&self, d: f64) -> f64 {
        self.c0 * d.max(self.d_min).powf(-self.iota)
    }

    /// Bound on |dh_l/dt| for nodes moving at most `v_max` m/s.
    pub fn epsilon(&self, v_max: f64) -> f64 {
        2.0 * self.c0 * self.iota * self.d_min.powf(-self.iota - 1.0) * v_max
    }

    /// Speed limit that yields the given slow-timescale bound.
    pub fn v_max_for_epsilon(&self, epsilon: f64) -> f64 {
        epsilon / (2.0 * self.c0 * self.iota * self.d_min.powf(-self.iota - 1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathLoss {
    pub h_l: Vec<f64>,
    pub params: PathLossParams,
}

pub fn link_distances(mob: &MobilityState, topo: &Topology) -> Vec<f64> {
    topo.links.iter().map(|l| dist(mob.nodes[l.tx].position(), mob.nodes[l.rx].position())).collect()
}

pub fn path_loss_from_positions(mob: &MobilityState, topo: &Topology, params: PathLossParams) -> PathLoss {
    let h_l = link_distances(mob, topo).into_iter().map(|d| params.gain_at(d)).collect();
    PathLoss { h_l, params }
}

/// Per-link composite CSI h = h_l * h_s.
pub fn composite_csi(fading: &OuFading, pl: &PathLoss) -> Result<Vec<Complex64>, ChannelError> {
    if fading.h_s.len() != pl.h_l.len() {
        return Err(ChannelError::LengthMismatch { fading: fading.h_s.len(), path_loss: pl.h_l.len() });
    }
    Ok(fading.h_s.iter().zip(&pl.h_l).map(|(hs, hl)| hs * *hl).collect())
}

/// Joint fading, mobility and path-loss process for one trajectory.
#[derive(Debug, Clone)]
pub struct ChannelProcess {
    pub fading: OuFading,
    pub mobility: MobilityState,
    pub path_loss: PathLoss,
    pub t: f64,
}

impl ChannelProcess {
    pub fn new<R: Rng + ?Sized>(
        topo: &Topology,
        a_h: f64,
        levy: LevyParams,
        pl: PathLossParams,
        fade_rng: &mut R,
        mob_rng: &mut R,
    ) -> Result<Self, ChannelError> {
        let fading = OuFading::stationary(topo.links.len(), a_h, fade_rng)?;
        let mobility = MobilityState::from_topology(topo, levy, mob_rng);
        let path_loss = path_loss_from_positions(&mobility, topo, pl);
        Ok(Self { fading, mobility, path_loss, t: 0.0 })
    }

    pub fn advance<R: Rng + ?Sized>(&mut self, topo: &Topology, dt: f64, fade_rng: &mut R, mob_rng: &mut R) -> Result<(), ChannelError> {
        self.fading = ou_step(&self.fading, dt, fade_rng)?;
        self.mobility = mobility_step(&self.mobility, dt, mob_rng);
        self.path_loss = path_loss_from_positions(&self.mobility, topo, self.path_loss.params);
        self.t += dt;
        Ok(())
    }

    /// Magnitude snapshot with fading clipped to `domain`.
    pub fn csi(&self, domain: FadingDomain) -> crate::network::Csi {
        crate::network::Csi { hs: self.fading.h_s.iter().map(|h| domain.clip(h.norm())).collect(), hl: self.path_loss.h_l.clone() }
    }
}
