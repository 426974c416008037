//! Relay network utility problem: topology, routing, multi-access capacity
//! constraints, the Lagrangian and its derivatives.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest inbound degree accepted; constraints are enumerated over all subsets.
pub const MAX_INBOUND_LINKS: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("rate {value} of flow {flow} is outside the log domain")]
    LogDomain { flow: usize, value: f64 },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Bs,
    Relay,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub role: NodeRole,
    pub position: [f64; 2],
    #[serde(default)]
    pub mobile: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: usize,
    pub tx: usize,
    pub rx: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub id: usize,
    pub source: usize,
    /// Ordered link ids from the source to the base station.
    pub path: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TopologyFile {
    nodes: Vec<Node>,
    links: Vec<Link>,
    flows: Vec<Flow>,
}

/// Directed relay graph with its routing tables.
///
/// Nodes are indexed by id (ids must be 0..n). Links and flows are stored in
/// file order and addressed by position; `Link::id` and `Flow::id` keep the
/// external labels. Paths are stored as link positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
    pub flows: Vec<Flow>,
    /// Receiver node -> inbound link positions.
    pub l_plus: BTreeMap<usize, Vec<usize>>,
    /// Transmitter node -> outbound link positions.
    pub l_minus: BTreeMap<usize, Vec<usize>>,
    /// Link position -> flow positions routed over it.
    pub routes: Vec<Vec<usize>>,
}

impl Topology {
    pub fn new(mut nodes: Vec<Node>, links: Vec<Link>, flows: Vec<Flow>) -> Result<Self, NetworkError> {
        let bad = |m: String| NetworkError::Topology(m);
        nodes.sort_by_key(|n| n.id);
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(bad(format!("node ids must be 0..{}, found {}", nodes.len(), n.id)));
            }
        }
        if nodes.iter().filter(|n| n.role == NodeRole::Bs).count() != 1 || nodes.first().map(|n| n.role) != Some(NodeRole::Bs) {
            return Err(bad("node 0 must be the only base station".into()));
        }
        let mut link_pos = BTreeMap::new();
        for (k, l) in links.iter().enumerate() {
            if l.tx >= nodes.len() || l.rx >= nodes.len() || l.tx == l.rx {
                return Err(bad(format!("link {} has invalid endpoints", l.id)));
            }
            if link_pos.insert(l.id, k).is_some() {
                return Err(bad(format!("duplicate link id {}", l.id)));
            }
        }
        let mut flows_out = Vec::with_capacity(flows.len());
        let mut routes = vec![Vec::new(); links.len()];
        for (j, f) in flows.iter().enumerate() {
            if f.path.is_empty() {
                return Err(bad(format!("flow {} has an empty path", f.id)));
            }
            let mut path = Vec::with_capacity(f.path.len());
            let mut at = f.source;
            for id in &f.path {
                let k = *link_pos.get(id).ok_or_else(|| bad(format!("flow {} uses unknown link {}", f.id, id)))?;
                if links[k].tx != at {
                    return Err(bad(format!("flow {} path is not connected at link {}", f.id, id)));
                }
                at = links[k].rx;
                if routes[k].contains(&j) {
                    return Err(bad(format!("flow {} visits link {} twice", f.id, id)));
                }
                routes[k].push(j);
                path.push(k);
            }
            if at != 0 {
                return Err(bad(format!("flow {} does not terminate at the base station", f.id)));
            }
            flows_out.push(Flow { id: f.id, source: f.source, path });
        }
        let mut l_plus: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut l_minus: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (k, l) in links.iter().enumerate() {
            l_plus.entry(l.rx).or_default().push(k);
            l_minus.entry(l.tx).or_default().push(k);
        }
        if let Some((m, ls)) = l_plus.iter().find(|(_, ls)| ls.len() > MAX_INBOUND_LINKS) {
            return Err(bad(format!("node {} has {} inbound links (limit {})", m, ls.len(), MAX_INBOUND_LINKS)));
        }
        Ok(Self { nodes, links, flows: flows_out, l_plus, l_minus, routes })
    }

    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let f: TopologyFile = serde_json::from_str(text).map_err(|e| NetworkError::Topology(e.to_string()))?;
        Self::new(f.nodes, f.links, f.flows)
    }

    pub fn to_json(&self) -> String {
        let f = TopologyFile {
            nodes: self.nodes.clone(),
            links: self.links.clone(),
            flows: self
                .flows
                .iter()
                .map(|fl| Flow { id: fl.id, source: fl.source, path: fl.path.iter().map(|&k| self.links[k].id).collect() })
                .collect(),
        };
        serde_json::to_string_pretty(&f).expect("topology serializes")
    }

    /// Macro BS, two relays and four users; links 1..6 and flows 1..4.
    pub fn relay4() -> Self {
        let node = |id, role, x: f64, y: f64, mobile| Node { id, role, position: [x, y], mobile };
        let nodes = vec![
            node(0, NodeRole::Bs, 0.0, 0.0, false),
            node(1, NodeRole::User, -20.0, 110.0, true),
            node(2, NodeRole::User, 110.0, 115.0, true),
            node(3, NodeRole::User, 320.0, 60.0, true),
            node(4, NodeRole::User, 300.0, -80.0, true),
            node(5, NodeRole::Relay, 220.0, 0.0, false),
            node(6, NodeRole::Relay, 110.0, 0.0, false),
        ];
        let link = |id, tx, rx| Link { id, tx, rx };
        let links = vec![link(1, 1, 0), link(2, 2, 6), link(3, 3, 5), link(4, 4, 5), link(5, 5, 6), link(6, 6, 0)];
        let flow = |id, source, path: Vec<usize>| Flow { id, source, path };
        let flows = vec![flow(1, 1, vec![1]), flow(2, 2, vec![2, 6]), flow(3, 3, vec![3, 5, 6]), flow(4, 4, vec![4, 5, 6])];
        Self::new(nodes, links, flows).expect("built-in topology is valid")
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn num_flows(&self) -> usize {
        self.flows.len()
    }

    pub fn link_position(&self, id: usize) -> Option<usize> {
        self.links.iter().position(|l| l.id == id)
    }

    pub fn relays(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.role == NodeRole::Relay).map(|n| n.id).collect()
    }
}

/// One capacity constraint: the links in `links` share receiver `receiver`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub receiver: usize,
    pub links: Vec<usize>,
    /// Bit mask of `links` within the receiver's inbound list.
    pub mask: u32,
    /// Per flow: how many links of the subset carry it.
    pub flow_counts: Vec<f64>,
}

/// Magnitude snapshot of the channel: fading |h_s| and path loss h_l per link.
#[derive(Debug, Clone, PartialEq)]
pub struct Csi {
    pub hs: Vec<f64>,
    pub hl: Vec<f64>,
}

impl Csi {
    pub fn new(hs: Vec<f64>, hl: Vec<f64>) -> Self {
        Self { hs, hl }
    }
}

/// Power allocation, multipliers and flow rates.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualPoint {
    pub p: Vec<f64>,
    pub lambda: Vec<f64>,
    pub r: Vec<f64>,
}

impl PrimalDualPoint {
    /// Stacked short-term variable (p, lambda).
    pub fn x(&self) -> Vec<f64> {
        self.p.iter().chain(&self.lambda).copied().collect()
    }

    pub fn set_x(&mut self, x: &[f64]) {
        let n = self.p.len();
        self.p.copy_from_slice(&x[..n]);
        self.lambda.copy_from_slice(&x[n..]);
    }
}

/// Proportional-fair power and rate control instance.
#[derive(Debug, Clone, PartialEq)]
pub struct RelayProblem {
    pub topo: Topology,
    /// Power price.
    pub v: f64,
    /// Linear SNR scaling applied to |h|^2.
    pub snr_gain: f64,
    /// SNR margin (>= 1) the controller plans with; capacity checks use the true SNR.
    pub snr_margin: f64,
    pub constraints: Vec<Constraint>,
    /// Receiver -> (mask -> constraint index).
    pub constraint_index: BTreeMap<usize, BTreeMap<u32, usize>>,
}

impl RelayProblem {
    pub fn new(topo: Topology, v: f64) -> Self {
        let mut constraints = Vec::new();
        let mut constraint_index: BTreeMap<usize, BTreeMap<u32, usize>> = BTreeMap::new();
        for (&m, inbound) in &topo.l_plus {
            for mask in 1u32..(1u32 << inbound.len()) {
                let links: Vec<usize> = inbound.iter().enumerate().filter(|(b, _)| mask & (1 << b) != 0).map(|(_, &k)| k).collect();
                let mut flow_counts = vec![0.0; topo.num_flows()];
                for &k in &links {
                    for &j in &topo.routes[k] {
                        flow_counts[j] += 1.0;
                    }
                }
                constraint_index.entry(m).or_default().insert(mask, constraints.len());
                constraints.push(Constraint { receiver: m, links, mask, flow_counts });
            }
        }
        Self { topo, v, snr_gain: 1.0, snr_margin: 1.0, constraints, constraint_index }
    }

    pub fn with_snr(mut self, snr_gain: f64, snr_margin: f64) -> Self {
        self.snr_gain = snr_gain;
        self.snr_margin = snr_margin;
        self
    }

    pub fn num_links(&self) -> usize {
        self.topo.num_links()
    }

    pub fn num_flows(&self) -> usize {
        self.topo.num_flows()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    /// Dimension of the short-term variable (p, lambda).
    pub fn dim_x(&self) -> usize {
        self.num_links() + self.num_constraints()
    }

    /// Effective gains |h_k|^2 the controller plans with.
    pub fn gains(&self, csi: &Csi) -> Vec<f64> {
        let s = self.snr_gain / self.snr_margin;
        csi.hs.iter().zip(&csi.hl).map(|(hs, hl)| s * hl * hl * hs * hs).collect()
    }

    /// Gains without the planning margin, used to decide outage.
    pub fn true_gains(&self, csi: &Csi) -> Vec<f64> {
        csi.hs.iter().zip(&csi.hl).map(|(hs, hl)| self.snr_gain * hl * hl * hs * hs).collect()
    }

    /// d(gain_k)/d|h_s,k|.
    pub fn gain_ds(&self, csi: &Csi) -> Vec<f64> {
        let s = self.snr_gain / self.snr_margin;
        csi.hs.iter().zip(&csi.hl).map(|(hs, hl)| 2.0 * s * hl * hl * hs).collect()
    }

    /// d(gain_k)/d h_l,k.
    pub fn gain_dl(&self, csi: &Csi) -> Vec<f64> {
        let s = self.snr_gain / self.snr_margin;
        csi.hs.iter().zip(&csi.hl).map(|(hs, hl)| 2.0 * s * hl * hs * hs).collect()
    }
}

pub fn link_rates(r: &[f64], topo: &Topology) -> Vec<f64> {
    topo.routes.iter().map(|fl| fl.iter().map(|&j| r[j]).sum()).collect()
}

fn subset_sum(links: &[usize], v: &[f64]) -> f64 {
    links.iter().map(|&k| v[k]).sum()
}

/// 1 + sum_{k in S} g_k p_k for every constraint.
fn denominators(p: &[f64], g: &[f64], problem: &RelayProblem) -> Vec<f64> {
    problem.constraints.iter().map(|c| 1.0 + c.links.iter().map(|&k| g[k] * p[k]).sum::<f64>()).collect()
}

/// Residuals sum_{k in S} c_k - log(1 + sum_{k in S} g_k p_k) for explicit gains.
pub fn residuals_with_gains(r: &[f64], p: &[f64], g: &[f64], problem: &RelayProblem) -> Vec<f64> {
    let c = link_rates(r, &problem.topo);
    problem.constraints.iter().zip(denominators(p, g, problem)).map(|(con, d)| subset_sum(&con.links, &c) - d.ln()).collect()
}

/// Capacity residuals as seen by the controller (planning margin included).
pub fn mac_residuals(r: &[f64], p: &[f64], csi: &Csi, problem: &RelayProblem) -> Vec<f64> {
    residuals_with_gains(r, p, &problem.gains(csi), problem)
}

/// Capacity residuals at the true SNR.
pub fn capacity_residuals(r: &[f64], p: &[f64], csi: &Csi, problem: &RelayProblem) -> Vec<f64> {
    residuals_with_gains(r, p, &problem.true_gains(csi), problem)
}

/// Inflow minus outflow at every relay, as (node id, residual).
pub fn flow_balance_residual(r: &[f64], topo: &Topology) -> Vec<(usize, f64)> {
    let c = link_rates(r, topo);
    topo.relays()
        .into_iter()
        .map(|m| {
            let inflow = topo.l_plus.get(&m).map_or(0.0, |ls| subset_sum(ls, &c));
            let outflow = topo.l_minus.get(&m).map_or(0.0, |ls| subset_sum(ls, &c));
            (m, inflow - outflow)
        })
        .collect()
}

fn check_rates(r: &[f64]) -> Result<(), NetworkError> {
    match r.iter().position(|&v| !(v > 0.0)) {
        Some(j) => Err(NetworkError::LogDomain { flow: j, value: r[j] }),
        None => Ok(()),
    }
}

/// sum_j log r_j - V sum_k p_k.
pub fn objective(p: &[f64], r: &[f64], problem: &RelayProblem) -> Result<f64, NetworkError> {
    check_rates(r)?;
    Ok(r.iter().map(|v| v.ln()).sum::<f64>() - problem.v * p.iter().sum::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianGrads {
    pub value: f64,
    pub dp: Vec<f64>,
    pub dlambda: Vec<f64>,
    pub dr: Vec<f64>,
}

fn check_point(point: &PrimalDualPoint, csi: &Csi, problem: &RelayProblem) -> Result<(), NetworkError> {
    let dims = [
        ("p", problem.num_links(), point.p.len()),
        ("lambda", problem.num_constraints(), point.lambda.len()),
        ("r", problem.num_flows(), point.r.len()),
        ("hs", problem.num_links(), csi.hs.len()),
        ("hl", problem.num_links(), csi.hl.len()),
    ];
    for (what, expected, got) in dims {
        if expected != got {
            return Err(NetworkError::Dimension { what, expected, got });
        }
    }
    check_rates(&point.r)
}

/// Lagrangian value and gradients with respect to p, lambda and r.
pub fn lagrangian_and_grads(point: &PrimalDualPoint, csi: &Csi, problem: &RelayProblem) -> Result<LagrangianGrads, NetworkError> {
    check_point(point, csi, problem)?;
    let g = problem.gains(csi);
    let d = denominators(&point.p, &g, problem);
    let c = link_rates(&point.r, &problem.topo);
    let mut value = objective(&point.p, &point.r, problem)?;
    let mut dp = vec![-problem.v; problem.num_links()];
    let mut dlambda = Vec::with_capacity(problem.num_constraints());
    let mut dr: Vec<f64> = point.r.iter().map(|v| 1.0 / v).collect();
    for (i, con) in problem.constraints.iter().enumerate() {
        let lam = point.lambda[i];
        let w = d[i].ln() - subset_sum(&con.links, &c);
        value += lam * w;
        dlambda.push(w);
        for &k in &con.links {
            dp[k] += lam * g[k] / d[i];
        }
        for (j, n) in con.flow_counts.iter().enumerate() {
            dr[j] -= lam * n;
        }
    }
    Ok(LagrangianGrads { value, dp, dlambda, dr })
}

/// Iteration map of the primal-dual scheme: (dL/dp, constraint residuals).
///
/// Ascent in p and in lambda along the violation, so stationary points of
/// x -> proj(x + step * G) are the KKT points of the inner problem.
pub fn primal_dual_map(point: &PrimalDualPoint, csi: &Csi, problem: &RelayProblem) -> Result<Vec<f64>, NetworkError> {
    let gr = lagrangian_and_grads(point, csi, problem)?;
    Ok(gr.dp.into_iter().chain(gr.dlambda.into_iter().map(|w| -w)).collect())
}

/// Outer-variable estimator K = dL/dr at the current short-term iterate.
pub fn rate_gradient(point: &PrimalDualPoint, problem: &RelayProblem) -> Vec<f64> {
    let mut dr: Vec<f64> = point.r.iter().map(|v| 1.0 / v).collect();
    for (i, con) in problem.constraints.iter().enumerate() {
        for (j, n) in con.flow_counts.iter().enumerate() {
            dr[j] -= point.lambda[i] * n;
        }
    }
    dr
}

/// Jacobian blocks of the KKT map (dL/dp, {lambda_i w_i}) and of dL/dr.
///
/// Rows and columns over x are ordered (p, lambda). CSI derivatives are with
/// respect to |h_s| and h_l per link.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondDerivatives {
    /// d^2L/dp dp.
    pub hess_pp: DMatrix<f64>,
    /// d^2L/dp dlambda (links x constraints).
    pub hess_plambda: DMatrix<f64>,
    /// Jacobian of the KKT map with respect to x.
    pub g_x: DMatrix<f64>,
    /// Jacobian of the KKT map with respect to |h_s|.
    pub g_hs: DMatrix<f64>,
    /// Jacobian of the KKT map with respect to h_l.
    pub g_hl: DMatrix<f64>,
    /// Jacobian of the KKT map with respect to r.
    pub g_y: DMatrix<f64>,
    /// d^2L/dr dr at fixed x.
    pub t_y: DMatrix<f64>,
    /// d^2L/dr dh_l at fixed x.
    pub t_hl: DMatrix<f64>,
    /// d(dL/dr)/dx.
    pub k_x: DMatrix<f64>,
    /// Constraint slacks w_i = log(1 + sum g p) - sum c.
    pub slack: Vec<f64>,
}

pub fn second_derivatives(point: &PrimalDualPoint, csi: &Csi, problem: &RelayProblem) -> Result<SecondDerivatives, NetworkError> {
    check_point(point, csi, problem)?;
    let nl = problem.num_links();
    let nw = problem.num_constraints();
    let nf = problem.num_flows();
    let nx = nl + nw;
    let g = problem.gains(csi);
    let gs = problem.gain_ds(csi);
    let gl = problem.gain_dl(csi);
    let d = denominators(&point.p, &g, problem);
    let c = link_rates(&point.r, &problem.topo);
    let p = &point.p;

    let mut hess_pp = DMatrix::zeros(nl, nl);
    let mut hess_plambda = DMatrix::zeros(nl, nw);
    // d(KKT map)/d(gain), chained to |h_s| and h_l afterwards.
    let mut g_gain = DMatrix::zeros(nx, nl);
    let mut g_y = DMatrix::zeros(nx, nf);
    let mut k_x = DMatrix::zeros(nf, nx);
    let mut slack = Vec::with_capacity(nw);
    for (i, con) in problem.constraints.iter().enumerate() {
        let lam = point.lambda[i];
        let di = d[i];
        slack.push(di.ln() - subset_sum(&con.links, &c));
        for &k in &con.links {
            hess_plambda[(k, i)] = g[k] / di;
            for &l in &con.links {
                hess_pp[(k, l)] -= lam * g[k] * g[l] / (di * di);
            }
            for &m in &con.links {
                let delta = if k == m { 1.0 / di } else { 0.0 };
                g_gain[(k, m)] += lam * (delta - g[k] * p[m] / (di * di));
            }
            g_gain[(nl + i, k)] = lam * p[k] / di;
        }
        for j in 0..nf {
            g_y[(nl + i, j)] = -lam * con.flow_counts[j];
            k_x[(j, nl + i)] = -con.flow_counts[j];
        }
    }
    let mut g_x = DMatrix::zeros(nx, nx);
    g_x.view_mut((0, 0), (nl, nl)).copy_from(&hess_pp);
    g_x.view_mut((0, nl), (nl, nw)).copy_from(&hess_plambda);
    for i in 0..nw {
        for k in 0..nl {
            g_x[(nl + i, k)] = point.lambda[i] * hess_plambda[(k, i)];
        }
        g_x[(nl + i, nl + i)] = slack[i];
    }
    let mut g_hs = g_gain.clone();
    let mut g_hl = g_gain;
    for m in 0..nl {
        g_hs.column_mut(m).scale_mut(gs[m]);
        g_hl.column_mut(m).scale_mut(gl[m]);
    }
    let t_y = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(nf, point.r.iter().map(|v| -1.0 / (v * v))));
    let t_hl = DMatrix::zeros(nf, nl);
    Ok(SecondDerivatives { hess_pp, hess_plambda, g_x, g_hs, g_hl, g_y, t_y, t_hl, k_x, slack })
}

/// Jacobians of the primal-dual iteration map with respect to x and r.
pub fn primal_dual_jacobians(sd: &SecondDerivatives) -> (DMatrix<f64>, DMatrix<f64>) {
    let nl = sd.hess_pp.nrows();
    let nw = sd.hess_plambda.ncols();
    let nf = sd.k_x.nrows();
    let mut jx = DMatrix::zeros(nl + nw, nl + nw);
    jx.view_mut((0, 0), (nl, nl)).copy_from(&sd.hess_pp);
    jx.view_mut((0, nl), (nl, nw)).copy_from(&sd.hess_plambda);
    jx.view_mut((nl, 0), (nw, nl)).copy_from(&(-sd.hess_plambda.transpose()));
    let mut jy = DMatrix::zeros(nl + nw, nf);
    // Residual rows increase with rates: d(sum c)/dr_j equals the flow count.
    for i in 0..nw {
        for j in 0..nf {
            jy[(nl + i, j)] = -sd.k_x[(j, nl + i)];
        }
    }
    (jx, jy)
}
