//! Per-frame metric rows and their folds.

use serde::Serialize;

use crate::network::{capacity_residuals, Csi, RelayProblem};

/// One frame of a run, evaluated at the true current channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameRow {
    pub frame: usize,
    pub t_sec: f64,
    pub feasible: bool,
    pub sum_rate: f64,
    pub utility: f64,
    pub power_sum: f64,
    /// NaN when the scheme carries no multipliers or tracking is off.
    pub e_x_inst: f64,
    pub e_y_inst: f64,
    pub trace_p: f64,
    pub trace_p_opt: f64,
}

impl FrameRow {
    /// Row for the decision (r, p) applied on `csi`; tracking fields start as NaN.
    pub fn evaluate(frame: usize, t_sec: f64, r: &[f64], p: &[f64], csi: &Csi, problem: &RelayProblem) -> Self {
        let feasible = capacity_residuals(r, p, csi, problem).iter().all(|&v| v <= 0.0);
        Self {
            frame,
            t_sec,
            feasible,
            sum_rate: r.iter().sum(),
            utility: r.iter().map(|v| v.ln()).sum(),
            power_sum: p.iter().sum(),
            e_x_inst: f64::NAN,
            e_y_inst: f64::NAN,
            trace_p: f64::NAN,
            trace_p_opt: f64::NAN,
        }
    }
}

/// Run-level metrics after burn-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub p_out: f64,
    pub throughput: f64,
    pub utility: f64,
    pub e_x: f64,
    pub e_y: f64,
    pub frames: usize,
}

fn mean_or_nan(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n, mut any_nan) = (0.0, 0usize, false);
    for x in v {
        if x.is_nan() {
            any_nan = true;
        } else {
            s += x;
            n += 1;
        }
    }
    if n == 0 || any_nan {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Outage probability, effective throughput (sum rate on feasible frames,
/// zero otherwise), utility over feasible frames and mean tracking errors,
/// all over the rows after `burn_in`.
pub fn metrics_fold(rows: &[FrameRow], burn_in: usize) -> MetricsSummary {
    let tail = rows.get(burn_in..).unwrap_or(&[]);
    let n = tail.len();
    if n == 0 {
        return MetricsSummary { p_out: f64::NAN, throughput: f64::NAN, utility: f64::NAN, e_x: f64::NAN, e_y: f64::NAN, frames: 0 };
    }
    let infeasible = tail.iter().filter(|r| !r.feasible).count();
    MetricsSummary {
        p_out: infeasible as f64 / n as f64,
        throughput: tail.iter().map(|r| if r.feasible { r.sum_rate } else { 0.0 }).sum::<f64>() / n as f64,
        utility: mean_or_nan(tail.iter().filter(|r| r.feasible).map(|r| r.utility)),
        e_x: mean_or_nan(tail.iter().map(|r| r.e_x_inst)),
        e_y: mean_or_nan(tail.iter().map(|r| r.e_y_inst)),
        frames: n,
    }
}

/// Mean and normal-approximation 95% half-width across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

impl MeanCi {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, ci95: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci95 = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, ci95, n }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.ci95
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.ci95
    }
}

/// Cross-seed aggregate of run summaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub p_out: MeanCi,
    pub throughput: MeanCi,
    pub utility: MeanCi,
    pub e_x: MeanCi,
    pub e_y: MeanCi,
}

pub fn aggregate(runs: &[MetricsSummary]) -> Aggregate {
    let col = |f: fn(&MetricsSummary) -> f64| MeanCi::of(&runs.iter().map(f).collect::<Vec<_>>());
    Aggregate {
        p_out: col(|m| m.p_out),
        throughput: col(|m| m.throughput),
        utility: col(|m| m.utility),
        e_x: col(|m| m.e_x),
        e_y: col(|m| m.e_y),
    }
}
