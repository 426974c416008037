//! CSV, JSON and SVG artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::metrics::FrameRow;
use super::run::ChannelRow;
use super::ExperimentError;

pub const FRAME_HEADER: &str = "frame,t_sec,feasible,sum_rate,utility,power_sum,e_x_inst,e_y_inst,trace_p,trace_p_opt";

/// Per-frame CSV. Floats use the shortest round-trip representation.
pub fn frames_csv(rows: &[FrameRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(FRAME_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.frame,
            r.t_sec,
            u8::from(r.feasible),
            r.sum_rate,
            r.utility,
            r.power_sum,
            r.e_x_inst,
            r.e_y_inst,
            r.trace_p,
            r.trace_p_opt
        );
    }
    s
}

/// Parses text written by [`frames_csv`].
pub fn parse_frames_csv(text: &str) -> Result<Vec<FrameRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(FRAME_HEADER) {
        return Err("unexpected header".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(format!("row {}: expected 10 fields, got {}", i + 1, f.len()));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|e| format!("row {}: field {k}: {e}", i + 1));
            Ok(FrameRow {
                frame: f[0].parse().map_err(|e| format!("row {}: frame: {e}", i + 1))?,
                t_sec: num(1)?,
                feasible: match f[2] {
                    "1" => true,
                    "0" => false,
                    other => return Err(format!("row {}: feasible flag `{other}`", i + 1)),
                },
                sum_rate: num(3)?,
                utility: num(4)?,
                power_sum: num(5)?,
                e_x_inst: num(6)?,
                e_y_inst: num(7)?,
                trace_p: num(8)?,
                trace_p_opt: num(9)?,
            })
        })
        .collect()
}

pub fn channel_csv(rows: &[ChannelRow]) -> String {
    let n = rows.first().map_or(0, |r| r.hs.len());
    let mut s = String::from("frame");
    for k in 0..n {
        let _ = write!(s, ",hs{k}");
    }
    for k in 0..n {
        let _ = write!(s, ",hl{k}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{}", r.frame);
        for v in r.hs.iter().chain(&r.hl) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, contents).map_err(|source| ExperimentError::Io { path: PathBuf::from(path), source })
}

/// One named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Static line plot. Non-finite points are dropped; every kept point gets a marker.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (70.0, 170.0, 40.0, 50.0);
    let pts: Vec<(f64, f64)> =
        series.iter().flat_map(|s| s.points.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let range = |v: Vec<f64>| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        match (lo.is_finite(), hi > lo) {
            (false, _) => (0.0, 1.0),
            (true, true) => (lo, hi),
            (true, false) => (lo - 0.5, lo + 0.5),
        }
    };
    let (x0, x1) = range(pts.iter().map(|p| p.0).collect());
    let (y0, y1) = range(pts.iter().map(|p| p.1).collect());
    let pw = w - ml - mr;
    let ph = h - mt - mb;
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, ml + pw / 2.0, escape(title));
    let _ = writeln!(s, r#"<g class="axes" stroke="black" fill="none"><rect x="{ml}" y="{mt}" width="{pw}" height="{ph}"/></g>"#);
    for t in ticks(x0, x1) {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, sx(t), mt + ph + 18.0, fmt_tick(t));
    }
    for t in ticks(y0, y1) {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, ml - 6.0, sy(t) + 4.0, fmt_tick(t));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, ml + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        mt + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let kept: Vec<(f64, f64)> = ser.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        let _ = writeln!(s, r#"<g class="series" data-name="{}" stroke="{color}" fill="{color}">"#, escape(&ser.name));
        let path: Vec<String> = kept.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        if kept.len() <= 50 {
            for &(x, y) in &kept {
                let _ = writeln!(s, r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3"/>"#, sx(x), sy(y));
            }
        }
        let ly = mt + 14.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke-width="2"/>"#, w - mr + 12.0, w - mr + 32.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" stroke="none" fill="black">{}</text>"#, w - mr + 38.0, ly + 4.0, escape(&ser.name));
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    }
}
