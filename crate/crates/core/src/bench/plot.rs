//! Minimal SVG charts: line plots (loss curves, latency vs scale) and
//! workspace snapshots of MPC episodes.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::field::EpochRecord;
use crate::geometry::scene::{Primitive, Scene};
use crate::robot::RobotModel;

use super::LatencyRow;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart with optional log10 axes. Non-positive values are dropped on
/// log axes.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series], log_x: bool, log_y: bool) -> Result<String> {
    let tx = |v: f64| if log_x { v.log10() } else { v };
    let ty = |v: f64| if log_y { v.log10() } else { v };
    let keep = |&(x, y): &(f64, f64)| x.is_finite() && y.is_finite() && (!log_x || x > 0.0) && (!log_y || y > 0.0);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied().filter(keep))
        .map(|(x, y)| (tx(x), ty(y)))
        .collect();
    if pts.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title)).unwrap();
    writeln!(
        svg,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    )
    .unwrap();
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let lx = if log_x { format!("1e{fx:.1}") } else { format!("{fx:.3}") };
        let ly = if log_y { format!("1e{fy:.1}") } else { format!("{fy:.3}") };
        writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{lx}</text>"#, sx(fx), H - MARGIN + 18.0).unwrap();
        writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{ly}</text>"#, MARGIN - 6.0, sy(fy) + 4.0).unwrap();
    }
    writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, escape(xlabel)).unwrap();
    writeln!(
        svg,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(ylabel),
        y = H / 2.0
    )
    .unwrap();
    for (i, s) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let d: Vec<String> = s
            .points
            .iter()
            .copied()
            .filter(keep)
            .enumerate()
            .map(|(k, (x, y))| format!("{}{:.1} {:.1}", if k == 0 { "M" } else { "L" }, sx(tx(x)), sy(ty(y))))
            .collect();
        writeln!(svg, r#"<path d="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, d.join(" ")).unwrap();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{c}">{}</text>"#,
            W - MARGIN - 140.0,
            MARGIN + 16.0 * i as f64,
            escape(&s.name)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn loss_curves(history: &[EpochRecord]) -> Result<String> {
    let series = vec![
        Series {
            name: "train".into(),
            points: history.iter().map(|r| (r.epoch as f64, r.train_loss)).collect(),
        },
        Series {
            name: "validation".into(),
            points: history.iter().map(|r| (r.epoch as f64, r.val_loss)).collect(),
        },
    ];
    line_chart("Training loss", "epoch", "loss", &series, false, true)
}

pub fn latency_chart(rows: &[LatencyRow]) -> Result<String> {
    let series = vec![
        Series {
            name: "distance".into(),
            points: rows.iter().map(|r| (r.scale as f64, r.dist_ms)).collect(),
        },
        Series {
            name: "distance + gradient".into(),
            points: rows.iter().map(|r| (r.scale as f64, r.dist_grad_ms)).collect(),
        },
    ];
    line_chart("Batched query latency", "queries", "ms", &series, true, true)
}

/// Workspace view of a planar episode given as `(t, q)` states: obstacles and
/// arm at `count` evenly spaced states, later snapshots drawn darker.
pub fn episode_snapshots(model: &RobotModel, scene: &Scene, states: &[(f64, Vec<f64>)], count: usize) -> Result<String> {
    if model.point_dim() != 2 {
        return Err(Error::invalid("snapshots are drawn for planar robots"));
    }
    if states.is_empty() || count == 0 {
        return Err(Error::invalid("nothing to draw"));
    }
    let reach = model.reach() + 0.5;
    let scale = (H - 2.0 * 20.0) / (2.0 * reach);
    let cx = W / 2.0;
    let cy = H / 2.0;
    let px = |x: f64| cx + x * scale;
    let py = |y: f64| cy - y * scale;
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    let n = states.len();
    let picks: Vec<usize> = (0..count).map(|i| if count == 1 { n - 1 } else { i * (n - 1) / (count - 1) }).collect();
    for (k, &i) in picks.iter().enumerate() {
        let (t, q) = &states[i];
        let shade = 0.2 + 0.8 * (k + 1) as f64 / count as f64;
        for o in &scene.obstacles {
            let c = o.center_at(*t);
            match o {
                Primitive::Sphere { radius, .. } => {
                    writeln!(
                        svg,
                        r##"<circle cx="{:.1}" cy="{:.1}" r="{:.1}" fill="#d62728" fill-opacity="{:.2}"/>"##,
                        px(c[0]),
                        py(c[1]),
                        radius * scale,
                        0.15 * shade
                    )
                    .unwrap();
                }
                Primitive::Box { extents, .. } => {
                    writeln!(
                        svg,
                        r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#d62728" fill-opacity="{:.2}"/>"##,
                        px(c[0] - extents[0] / 2.0),
                        py(c[1] + extents[1] / 2.0),
                        extents[0] * scale,
                        extents[1] * scale,
                        0.15 * shade
                    )
                    .unwrap();
                }
            }
        }
        let spheres = model.forward_spheres(q)?;
        let d: Vec<String> = spheres
            .iter()
            .enumerate()
            .map(|(j, s)| format!("{}{:.1} {:.1}", if j == 0 { "M" } else { "L" }, px(s.center[0]), py(s.center[1])))
            .collect();
        let width = 2.0 * spheres.first().map_or(0.1, |s| s.radius) * scale;
        writeln!(
            svg,
            r##"<path d="{}" fill="none" stroke="#1f77b4" stroke-opacity="{shade:.2}" stroke-width="{width:.1}" stroke-linecap="round"/>"##,
            d.join(" ")
        )
        .unwrap();
        writeln!(svg, r#"<text x="8" y="{}">t = {:.2} s</text>"#, 16.0 + 14.0 * k as f64, t).unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
