//! Deterministic SVG rendering of results tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::config::Method;
use super::run::{median, ResultRow, SweepResult};
use crate::error::{Error, Result};

pub const LAYOUTS: [&str; 3] = ["lambda-sweep", "normalization", "kl-bars"];

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Svg { body: String::new(), width, height }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, color: &str, dashed: bool) {
        let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{color}"{dash}/>"#
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            p.join(" ")
        );
    }

    fn dot(&mut self, x: f64, y: f64, color: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{color}" fill-opacity="0.6"/>"#);
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, color: &str) {
        let _ = writeln!(self.body, r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{color}"/>"#);
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let s = s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{s}</text>"#
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

/// Linear axes of one panel placed at horizontal offset `ox`.
struct Panel {
    ox: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Panel {
    fn px(&self, x: f64) -> f64 {
        self.ox + MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (PANEL_W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        PANEL_H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (PANEL_H - 2.0 * MARGIN)
    }

    fn axes(&self, svg: &mut Svg, title: &str, xlabel: &str, ylabel: &str) {
        let (l, r) = (self.ox + MARGIN, self.ox + PANEL_W - MARGIN);
        let (t, b) = (MARGIN, PANEL_H - MARGIN);
        svg.line(l, b, r, b, "black", false);
        svg.line(l, t, l, b, "black", false);
        for i in 0..=4 {
            let fx = self.x.0 + (self.x.1 - self.x.0) * i as f64 / 4.0;
            let fy = self.y.0 + (self.y.1 - self.y.0) * i as f64 / 4.0;
            svg.text(self.px(fx), b + 14.0, "middle", &format!("{fx:.2}"));
            svg.text(l - 4.0, self.py(fy) + 4.0, "end", &format!("{fy:.3}"));
        }
        svg.text((l + r) / 2.0, t - 16.0, "middle", title);
        svg.text((l + r) / 2.0, b + 32.0, "middle", xlabel);
        svg.text(self.ox + 12.0, t - 4.0, "start", ylabel);
    }
}

fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let lo = lo.min(0.0);
    let hi = if hi > lo { hi * 1.05 } else { lo + 1.0 };
    (lo, hi)
}

fn gammas(result: &SweepResult) -> Vec<f64> {
    let mut g: Vec<f64> = result.rows.iter().map(|r| r.gamma).collect();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

fn lambdas(rows: &[&ResultRow]) -> Vec<f64> {
    let mut l: Vec<f64> = rows.iter().filter_map(|r| r.lambda).collect();
    l.sort_by(f64::total_cmp);
    l.dedup();
    l
}

/// Renders `result` in the named layout.
pub fn render(result: &SweepResult, layout: &str) -> Result<String> {
    if result.rows.is_empty() {
        return Err(Error::Config("nothing to plot: results are empty".into()));
    }
    match layout {
        "lambda-sweep" => Ok(lambda_panels(result, |r| r.kl, "KL", Method::TdC, "td-c")),
        "normalization" => Ok(lambda_panels(result, |r| r.mass, "mass", Method::McC, "mc-c")),
        "kl-bars" => Ok(kl_bars(result)),
        other => Err(Error::Config(format!("unknown plot layout {other:?}; expected one of {LAYOUTS:?}"))),
    }
}

/// One panel per γ: Q-learning per-seed values and median over λ with a
/// horizontal reference for `reference`.
fn lambda_panels(
    result: &SweepResult,
    value: impl Fn(&ResultRow) -> f64,
    ylabel: &str,
    reference: Method,
    ref_name: &str,
) -> String {
    let gs = gammas(result);
    let mut svg = Svg::new(PANEL_W * gs.len() as f64, PANEL_H);
    for (i, &g) in gs.iter().enumerate() {
        let q: Vec<&ResultRow> =
            result.rows.iter().filter(|r| r.gamma == g && r.method == Method::QHindsight).collect();
        let refs: Vec<&ResultRow> = result.rows.iter().filter(|r| r.gamma == g && r.method == reference).collect();
        let ref_median = median(refs.iter().map(|r| value(r)));
        let mut extra = vec![ref_median];
        if reference == Method::McC {
            extra.push(1.0);
        }
        let panel = Panel {
            ox: PANEL_W * i as f64,
            x: (0.0, 1.0),
            y: y_range(q.iter().map(|r| value(r)).chain(extra.iter().copied())),
        };
        panel.axes(&mut svg, &format!("gamma = {g}"), "lambda", ylabel);
        for r in &q {
            svg.dot(panel.px(r.lambda.unwrap_or(0.0)), panel.py(value(r)), PALETTE[0]);
        }
        let pts: Vec<(f64, f64)> = lambdas(&q)
            .into_iter()
            .map(|l| {
                let m = median(q.iter().filter(|r| r.lambda == Some(l)).map(|r| value(r)));
                (panel.px(l), panel.py(m))
            })
            .collect();
        svg.polyline(&pts, PALETTE[0]);
        if ref_median.is_finite() {
            let y = panel.py(ref_median);
            svg.line(panel.px(0.0), y, panel.px(1.0), y, PALETTE[1], true);
            svg.text(panel.px(1.0), y - 4.0, "end", ref_name);
        }
        if reference == Method::TdC {
            let x = panel.px((1.0 + g) / 2.0);
            svg.line(x, panel.py(panel.y.0), x, panel.py(panel.y.1), PALETTE[2], true);
        } else {
            let y = panel.py(1.0);
            svg.line(panel.px(0.0), y, panel.px(1.0), y, "gray", true);
        }
    }
    svg.finish()
}

/// Median KL bar per (method, λ) with per-seed dots, one panel per γ.
fn kl_bars(result: &SweepResult) -> String {
    let gs = gammas(result);
    let mut svg = Svg::new(PANEL_W * gs.len() as f64, PANEL_H);
    for (i, &g) in gs.iter().enumerate() {
        let rows: Vec<&ResultRow> = result.rows.iter().filter(|r| r.gamma == g).collect();
        let mut seen = BTreeSet::new();
        let mut groups: Vec<(Method, Option<f64>)> = Vec::new();
        for r in &rows {
            if seen.insert((r.method, r.lambda.map(f64::to_bits))) {
                groups.push((r.method, r.lambda));
            }
        }
        let n = groups.len() as f64;
        let panel = Panel { ox: PANEL_W * i as f64, x: (0.0, n), y: y_range(rows.iter().map(|r| r.kl)) };
        panel.axes(&mut svg, &format!("gamma = {g}"), "", "KL");
        for (k, &(method, lambda)) in groups.iter().enumerate() {
            let color = PALETTE[Method::ALL.iter().position(|&m| m == method).unwrap_or(0) % PALETTE.len()];
            let members: Vec<&&ResultRow> = rows.iter().filter(|r| r.method == method && r.lambda == lambda).collect();
            let m = median(members.iter().map(|r| r.kl));
            let (x0, x1) = (panel.px(k as f64 + 0.15), panel.px(k as f64 + 0.85));
            let top = panel.py(m.max(panel.y.0));
            svg.rect(x0, top, x1 - x0, panel.py(panel.y.0) - top, color);
            for r in &members {
                svg.dot((x0 + x1) / 2.0, panel.py(r.kl), "black");
            }
            let label = match lambda {
                Some(l) => format!("{method} {l}"),
                None => method.to_string(),
            };
            svg.text((x0 + x1) / 2.0, PANEL_H - MARGIN + 28.0, "middle", &label);
        }
    }
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: Method, lambda: Option<f64>, seed: usize, kl: f64) -> ResultRow {
        ResultRow {
            experiment: "t".into(),
            env: "gridworld5".into(),
            method,
            gamma: 0.9,
            lambda,
            seed,
            step: 10,
            kl,
            mass: 1.0,
            wall_ms: 0,
        }
    }

    #[test]
    fn every_layout_renders_and_is_stable() {
        let result = SweepResult {
            rows: vec![
                row(Method::TdC, None, 0, 0.2),
                row(Method::QHindsight, Some(0.5), 0, 0.4),
                row(Method::QHindsight, Some(0.9), 0, 0.3),
            ],
        };
        for layout in LAYOUTS {
            let a = render(&result, layout).unwrap();
            assert!(a.starts_with("<svg"));
            assert_eq!(a, render(&result, layout).unwrap());
        }
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        assert!(matches!(render(&SweepResult::default(), "kl-bars"), Err(Error::Config(_))));
        let result = SweepResult { rows: vec![row(Method::TdC, None, 0, 0.2)] };
        assert!(matches!(render(&result, "pie"), Err(Error::Config(_))));
    }
}
