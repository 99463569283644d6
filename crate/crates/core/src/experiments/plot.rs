//! Minimal deterministic SVG line charts for sweep and trace tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{
    read_summary, read_trace, ExperimentError, SummaryRow, TraceRow, BUDGET_SUMMARY_CSV,
    RISK_SUMMARY_CSV, TRACE_CSV,
};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("{0}: table has no plottable rows")]
    EmptyTable(String),
    #[error("{0}: nothing to plot (expected at least one of {BUDGET_SUMMARY_CSV}, {RISK_SUMMARY_CSV}, {TRACE_CSV})")]
    NoInputs(PathBuf),
    #[error("log axis needs positive values, got {0}")]
    NonPositiveLog(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    Line,
    Dots,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub mark: Mark,
}

#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        return format!("{v:.2e}");
    }
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn padded_range(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        (lo - pad, hi + pad)
    }
}

impl Chart {
    /// Renders the chart. Fails on charts without any finite point.
    pub fn render(&self) -> Result<String, PlotError> {
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        if pts.is_empty() {
            return Err(PlotError::EmptyTable(self.title.clone()));
        }
        let tx = |x: f64| if self.log_x { x.log10() } else { x };
        if self.log_x {
            if let Some(&(x, _)) = pts.iter().find(|(x, _)| *x <= 0.0) {
                return Err(PlotError::NonPositiveLog(x));
            }
        }
        let fold = |f: fn(f64, f64) -> f64, init: f64, g: &dyn Fn(&(f64, f64)) -> f64| {
            pts.iter().map(g).fold(init, f)
        };
        let (x0, x1) = padded_range(
            fold(f64::min, f64::INFINITY, &|p| tx(p.0)),
            fold(f64::max, f64::NEG_INFINITY, &|p| tx(p.0)),
        );
        let (y0, y1) = padded_range(
            fold(f64::min, f64::INFINITY, &|p| p.1).min(0.0),
            fold(f64::max, f64::NEG_INFINITY, &|p| p.1),
        );
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (tx(x) - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

        let mut out = String::new();
        let w = &mut out;
        // Writing to a String cannot fail.
        let _ = writeln!(
            w,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            w,
            r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            w,
            r##"<rect x="{LEFT}" y="{TOP}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#333"/>"##
        );
        for i in 0..TICKS {
            let f = i as f64 / (TICKS - 1) as f64;
            let xv = x0 + f * (x1 - x0);
            let label = if self.log_x { 10f64.powf(xv) } else { xv };
            let px = LEFT + f * pw;
            let _ = writeln!(
                w,
                r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#333"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0,
                tick_label(label)
            );
            let yv = y0 + f * (y1 - y0);
            let py = TOP + ph - f * ph;
            let _ = writeln!(
                w,
                r##"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                LEFT - 5.0,
                LEFT - 8.0,
                py + 4.0,
                tick_label(yv)
            );
        }
        let _ = writeln!(
            w,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            w,
            r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let mut finite: Vec<(f64, f64)> = s
                .points
                .iter()
                .copied()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect();
            finite.sort_by(|a, b| a.0.total_cmp(&b.0));
            match s.mark {
                Mark::Line => {
                    let path: Vec<String> = finite
                        .iter()
                        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                        .collect();
                    let _ = writeln!(
                        w,
                        r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                        path.join(" ")
                    );
                    for &(x, y) in &finite {
                        let _ = writeln!(
                            w,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                            sx(x),
                            sy(y)
                        );
                    }
                }
                Mark::Dots => {
                    for &(x, y) in &finite {
                        let _ = writeln!(
                            w,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}" fill-opacity="0.5"/>"#,
                            sx(x),
                            sy(y)
                        );
                    }
                }
            }
            let ly = TOP + 10.0 + 18.0 * i as f64;
            let lx = WIDTH - RIGHT + 12.0;
            let _ = writeln!(
                w,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&s.name)
            );
        }
        let _ = writeln!(w, "</svg>");
        Ok(out)
    }
}

fn series_by_procedure(rows: &[SummaryRow], x: impl Fn(&SummaryRow) -> f64) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for row in rows {
        let point = (x(row), row.median_utility);
        match out.iter_mut().find(|s| s.name == row.procedure) {
            Some(s) => s.points.push(point),
            None => out.push(Series {
                name: row.procedure.clone(),
                points: vec![point],
                mark: Mark::Line,
            }),
        }
    }
    out
}

pub fn budget_chart(rows: &[SummaryRow]) -> Chart {
    let risk = rows.first().map(|r| r.risk).unwrap_or(f64::NAN);
    Chart {
        title: format!("Median utility vs budget (r = {})", tick_label(risk)),
        x_label: "budget B".into(),
        y_label: "median utility".into(),
        log_x: false,
        series: series_by_procedure(rows, |r| r.budget as f64),
    }
}

pub fn risk_chart(rows: &[SummaryRow]) -> Chart {
    let budget = rows.first().map(|r| r.budget).unwrap_or(0);
    Chart {
        title: format!("Median utility vs privacy risk (B = {budget})"),
        x_label: "privacy risk r (log scale)".into(),
        y_label: "median utility".into(),
        log_x: true,
        series: series_by_procedure(rows, |r| r.risk),
    }
}

pub fn trace_chart(rows: &[TraceRow]) -> Chart {
    let pts = |f: fn(&TraceRow) -> f64| rows.iter().map(|r| (r.iteration as f64, f(r))).collect();
    Chart {
        title: "Obfuscation loss per iteration".into(),
        x_label: "iteration".into(),
        y_label: "relative loss (%)".into(),
        log_x: false,
        series: vec![
            Series {
                name: "relative loss".into(),
                points: pts(|r| r.relative_loss_pct),
                mark: Mark::Dots,
            },
            Series {
                name: "moving avg (10)".into(),
                points: pts(|r| r.moving_avg_10),
                mark: Mark::Line,
            },
        ],
    }
}

/// Renders an SVG next to every known table found in `input` and writes it
/// to `output`. Returns the written paths.
pub fn emit_plots(input: &Path, output: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut charts: Vec<(&str, Chart)> = Vec::new();
    let mut found = false;
    for (csv_name, svg_name, risk_axis) in [
        (BUDGET_SUMMARY_CSV, "budget_sweep.svg", false),
        (RISK_SUMMARY_CSV, "risk_sweep.svg", true),
    ] {
        let path = input.join(csv_name);
        if path.exists() {
            found = true;
            let rows = read_summary(&path)?;
            if rows.is_empty() {
                return Err(PlotError::EmptyTable(path.display().to_string()).into());
            }
            let chart = if risk_axis {
                risk_chart(&rows)
            } else {
                budget_chart(&rows)
            };
            charts.push((svg_name, chart));
        }
    }
    let path = input.join(TRACE_CSV);
    if path.exists() {
        found = true;
        let rows = read_trace(&path)?;
        if rows.is_empty() {
            return Err(PlotError::EmptyTable(path.display().to_string()).into());
        }
        charts.push(("obfuscation_trace.svg", trace_chart(&rows)));
    }
    if !found {
        return Err(PlotError::NoInputs(input.to_path_buf()).into());
    }
    fs::create_dir_all(output).map_err(|source| ExperimentError::Io {
        path: output.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    for (name, chart) in charts {
        let svg = chart.render()?;
        let path = output.join(name);
        fs::write(&path, svg).map_err(|source| ExperimentError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}
