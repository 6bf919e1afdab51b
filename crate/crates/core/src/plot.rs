//! SVG charts of sweep results: accuracy against source-target divergence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::{mean_std, SweepRow, NO_SCHEDULE};

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 210.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const TICKS: usize = 5;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Figure {
    /// One series per algorithm and target size.
    AccVsKl,
    /// A single target size with one series per algorithm.
    ModelComparison,
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acc_vs_kl" => Ok(Figure::AccVsKl),
            "model_comparison" => Ok(Figure::ModelComparison),
            _ => Err(Error::Config(format!(
                "unknown figure {s:?} (expected acc_vs_kl or model_comparison)"
            ))),
        }
    }
}

/// Row filter; an empty list admits every value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotFilter {
    pub algorithms: Vec<String>,
    pub target_sizes: Vec<usize>,
    pub lambda_schedules: Vec<String>,
}

impl PlotFilter {
    fn admits(&self, r: &SweepRow) -> bool {
        (self.algorithms.is_empty() || self.algorithms.contains(&r.algorithm))
            && (self.target_sizes.is_empty() || self.target_sizes.contains(&r.target_size))
            && (self.lambda_schedules.is_empty()
                || self.lambda_schedules.contains(&r.lambda_schedule))
    }
}

struct Point {
    x: f64,
    mean: f64,
    std: f64,
}

struct Series {
    label: String,
    points: Vec<Point>,
}

fn series_label(figure: Figure, algorithm: &str, size: usize, schedule: &str) -> String {
    let mut label = algorithm.to_string();
    if figure == Figure::AccVsKl {
        let _ = write!(label, " n={size}");
    }
    if schedule != NO_SCHEDULE {
        let _ = write!(label, " {schedule}");
    }
    label
}

fn collect(rows: &[SweepRow], figure: Figure, filter: &PlotFilter) -> Result<Vec<Series>> {
    let kept: Vec<&SweepRow> = rows
        .iter()
        .filter(|r| r.is_ok() && r.test_accuracy.is_some() && filter.admits(r))
        .collect();
    if kept.is_empty() {
        return Err(Error::Data("no rows matched".into()));
    }
    if figure == Figure::ModelComparison {
        let first = kept[0].target_size;
        if kept.iter().any(|r| r.target_size != first) {
            return Err(Error::Config(
                "model_comparison needs rows from a single target size; filter by target size"
                    .into(),
            ));
        }
    }
    // Series key -> sigma bits -> (accuracies, kls)
    type Cells = BTreeMap<u64, (Vec<f64>, Vec<f64>)>;
    let mut groups: BTreeMap<(String, usize, String), Cells> = BTreeMap::new();
    for r in kept {
        let size = if figure == Figure::AccVsKl {
            r.target_size
        } else {
            0
        };
        let cells = groups
            .entry((r.algorithm.clone(), size, r.lambda_schedule.clone()))
            .or_default();
        let cell = cells.entry(r.sigma.to_bits()).or_default();
        cell.0.push(r.test_accuracy.expect("filtered"));
        cell.1.push(r.kl);
    }
    Ok(groups
        .into_iter()
        .map(|((algorithm, size, schedule), cells)| {
            let mut points: Vec<Point> = cells
                .values()
                .map(|(acc, kl)| {
                    let (mean, std) = mean_std(acc);
                    Point {
                        x: mean_std(kl).0,
                        mean,
                        std,
                    }
                })
                .collect();
            points.sort_by(|a, b| a.x.total_cmp(&b.x));
            Series {
                label: series_label(figure, &algorithm, size, &schedule),
                points,
            }
        })
        .collect())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn range(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo < 1e-9 {
        (lo - 0.05, hi + 0.05)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

/// Renders `figure` from sweep rows. Failed rows are skipped; means and
/// standard deviations are taken over seeds at each sigma.
pub fn render(rows: &[SweepRow], figure: Figure, filter: &PlotFilter) -> Result<String> {
    let series = collect(rows, figure, filter)?;
    let all = series.iter().flat_map(|s| &s.points);
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for p in all {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.mean - p.std);
        y1 = y1.max(p.mean + p.std);
    }
    let (x0, x1) = range(x0, x1);
    let (y0, y1) = range(y0, y1);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let title = match figure {
        Figure::AccVsKl => "Test accuracy against KL divergence".to_string(),
        Figure::ModelComparison => {
            let size = rows
                .iter()
                .find(|r| r.is_ok() && filter.admits(r))
                .map(|r| r.target_size)
                .unwrap_or(0);
            format!("Model comparison (target size = {size})")
        }
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        escape(&title)
    );
    let _ = writeln!(s, r#"<g class="axes" stroke="black">"#);
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}"/>"#,
        TOP + ph
    );
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}"/>"#,
            TOP + ph,
            TOP + ph + 5.0
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}"/>"#,
            LEFT - 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle" stroke="none">{}</text>"#,
            TOP + ph + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" stroke="none">{}</text>"#,
            LEFT - 8.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">KL divergence (source || target)</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">Test accuracy</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper = ser
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.mean + p.std)));
        let lower = ser
            .points
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.mean - p.std)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            s,
            r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
            band.join(" ")
        );
        let line: Vec<String> = ser
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" points="{}" fill="none" stroke="{color}" stroke-width="2"><title>{}</title></polyline>"#,
            line.join(" "),
            escape(&ser.label)
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
