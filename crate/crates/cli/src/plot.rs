//! Self-contained SVG line and scatter plots of exported CSV data.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, Stage, StageError};
use crate::manifest::write_atomic;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Line,
    Scatter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub kind: PlotKind,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// Axis range covering `values`; a degenerate range is widened to `v ± 1`.
pub fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if lo == hi {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.2e}")
    } else {
        format!("{:.3}", v)
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

/// Renders the SVG document for `plot`.
pub fn render_svg(plot: &Plot) -> Result<String> {
    if plot.series.is_empty() || plot.series.iter().any(|s| s.points.is_empty()) {
        return Err(StageError::new(
            Stage::Plot,
            format!("{}: nothing to plot (empty series)", plot.title),
        ));
    }
    let all = || plot.series.iter().flat_map(|s| s.points.iter());
    if all().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(StageError::new(
            Stage::Plot,
            format!("{}: non-finite data", plot.title),
        ));
    }
    let (x0, x1) = axis_range(all().map(|p| p.0));
    let (y0, y1) = axis_range(all().map(|p| p.1));
    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let w = &mut s;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(
        w,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    )
    .unwrap();
    writeln!(
        w,
        r#"<text x="{}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(&plot.title)
    )
    .unwrap();
    writeln!(
        w,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        writeln!(
            w,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="10">{}</text>"#,
            sx(xv),
            MARGIN_TOP + ph + 14.0,
            tick_label(xv)
        )
        .unwrap();
        writeln!(
            w,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="10">{}</text>"#,
            MARGIN_LEFT - 4.0,
            sy(yv) + 3.0,
            tick_label(yv)
        )
        .unwrap();
    }
    writeln!(
        w,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(&plot.x_label)
    )
    .unwrap();
    writeln!(
        w,
        r#"<text x="16" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {:.2})">{}</text>"#,
        MARGIN_TOP + ph / 2.0,
        MARGIN_TOP + ph / 2.0,
        escape(&plot.y_label)
    )
    .unwrap();
    for (k, series) in plot.series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        match plot.kind {
            PlotKind::Line => {
                let pts: Vec<String> = series
                    .points
                    .iter()
                    .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                    .collect();
                writeln!(
                    w,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
                    pts.join(" "),
                    escape(&series.name)
                )
                .unwrap();
            }
            PlotKind::Scatter => {
                writeln!(
                    w,
                    r#"<g fill="{color}"><title>{}</title>"#,
                    escape(&series.name)
                )
                .unwrap();
                for &(x, y) in &series.points {
                    writeln!(w, r#"<circle cx="{:.2}" cy="{:.2}" r="2"/>"#, sx(x), sy(y)).unwrap();
                }
                writeln!(w, "</g>").unwrap();
            }
        }
        if plot.series.len() > 1 {
            let ly = MARGIN_TOP + 14.0 + 14.0 * k as f64;
            writeln!(
                w,
                r#"<text x="{:.2}" y="{ly:.2}" text-anchor="end" font-family="sans-serif" font-size="10" fill="{color}">{}</text>"#,
                MARGIN_LEFT + pw - 6.0,
                escape(&series.name)
            )
            .unwrap();
        }
    }
    writeln!(w, "</svg>").unwrap();
    Ok(s)
}

/// Renders `plot` and writes it to `path`.
pub fn emit_plot(plot: &Plot, path: &Path) -> Result<()> {
    let svg = render_svg(plot)?;
    write_atomic(path, svg.as_bytes(), Stage::Plot)
}

/// Reads columns `x` and `y` of a headered CSV. Rows with an empty cell in
/// either column are skipped.
pub fn csv_columns(text: &str, x: &str, y: &str) -> Result<Vec<(f64, f64)>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = |name: &str| {
        header.iter().position(|h| *h == name).ok_or_else(|| {
            StageError::new(Stage::Plot, format!("no column `{name}` in {header:?}"))
        })
    };
    let (ix, iy) = (col(x)?, col(y)?);
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let get = |i: usize| -> Result<Option<f64>> {
            match cells.get(i).copied().unwrap_or("") {
                "" => Ok(None),
                c => c.parse().map(Some).map_err(|e| {
                    StageError::new(
                        Stage::Plot,
                        format!("line {}: bad number `{c}`: {e}", n + 2),
                    )
                }),
            }
        };
        if let (Some(a), Some(b)) = (get(ix)?, get(iy)?) {
            out.push((a, b));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: Vec<(f64, f64)>) -> Plot {
        Plot {
            kind: PlotKind::Line,
            title: "t".into(),
            x_label: "step".into(),
            y_label: "l2_divergence".into(),
            series: vec![Series {
                name: "a".into(),
                points,
            }],
        }
    }

    #[test]
    fn three_points_one_polyline() {
        let svg = render_svg(&line(vec![(0.0, 1.0), (1.0, 2.0), (2.0, 4.0)])).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        let start = svg.find("points=\"").unwrap() + 8;
        let end = start + svg[start..].find('"').unwrap();
        assert_eq!(svg[start..end].split(' ').count(), 3);
        assert!(svg.contains(">step<") && svg.contains(">l2_divergence<"));
    }

    #[test]
    fn constant_series_is_centered() {
        assert_eq!(axis_range([3.0, 3.0].into_iter()), (2.0, 4.0));
        let svg = render_svg(&line(vec![(0.0, 3.0), (1.0, 3.0)])).unwrap();
        let mid = MARGIN_TOP + (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) / 2.0;
        assert!(
            svg.contains(&format!("{:.2},{mid:.2} ", MARGIN_LEFT)),
            "{svg}"
        );
        assert!(svg.contains(">2<") && svg.contains(">4<"));
    }

    #[test]
    fn empty_series_rejected() {
        let e = render_svg(&line(vec![])).unwrap_err();
        assert_eq!(e.stage, Stage::Plot);
    }

    #[test]
    fn scatter_draws_every_point() {
        let mut p = line(vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.1), (3.0, 0.2)]);
        p.kind = PlotKind::Scatter;
        let svg = render_svg(&p).unwrap();
        assert_eq!(svg.matches("<circle").count(), 4);
        assert_eq!(svg.matches("<polyline").count(), 0);
    }

    #[test]
    fn unwritable_path_fails() {
        let p = line(vec![(0.0, 1.0)]);
        assert!(emit_plot(&p, Path::new("/proc/nope/plot.svg")).is_err());
    }

    #[test]
    fn csv_columns_skip_blank_cells() {
        let pts = csv_columns("t,value,flag\n0,1.5,0\n1,,1\n2,2,0\n", "t", "value").unwrap();
        assert_eq!(pts, vec![(0.0, 1.5), (2.0, 2.0)]);
        assert!(csv_columns("t,value\n", "t", "nope").is_err());
    }
}
