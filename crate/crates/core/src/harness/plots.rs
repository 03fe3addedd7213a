//! Minimal deterministic SVG line plots: DR (solid) and IAR (dashed) curves
//! against ε, one figure per attack.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

/// One curve.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub color: String,
    pub dashed: bool,
    /// (ε, rate) points; undefined rates are simply omitted.
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

/// Render rate-vs-ε series into an SVG file. The y axis is fixed to [0,1].
pub fn render_dr_iar_plot(
    title: &str,
    series: &[Series],
    path: impl AsRef<Path>,
) -> Result<()> {
    let xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    let (x_min, x_max) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let (x_min, x_max) = if xs.is_empty() {
        (0.0, 1.0)
    } else if (x_max - x_min).abs() < 1e-12 {
        (x_min - 0.05, x_max + 0.05)
    } else {
        (x_min, x_max)
    };
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * plot_w;
    let py = |y: f64| MARGIN_T + (1.0 - y) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{title}</text>",
        MARGIN_L + plot_w / 2.0
    );
    // axes
    let _ = writeln!(
        svg,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        MARGIN_L,
        py(0.0),
        MARGIN_L + plot_w,
        py(0.0)
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        MARGIN_L,
        py(0.0),
        MARGIN_L,
        py(1.0)
    );
    for t in 0..=5 {
        let y = t as f64 / 5.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#cccccc\" stroke-width=\"0.5\"/>",
            MARGIN_L,
            py(y),
            MARGIN_L + plot_w,
            py(y)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{y:.1}</text>",
            MARGIN_L - 6.0,
            py(y) + 4.0
        );
    }
    let mut x_ticks: Vec<f64> = xs.clone();
    x_ticks.sort_by(f64::total_cmp);
    x_ticks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    for &x in &x_ticks {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{x}</text>",
            px(x),
            py(0.0) + 18.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">epsilon</text>",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">rate</text>",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    );
    // curves
    for s in series {
        if s.points.is_empty() {
            continue;
        }
        let mut pts = s.points.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path_d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(i, (x, y))| {
                format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, px(*x), py(*y))
            })
            .collect();
        let dash = if s.dashed {
            " stroke-dasharray=\"6,4\""
        } else {
            ""
        };
        let _ = writeln!(
            svg,
            "<path d=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"{dash}/>",
            path_d.join(" "),
            s.color
        );
        for (x, y) in &pts {
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{}\"/>",
                px(*x),
                py(*y),
                s.color
            );
        }
    }
    // legend
    let lx = MARGIN_L + plot_w + 14.0;
    for (i, s) in series.iter().enumerate() {
        let ly = MARGIN_T + 14.0 + i as f64 * 18.0;
        let dash = if s.dashed {
            " stroke-dasharray=\"6,4\""
        } else {
            ""
        };
        let _ = writeln!(
            svg,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{}\" stroke-width=\"1.8\"{dash}/>",
            lx + 26.0,
            s.color
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            lx + 32.0,
            ly + 4.0,
            s.label
        );
    }
    let _ = writeln!(svg, "</svg>");
    std::fs::write(path.as_ref(), svg)?;
    Ok(())
}
