//! Self-contained SVG line plots, plus CSV twins of every figure so the
//! numbers stay greppable. No display dependencies; coordinates are
//! formatted with fixed precision so identical data gives identical bytes.

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 760.0;
const H: f64 = 480.0;
const ML: f64 = 76.0;
const MR: f64 = 180.0;
const MT: f64 = 46.0;
const MB: f64 = 58.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Largest of 1/2/5 x 10^k at or below a pleasant spacing for ~5 ticks.
fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let s = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    s * mag
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let step = nice_step(hi - lo);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(t);
        t += step;
    }
    out
}

fn tick_label(v: f64) -> String {
    // ticks sit on decimal grid points; snap away residual noise
    let snapped = (v * 1e9).round() / 1e9;
    format!("{snapped}")
}

pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let points = series.iter().flat_map(|s| s.points.iter());
    let (mut xlo, mut xhi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ylo, mut yhi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        xlo = xlo.min(x);
        xhi = xhi.max(x);
        ylo = ylo.min(y);
        yhi = yhi.max(y);
    }
    if !xlo.is_finite() {
        (xlo, xhi, ylo, yhi) = (0.0, 1.0, 0.0, 1.0);
    }
    if ylo >= 0.0 {
        ylo = 0.0;
    }
    if xhi - xlo < 1e-12 {
        xhi = xlo + 1.0;
    }
    yhi += (yhi - ylo).max(1e-12) * 0.05;
    if yhi - ylo < 1e-12 {
        yhi = ylo + 1.0;
    }

    let sx = |x: f64| ML + (x - xlo) / (xhi - xlo) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - ylo) / (yhi - ylo) * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        ML + (W - ML - MR) / 2.0,
        esc(title)
    ));

    for t in ticks(ylo, yhi) {
        let y = sy(t);
        svg.push_str(&format!(
            "<line x1=\"{ML:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#e0e0e0\"/>\n",
            W - MR
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            ML - 8.0,
            y + 4.0,
            tick_label(t)
        ));
    }
    for t in ticks(xlo, xhi) {
        let x = sx(t);
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{MT:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#e0e0e0\"/>\n",
            H - MB
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 18.0,
            tick_label(t)
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{ML:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#333\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML:.2}\" y1=\"{MT:.2}\" x2=\"{ML:.2}\" y2=\"{:.2}\" stroke=\"#333\"/>\n",
        H - MB
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
        ML + (W - ML - MR) / 2.0,
        H - 14.0,
        esc(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"20\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 20 {:.2})\">{}</text>\n",
        MT + (H - MT - MB) / 2.0,
        MT + (H - MT - MB) / 2.0,
        esc(y_label)
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            pts.join(" ")
        ));
        let ly = MT + 10.0 + i as f64 * 22.0;
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            W - MR + 14.0,
            W - MR + 40.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
            W - MR + 46.0,
            ly + 4.0,
            esc(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// CSV twin of a plot: one x column plus one column per series. All series
/// must share the same x grid.
pub fn series_csv(x_name: &str, series: &[Series]) -> String {
    let n = series.first().map(|s| s.points.len()).unwrap_or(0);
    for s in series {
        assert_eq!(s.points.len(), n, "series share one x grid");
    }
    let mut out = String::from(x_name);
    for s in series {
        out.push(',');
        out.push_str(&s.label);
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&series[0].points[i].0.to_string());
        for s in series {
            out.push(',');
            out.push_str(&s.points[i].1.to_string());
        }
        out.push('\n');
    }
    out
}
