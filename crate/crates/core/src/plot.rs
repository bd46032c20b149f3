//! Minimal SVG rendering for log-log plot series.

use crate::experiments::PlotSeries;

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

/// Scatter of the first two columns on log-log axes, plus the fit line when
/// present. Non-positive points are skipped.
pub fn loglog_svg(p: &PlotSeries) -> String {
    let pts: Vec<(f64, f64)> = p
        .rows
        .iter()
        .filter(|r| r.len() >= 2 && r[0] > 0.0 && r[1] > 0.0)
        .map(|r| (r[0].log10(), r[1].log10()))
        .collect();
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        escape(&p.name)
    );
    if pts.is_empty() {
        return s + "</svg>\n";
    }
    let (mut x0, mut x1, mut y0, mut y1) = bounds(&pts);
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    s += &format!(
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let xl = p.columns.first().map_or("x", String::as_str);
    let yl = p.columns.get(1).map_or("y", String::as_str);
    s += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">log10 {}</text>\n",
        W / 2.0,
        H - 12.0,
        escape(xl)
    );
    s += &format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">log10 {}</text>\n",
        H / 2.0,
        H / 2.0,
        escape(yl)
    );
    for (x, lbl) in [(x0, x0), (x1, x1)] {
        s += &format!("<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{lbl:.2}</text>\n", sx(x), H - PAD + 16.0);
    }
    for (y, lbl) in [(y0, y0), (y1, y1)] {
        s += &format!("<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{lbl:.2}</text>\n", PAD - 4.0, sy(y) + 4.0);
    }
    if let Some((slope, intercept)) = p.fit {
        // Fit lines are stored in natural-log space.
        let f = |x: f64| (slope * (x * std::f64::consts::LN_10) + intercept) / std::f64::consts::LN_10;
        s += &format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"crimson\"/>\n",
            sx(x0),
            sy(f(x0)),
            sx(x1),
            sy(f(x1))
        );
        s += &format!("<text x=\"{}\" y=\"38\" text-anchor=\"middle\">slope {slope:.3}</text>\n", W / 2.0);
    }
    for (x, y) in &pts {
        s += &format!("<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"steelblue\"/>\n", sx(*x), sy(*y));
    }
    s + "</svg>\n"
}

fn bounds(pts: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    pts.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
