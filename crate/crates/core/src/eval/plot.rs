use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlotError {
    #[error("csv: {0}")]
    Csv(String),
    #[error("column {0:?} not found")]
    MissingColumn(String),
    #[error("no numeric rows to plot")]
    Empty,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Renders columns `ys` against column `x` of a CSV as an SVG line chart.
/// Empty or non-numeric cells are skipped.
pub fn plot_csv(csv_text: &str, x: &str, ys: &[&str], title: &str) -> Result<String, PlotError> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = r.headers().map_err(|e| PlotError::Csv(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PlotError::MissingColumn(name.to_string()))
    };
    let xi = col(x)?;
    let yis = ys.iter().map(|y| col(y)).collect::<Result<Vec<_>, _>>()?;
    let mut series: Vec<Vec<(f64, f64)>> = vec![Vec::new(); ys.len()];
    for rec in r.records() {
        let rec = rec.map_err(|e| PlotError::Csv(e.to_string()))?;
        let Some(xv) = rec.get(xi).and_then(|s| s.parse::<f64>().ok()) else {
            continue;
        };
        for (s, &yi) in series.iter_mut().zip(&yis) {
            if let Some(v) = rec.get(yi).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite()) {
                s.push((xv, v));
            }
        }
    }
    let all: Vec<(f64, f64)> = series.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(PlotError::Empty);
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(a, b) in &all {
        x0 = x0.min(a);
        x1 = x1.max(a);
        y0 = y0.min(b);
        y1 = y1.max(b);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |v: f64| MARGIN + (v - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |v: f64| H - MARGIN - (v - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<polyline points="{m},{t} {m},{b} {r},{b}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    for (v, anchor, xx, yy) in [
        (x0, "start", MARGIN, H - MARGIN + 16.0),
        (x1, "end", W - MARGIN, H - MARGIN + 16.0),
    ] {
        let _ = writeln!(svg, r#"<text x="{xx}" y="{yy}" text-anchor="{anchor}" font-size="11">{}</text>"#, fmt(v));
    }
    for (v, yy) in [(y0, H - MARGIN), (y1, MARGIN)] {
        let _ = writeln!(svg, r#"<text x="{}" y="{yy}" text-anchor="end" font-size="11">{}</text>"#, MARGIN - 4.0, fmt(v));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 12.0, escape(x));
    for (i, (s, name)) in series.iter().zip(ys).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.iter().map(|&(a, b)| format!("{:.2},{:.2}", px(a), py(b))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}" text-anchor="end" font-size="11" fill="{color}">{}</text>"#,
            W - MARGIN,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn fmt(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_one_polyline_per_series() {
        let csv = "step,a,b\n1,0.5,\n2,0.6,0.1\n3,0.7,0.2\n";
        let svg = plot_csv(csv, "step", &["a", "b"], "acc").unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("stroke-width").count(), 2);
    }

    #[test]
    fn missing_column() {
        assert_eq!(plot_csv("x,y\n1,2\n", "x", &["z"], ""), Err(PlotError::MissingColumn("z".into())));
    }
}
