use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::ExperimentResult;
use crate::error::Result;

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// One row per cell: `grid,seed,error,<metrics…>` with 17 significant
/// digits; missing values are empty.
pub fn results_csv(result: &ExperimentResult) -> String {
    let mut names: Vec<&str> = result.cells.iter().flat_map(|c| c.metrics.keys().map(String::as_str)).collect();
    names.sort_unstable();
    names.dedup();
    let mut out = String::from("grid,seed,error");
    for n in &names {
        let _ = write!(out, ",{n}");
    }
    out.push('\n');
    for c in &result.cells {
        let err = c.error.as_deref().unwrap_or("").replace(['"', ',', '\n'], " ");
        let _ = write!(out, "{:.16e},{},{}", c.grid, c.seed, err);
        for n in &names {
            match c.metrics.get(*n) {
                Some(v) => {
                    let _ = write!(out, ",{v:.16e}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

fn fmt(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" { "0.0000".into() } else { s }
}

/// Line chart of the kind's plotted metrics: mean ± standard error per grid
/// point. The x axis is logarithmic when the grid is positive and spans
/// more than a factor of 20.
pub fn svg_chart(result: &ExperimentResult) -> String {
    let kind = result.config.kind;
    let summary = result.summary();
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 70.0, 160.0, 30.0, 50.0);
    let xs: Vec<f64> = summary.iter().map(|p| p.grid).collect();
    let log_x = xs.iter().all(|x| *x > 0.0) && xs.iter().cloned().fold(0.0, f64::max) / xs.iter().cloned().fold(f64::INFINITY, f64::min) > 20.0;
    let tx = |x: f64| if log_x { x.ln() } else { x };
    let (xmin, xmax) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(tx(*x)), b.max(tx(*x))));
    let mut ylo = f64::INFINITY;
    let mut yhi = f64::NEG_INFINITY;
    for p in &summary {
        for m in kind.plotted() {
            if let Some(a) = p.metrics.get(*m) {
                ylo = ylo.min(a.mean - a.se);
                yhi = yhi.max(a.mean + a.se);
            }
        }
    }
    if !ylo.is_finite() {
        (ylo, yhi) = (0.0, 1.0);
    }
    if yhi - ylo < 1e-12 {
        (ylo, yhi) = (ylo - 0.5, yhi + 0.5);
    }
    let pad = 0.05 * (yhi - ylo);
    (ylo, yhi) = (ylo - pad, yhi + pad);
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let px = |x: f64| left + (tx(x) - xmin) / xspan * (w - left - right);
    let py = |y: f64| top + (yhi - y) / (yhi - ylo) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, (w - right + left) / 2.0, kind.name());
    let (x0, x1, y0, y1) = (left, w - right, top, h - bottom);
    let _ = writeln!(s, r#"<path d="M{x0} {y0} L{x0} {y1} L{x1} {y1}" stroke="black" fill="none"/>"#);
    if ylo < 0.0 && yhi > 0.0 {
        let z = py(0.0);
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{z:.2}" x2="{x1}" y2="{z:.2}" stroke="#999" stroke-dasharray="4 3"/>"##);
    }
    for x in &xs {
        let p = px(*x);
        let _ = writeln!(s, r#"<line x1="{p:.2}" y1="{y1}" x2="{p:.2}" y2="{}" stroke="black"/>"#, y1 + 4.0);
        let _ = writeln!(s, r#"<text x="{p:.2}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#, y1 + 16.0, trim(*x));
    }
    for i in 0..=4 {
        let v = ylo + (yhi - ylo) * i as f64 / 4.0;
        let p = py(v);
        let _ = writeln!(s, r#"<line x1="{}" y1="{p:.2}" x2="{x0}" y2="{p:.2}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#, x0 - 6.0, p + 3.0, fmt(v));
    }
    for (j, m) in kind.plotted().iter().enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        let pts: Vec<(f64, f64, f64)> =
            summary.iter().filter_map(|p| p.metrics.get(*m).map(|a| (p.grid, a.mean, a.se))).collect();
        if pts.is_empty() {
            continue;
        }
        let path: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(i, (x, y, _))| format!("{}{:.2} {:.2}", if i == 0 { "M" } else { "L" }, px(*x), py(*y)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, path.join(" "));
        for (x, y, se) in &pts {
            let (cx, lo, hi) = (px(*x), py(y - se), py(y + se));
            let _ = writeln!(s, r#"<line x1="{cx:.2}" y1="{lo:.2}" x2="{cx:.2}" y2="{hi:.2}" stroke="{color}"/>"#);
            let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, py(*y));
        }
        let ly = top + 14.0 + 16.0 * j as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, x1 + 10.0, x1 + 28.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{m}</text>"#, x1 + 32.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

fn trim(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Writes `results.csv`, `summary.json` and `<kind>.svg` into `dir`.
pub fn render(result: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), results_csv(result))?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&result.summary())?)?;
    fs::write(dir.join(format!("{}.svg", result.config.kind.name())), svg_chart(result))?;
    Ok(())
}
