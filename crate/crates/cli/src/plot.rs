//! SVG line charts and the C index table from a results CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
pub struct Row {
    pub method: String,
    pub landmark: f64,
    pub horizon: String,
    pub metric: String,
    pub mean: String,
    pub sd: String,
}

fn num(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn read_results(path: &Path) -> Result<Vec<Row>, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    rdr.deserialize().collect::<Result<Vec<Row>, _>>().map_err(|e| format!("{}: {e}", path.display()))
}

const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

const W: f64 = 680.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn metric_title(metric: &str) -> &str {
    match metric {
        "tdauc" => "Time-dependent AUC",
        "brier" => "Brier score",
        other => other,
    }
}

fn methods_in_order(rows: &[Row]) -> Vec<String> {
    let mut seen = Vec::new();
    for r in rows {
        if !seen.contains(&r.method) {
            seen.push(r.method.clone());
        }
    }
    seen
}

fn landmarks_in_order(rows: &[Row]) -> Vec<f64> {
    let mut seen: Vec<f64> = Vec::new();
    for r in rows {
        if !seen.contains(&r.landmark) {
            seen.push(r.landmark);
        }
    }
    seen
}

/// One chart: a line per method over horizons, broken wherever a value is
/// missing.
pub fn line_chart(metric: &str, landmark: f64, series: &[(String, Vec<(f64, Option<f64>)>)]) -> String {
    let xs: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().filter_map(|q| q.1)).collect();
    let (mut x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let (mut y0, mut y1) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.08).max(0.01);
    y0 -= pad;
    y1 += pad;
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}, landmark {}</text>"#,
        LEFT + pw / 2.0,
        metric_title(metric),
        landmark
    );
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);

    let mut hz: Vec<f64> = xs.clone();
    hz.sort_by(f64::total_cmp);
    hz.dedup();
    for h in &hz {
        let x = sx(*h);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, TOP + ph, TOP + ph + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{h}</text>"#, TOP + ph + 18.0);
    }
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/>"#, LEFT - 5.0);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#, LEFT - 8.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Horizon (years)</text>"#, LEFT + pw / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        metric_title(metric)
    );

    for (m, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[m % PALETTE.len()];
        let dash = if m >= PALETTE.len() { r#" stroke-dasharray="6 3""# } else { "" };
        let mut d = String::new();
        let mut pen_down = false;
        for &(x, y) in points {
            match y {
                Some(y) => {
                    let _ = write!(d, "{}{:.2} {:.2} ", if pen_down { "L" } else { "M" }, sx(x), sy(y));
                    pen_down = true;
                }
                None => pen_down = false,
            }
        }
        if !d.is_empty() {
            let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#, d.trim_end());
        }
        for &(x, y) in points {
            if let Some(y) = y {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
            }
        }
        let ly = TOP + 10.0 + 20.0 * m as f64;
        let lx = W - RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"{dash}/>"#,
            lx + 25.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 32.0, ly + 4.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Methods by landmarks grid of "mean (sd)" C index cells.
pub fn cindex_table(methods: &[String], landmarks: &[f64], cells: &BTreeMap<(String, u64), (Option<f64>, Option<f64>)>) -> String {
    let cw = 130.0;
    let first = 170.0;
    let rh = 24.0;
    let w = first + cw * landmarks.len() as f64 + 20.0;
    let h = 60.0 + rh * (methods.len() as f64 + 1.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="10" y="22" font-size="14">C index (sd) by landmark</text>"#);
    let y_head = 50.0;
    let _ = writeln!(s, r#"<text x="10" y="{y_head}" font-weight="bold">Method</text>"#);
    for (j, l) in landmarks.iter().enumerate() {
        let x = first + cw * j as f64;
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{y_head}" font-weight="bold">{l}</text>"#);
    }
    let _ = writeln!(s, r#"<line x1="10" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#, y_head + 6.0, w - 10.0, y_head + 6.0);
    for (i, m) in methods.iter().enumerate() {
        let y = y_head + rh * (i as f64 + 1.0);
        let _ = writeln!(s, r#"<text x="10" y="{y:.2}">{}</text>"#, esc(m));
        for (j, l) in landmarks.iter().enumerate() {
            let x = first + cw * j as f64;
            let cell = match cells.get(&(m.clone(), l.to_bits())) {
                Some((Some(mean), Some(sd))) => format!("{mean:.3} ({sd:.3})"),
                Some((Some(mean), None)) => format!("{mean:.3}"),
                _ => "-".to_string(),
            };
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{y:.2}">{cell}</text>"#);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Renders every chart; returns (file name, contents) pairs in a fixed order.
pub fn render_all(rows: &[Row]) -> Vec<(String, String)> {
    let methods = methods_in_order(rows);
    let landmarks = landmarks_in_order(rows);
    let mut out = Vec::new();
    for metric in ["tdauc", "brier"] {
        for &l in &landmarks {
            let subset: Vec<&Row> = rows.iter().filter(|r| r.metric == metric && r.landmark == l).collect();
            if subset.is_empty() {
                continue;
            }
            let series: Vec<(String, Vec<(f64, Option<f64>)>)> = methods
                .iter()
                .map(|m| {
                    let mut pts: Vec<(f64, Option<f64>)> = subset
                        .iter()
                        .filter(|r| &r.method == m)
                        .filter_map(|r| num(&r.horizon).map(|h| (h, num(&r.mean))))
                        .collect();
                    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                    (m.clone(), pts)
                })
                .filter(|(_, p)| !p.is_empty())
                .collect();
            out.push((format!("{metric}_landmark_{l}.svg"), line_chart(metric, l, &series)));
        }
    }
    let mut cells = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == "cindex") {
        cells.insert((r.method.clone(), r.landmark.to_bits()), (num(&r.mean), num(&r.sd)));
    }
    if !cells.is_empty() {
        out.push(("cindex_table.svg".to_string(), cindex_table(&methods, &landmarks, &cells)));
    }
    out
}
