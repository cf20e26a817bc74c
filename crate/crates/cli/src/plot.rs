//! Static SVG plots from `results.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tdlab_core::{ErrorReport, StabilityReport};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// MSE against n with every `*_sq` bound column overlaid.
    Mse,
    /// Moment estimate against the envelope, one image per moment order.
    Stability,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Points drawn as violation markers.
    pub markers: Vec<(f64, f64)>,
}

struct LogAxis {
    lo: f64,
    hi: f64,
}

impl LogAxis {
    fn fit(values: impl Iterator<Item = f64>) -> Option<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| *v > 0.0 && v.is_finite()) {
            lo = lo.min(v.log10());
            hi = hi.max(v.log10());
        }
        if !lo.is_finite() {
            return None;
        }
        let span = (hi - lo).max(1e-3);
        let pad = 0.05 * span;
        let mid = 0.5 * (hi + lo);
        Some(Self { lo: mid - span / 2.0 - pad, hi: mid + span / 2.0 + pad })
    }

    fn frac(&self, v: f64) -> f64 {
        (v.log10() - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<f64> {
        for mantissas in [&[1.0][..], &[1.0, 2.0, 5.0], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]] {
            let mut t = Vec::new();
            for k in self.lo.floor() as i32..=self.hi.ceil() as i32 {
                for m in mantissas {
                    let v = m * 10f64.powi(k);
                    let l = v.log10();
                    if l >= self.lo && l <= self.hi {
                        t.push(v);
                    }
                }
            }
            if t.len() >= 3 {
                return t;
            }
        }
        // narrow range: five evenly spaced ticks, rounded to 4 significant digits
        let inner = (self.hi - self.lo) / 1.1;
        let start = self.lo + 0.05 * inner;
        (0..5)
            .map(|i| {
                let v = 10f64.powf(start + inner * f64::from(i) / 4.0);
                let scale = 10f64.powi(3 - v.log10().floor() as i32);
                (v * scale).round() / scale
            })
            .collect()
    }
}

fn tick_label(v: f64) -> String {
    if (1e-3..1e5).contains(&v.abs()) {
        let s = format!("{v:.5}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.1e}").replace(".0e", "e")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders a log-log figure. Nonpositive points are skipped. Returns `None`
/// when nothing is drawable.
pub fn render_svg(fig: &Figure) -> Option<String> {
    let all = || fig.series.iter().flat_map(|s| s.points.iter()).chain(fig.markers.iter());
    let xa = LogAxis::fit(all().map(|p| p.0))?;
    let ya = LogAxis::fit(all().map(|p| p.1))?;
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let px = |x: f64| LEFT + xa.frac(x) * pw;
    let py = |y: f64| TOP + (1.0 - ya.frac(y)) * ph;
    let ok = |p: &&(f64, f64)| p.0 > 0.0 && p.1 > 0.0 && p.0.is_finite() && p.1.is_finite();

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="13">{}</text>"#, LEFT + pw / 2.0, escape(&fig.title));
    let _ = writeln!(s, r#"<g class="grid" stroke="rgb(221,221,221)" stroke-width="1">"#);
    let (xt, yt) = (xa.ticks(), ya.ticks());
    for &t in &xt {
        let _ = writeln!(s, r#"<line x1="{0:.2}" y1="{TOP:.2}" x2="{0:.2}" y2="{1:.2}"/>"#, px(t), TOP + ph);
    }
    for &t in &yt {
        let _ = writeln!(s, r#"<line x1="{LEFT:.2}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}"/>"#, py(t), LEFT + pw);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#);
    for &t in &xt {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, px(t), TOP + ph + 16.0, tick_label(t));
    }
    for &t in &yt {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, py(t) + 4.0, tick_label(t));
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 12.0, escape(&fig.x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0:.2}" text-anchor="middle" transform="rotate(-90 16 {0:.2})">{1}</text>"#,
        TOP + ph / 2.0,
        escape(&fig.y_label)
    );
    for (i, ser) in fig.series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser.points.iter().filter(ok).map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let dash = if ser.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(s, r#"<g class="series" data-name="{}">"#, escape(&ser.name));
        if pts.len() > 1 {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#, pts.join(" "));
        }
        for p in &pts {
            let (x, y) = p.split_once(',').expect("pair");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(s, "</g>");
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"{dash}/>"#, lx + 24.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 30.0, ly + 4.0, escape(&ser.name));
    }
    for m in fig.markers.iter().filter(ok) {
        let (x, y) = (px(m.0), py(m.1));
        let _ = writeln!(
            s,
            r#"<path class="violation" d="M{:.2},{:.2} L{:.2},{:.2} M{:.2},{:.2} L{:.2},{:.2}" stroke="red" stroke-width="2.5"/>"#,
            x - 6.0,
            y - 6.0,
            x + 6.0,
            y + 6.0,
            x - 6.0,
            y + 6.0,
            x + 6.0,
            y - 6.0
        );
    }
    let _ = writeln!(s, "</svg>");
    Some(s)
}

fn format_err(msg: impl Into<String>) -> CliError {
    CliError::Core(tdlab_core::Error::Format(msg.into()))
}

fn parse_opt(field: &str, col: &str, line: usize) -> Result<Option<f64>, CliError> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| format_err(format!("line {line}: column {col} holds {field:?}")))
}

/// Builds the figures for a results file without writing anything.
pub fn figures_from_csv(path: &Path, kind: PlotKind) -> Result<Vec<(String, Figure)>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| format_err(e.to_string()))?;
    let header: Vec<String> = rdr.headers().map_err(|e| format_err(e.to_string()))?.iter().map(str::to_string).collect();
    let rows: Vec<csv::StringRecord> =
        rdr.records().collect::<Result<_, _>>().map_err(|e| format_err(e.to_string()))?;
    let col = |name: &str| header.iter().position(|h| h == name);
    match kind {
        PlotKind::Mse => {
            let base: Vec<&str> = ErrorReport::CSV_HEADER.split(',').collect();
            if header.len() < base.len() || header[..base.len()] != base[..] || header[base.len()..].iter().any(|h| !h.ends_with("_sq")) {
                return Err(format_err(format!("{}: header does not match the MSE report schema", path.display())));
            }
            if rows.is_empty() {
                return Ok(Vec::new());
            }
            let n_col = col("n").expect("n");
            let mut series: Vec<Series> = std::iter::once("mse")
                .chain(header[base.len()..].iter().map(String::as_str))
                .map(|name| Series { name: name.to_string(), points: Vec::new(), dashed: name != "mse" })
                .collect();
            for (i, r) in rows.iter().enumerate() {
                let n = parse_opt(&r[n_col], "n", i + 2)?.ok_or_else(|| format_err("missing n"))?;
                for s in &mut series {
                    let c = col(&s.name).expect("column");
                    if let Some(v) = parse_opt(&r[c], &s.name, i + 2)? {
                        s.points.push((n, v));
                    }
                }
            }
            Ok(vec![(
                "mse.svg".to_string(),
                Figure {
                    title: "Tail-averaged TD error".into(),
                    x_label: "n".into(),
                    y_label: "E||theta_bar - theta*||^2 (Sigma_phi norm)".into(),
                    series,
                    markers: Vec::new(),
                },
            )])
        }
        PlotKind::Stability => {
            if header.join(",") != StabilityReport::CSV_HEADER {
                return Err(format_err(format!("{}: header does not match the stability report schema", path.display())));
            }
            let mut by_p: BTreeMap<u32, (Vec<(f64, f64)>, Vec<(f64, f64)>, Vec<(f64, f64)>)> = BTreeMap::new();
            for (i, r) in rows.iter().enumerate() {
                let line = i + 2;
                let p: u32 = r[0].parse().map_err(|_| format_err(format!("line {line}: bad p")))?;
                let get = |c: usize, name: &str| parse_opt(&r[c], name, line)?.ok_or_else(|| format_err(format!("line {line}: missing {name}")));
                let n = get(2, "n")?;
                let est = get(3, "estimate")?;
                let env = get(5, "envelope")?;
                let e = by_p.entry(p).or_default();
                e.0.push((n, est));
                e.1.push((n, env));
                match &r[6] {
                    "1" => e.2.push((n, est)),
                    "0" => {}
                    other => return Err(format_err(format!("line {line}: violation_flag {other:?}"))),
                }
            }
            Ok(by_p
                .into_iter()
                .map(|(p, (est, env, viol))| {
                    (
                        format!("stability_p{p}.svg"),
                        Figure {
                            title: format!("Random product moment, p = {p}"),
                            x_label: "n".into(),
                            y_label: format!("E^(1/{p}) ||Gamma_(1:n) u||^{p}"),
                            series: vec![
                                Series { name: "estimate".into(), points: est, dashed: false },
                                Series { name: "envelope".into(), points: env, dashed: true },
                            ],
                            markers: viol,
                        },
                    )
                })
                .collect())
        }
    }
}

/// Writes one SVG per figure into `out_dir`. Empty results give no image and
/// a warning.
pub fn emit_plots(results: &Path, kind: PlotKind, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let figs = figures_from_csv(results, kind)?;
    let mut written = Vec::new();
    for (name, fig) in figs {
        match render_svg(&fig) {
            Some(svg) => {
                let p = out_dir.join(name);
                std::fs::write(&p, svg)?;
                written.push(p);
            }
            None => log::warn!("{name}: no positive values to plot"),
        }
    }
    if written.is_empty() {
        log::warn!("{}: no rows to plot, no image written", results.display());
    }
    Ok(written)
}
