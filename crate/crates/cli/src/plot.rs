//! Self-contained SVG plots of trajectory, band and loss CSV files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("{path}: missing column '{column}'")]
    MissingColumn { path: String, column: String },
    #[error("{path}, row {row}: {message}")]
    Value { path: String, row: usize, message: String },
    #[error("{path}: no data rows")]
    Empty { path: String },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Trajectory,
    Bands,
    Loss,
}

impl PlotKind {
    pub fn required_columns(self) -> &'static [&'static str] {
        match self {
            PlotKind::Trajectory => &["series", "x", "output", "value"],
            PlotKind::Bands => &["input_0", "output", "mean", "lower", "upper"],
            PlotKind::Loss => &["epoch", "total_loss"],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub x: String,
    pub y: String,
    /// Display names of output indices; falls back to `y<k>`.
    pub outputs: Vec<String>,
}

impl Labels {
    fn output(&self, k: usize) -> String {
        self.outputs.get(k).cloned().unwrap_or_else(|| format!("y{k}"))
    }
}

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 460.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn color(k: usize) -> &'static str {
    COLORS[k % COLORS.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 * (1.0 + lo.abs()) {
            lo -= 0.5;
            hi += 0.5;
        } else {
            let pad = 0.05 * (hi - lo);
            lo -= pad;
            hi += pad;
        }
        Self { lo, hi, log }
    }

    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let (a, b) = (self.lo.ceil() as i32, self.hi.floor() as i32);
            let step = ((b - a) / 6).max(1);
            return (a..=b)
                .step_by(step as usize)
                .map(|e| (10f64.powi(e), format!("1e{e}")))
                .collect();
        }
        (0..=5)
            .map(|i| {
                let v = self.lo + (self.hi - self.lo) * i as f64 / 5.0;
                (v, format!("{v:.3}"))
            })
            .collect()
    }
}

struct Canvas {
    svg: String,
    x: Axis,
    y: Axis,
    legend: Vec<(String, String, bool)>,
}

impl Canvas {
    fn new(x: Axis, y: Axis, labels: &Labels) -> Self {
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let mut c = Self {
            svg,
            x,
            y,
            legend: Vec::new(),
        };
        c.axes(labels);
        c
    }

    fn px(&self, v: f64) -> f64 {
        LEFT + self.x.frac(v) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, v: f64) -> f64 {
        HEIGHT - BOTTOM - self.y.frac(v) * (HEIGHT - TOP - BOTTOM)
    }

    fn axes(&mut self, labels: &Labels) {
        let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
        let _ = writeln!(
            self.svg,
            r#"<g stroke="black" stroke-width="1"><line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"#
        );
        for (v, text) in self.x.ticks() {
            let p = self.px(v);
            let _ = writeln!(
                self.svg,
                r#"<line x1="{p:.2}" y1="{y0}" x2="{p:.2}" y2="{:.2}" stroke="black"/><text x="{p:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                y0 + 5.0,
                y0 + 18.0,
                escape(&text)
            );
        }
        for (v, text) in self.y.ticks() {
            let p = self.py(v);
            let _ = writeln!(
                self.svg,
                r#"<line x1="{:.2}" y1="{p:.2}" x2="{x0}" y2="{p:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                x0 - 5.0,
                x0 - 8.0,
                p + 4.0,
                escape(&text)
            );
        }
        let _ = writeln!(
            self.svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 15.0,
            escape(&labels.x)
        );
        let _ = writeln!(
            self.svg,
            r#"<text transform="translate(20 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (y0 + y1) / 2.0,
            escape(&labels.y)
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, dashed: bool) {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y)))
            .collect();
        let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            self.svg,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.8"{dash}/>"#,
            coords.join(" ")
        );
    }

    fn scatter(&mut self, pts: &[(f64, f64)], fill: &str) {
        for &(x, y) in pts {
            let _ = writeln!(
                self.svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{fill}" fill-opacity="0.8"/>"#,
                self.px(x),
                self.py(y)
            );
        }
    }

    fn band(&mut self, xs: &[f64], lower: &[f64], upper: &[f64], fill: &str) {
        let mut coords: Vec<String> = xs
            .iter()
            .zip(upper)
            .map(|(&x, &u)| format!("{:.2},{:.2}", self.px(x), self.py(u)))
            .collect();
        coords.extend(
            xs.iter()
                .zip(lower)
                .rev()
                .map(|(&x, &l)| format!("{:.2},{:.2}", self.px(x), self.py(l))),
        );
        let _ = writeln!(
            self.svg,
            r#"<polygon points="{}" fill="{fill}" fill-opacity="0.25" stroke="none"/>"#,
            coords.join(" ")
        );
    }

    fn legend_entry(&mut self, text: String, color: &str, dashed: bool) {
        self.legend.push((text, color.to_string(), dashed));
    }

    fn finish(mut self) -> String {
        let x = WIDTH - RIGHT + 15.0;
        for (i, (text, color, dashed)) in self.legend.iter().enumerate() {
            let y = TOP + 10.0 + 18.0 * i as f64;
            let dash = if *dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(
                self.svg,
                r#"<line x1="{x}" y1="{y}" x2="{:.2}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
                x + 22.0,
                x + 28.0,
                y + 4.0,
                escape(text)
            );
        }
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

/// Parsed CSV with header-indexed access.
struct Table {
    path: String,
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path, required: &[&str]) -> Result<Self, PlotError> {
        let p = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| PlotError::Read {
            path: p.clone(),
            message: e.to_string(),
        })?;
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| PlotError::Read {
                path: p.clone(),
                message: e.to_string(),
            })?
            .iter()
            .map(str::to_string)
            .collect();
        for col in required {
            if !header.iter().any(|h| h == col) {
                return Err(PlotError::MissingColumn {
                    path: p,
                    column: col.to_string(),
                });
            }
        }
        let rows = rdr
            .records()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| PlotError::Read {
                path: p.clone(),
                message: e.to_string(),
            })?;
        if rows.is_empty() {
            return Err(PlotError::Empty { path: p });
        }
        Ok(Self { path: p, header, rows })
    }

    fn has(&self, col: &str) -> bool {
        self.header.iter().any(|h| h == col)
    }

    fn col(&self, col: &str) -> usize {
        self.header.iter().position(|h| h == col).expect("column checked")
    }

    fn num(&self, row: usize, col: &str) -> Result<f64, PlotError> {
        let raw = &self.rows[row][self.col(col)];
        raw.trim().parse::<f64>().map_err(|_| PlotError::Value {
            path: self.path.clone(),
            row: row + 1,
            message: format!("column '{col}' is not a number: {raw:?}"),
        })
    }

    fn text(&self, row: usize, col: &str) -> &str {
        &self.rows[row][self.col(col)]
    }
}

fn sorted(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

fn render_trajectory(t: &Table, labels: &Labels) -> Result<String, PlotError> {
    // series -> output -> points
    let mut series: BTreeMap<String, BTreeMap<usize, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in 0..t.rows.len() {
        let k = t.num(r, "output")? as usize;
        series
            .entry(t.text(r, "series").to_string())
            .or_default()
            .entry(k)
            .or_default()
            .push((t.num(r, "x")?, t.num(r, "value")?));
    }
    let all = series.values().flat_map(|m| m.values().flatten());
    let x = Axis::new(all.clone().map(|p| p.0), false);
    let y = Axis::new(all.map(|p| p.1), false);
    let mut c = Canvas::new(x, y, labels);
    for (name, outputs) in &series {
        for (&k, pts) in outputs {
            let col = color(k);
            match name.as_str() {
                "truth" => {
                    c.polyline(&sorted(pts.clone()), col, true);
                    c.legend_entry(format!("{} truth", labels.output(k)), col, true);
                }
                "measurement" => c.scatter(pts, col),
                _ => {
                    c.polyline(&sorted(pts.clone()), col, false);
                    c.legend_entry(format!("{} {name}", labels.output(k)), col, false);
                }
            }
        }
    }
    Ok(c.finish())
}

fn render_bands(t: &Table, labels: &Labels) -> Result<String, PlotError> {
    let with_truth = t.has("truth");
    // output -> (x, mean, lower, upper, truth)
    let mut per: BTreeMap<usize, Vec<[f64; 5]>> = BTreeMap::new();
    for r in 0..t.rows.len() {
        let truth = if with_truth { t.num(r, "truth")? } else { f64::NAN };
        per.entry(t.num(r, "output")? as usize).or_default().push([
            t.num(r, "input_0")?,
            t.num(r, "mean")?,
            t.num(r, "lower")?,
            t.num(r, "upper")?,
            truth,
        ]);
    }
    let rows = per.values().flatten();
    let x = Axis::new(rows.clone().map(|p| p[0]), false);
    let y = Axis::new(rows.flat_map(|p| [p[1], p[2], p[3], p[4]]), false);
    let mut c = Canvas::new(x, y, labels);
    for (&k, pts) in &mut per {
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let col = color(k);
        let xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
        let lower: Vec<f64> = pts.iter().map(|p| p[2]).collect();
        let upper: Vec<f64> = pts.iter().map(|p| p[3]).collect();
        c.band(&xs, &lower, &upper, col);
        c.polyline(&pts.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>(), col, false);
        c.legend_entry(format!("{} mean", labels.output(k)), col, false);
        if with_truth {
            c.polyline(&pts.iter().map(|p| (p[0], p[4])).collect::<Vec<_>>(), col, true);
            c.legend_entry(format!("{} truth", labels.output(k)), col, true);
        }
    }
    Ok(c.finish())
}

fn render_loss(t: &Table, labels: &Labels) -> Result<String, PlotError> {
    let names: Vec<&str> = ["total_loss", "data_loss", "physics_loss"]
        .into_iter()
        .filter(|n| t.has(n))
        .collect();
    let mut curves = Vec::new();
    for n in &names {
        let mut pts = Vec::with_capacity(t.rows.len());
        for r in 0..t.rows.len() {
            pts.push((t.num(r, "epoch")?, t.num(r, n)?));
        }
        curves.push((*n, pts));
    }
    let log = curves.iter().all(|(_, p)| p.iter().all(|q| q.1 > 0.0));
    let x = Axis::new(curves[0].1.iter().map(|p| p.0), false);
    let y = Axis::new(curves.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)), log);
    let mut labels = labels.clone();
    if log {
        labels.y = format!("{} (log scale)", labels.y);
    }
    let mut c = Canvas::new(x, y, &labels);
    for (i, (n, pts)) in curves.iter().enumerate() {
        c.polyline(pts, color(i), false);
        c.legend_entry(n.to_string(), color(i), false);
    }
    Ok(c.finish())
}

/// Renders `csv_path` as an SVG string.
pub fn render(csv_path: &Path, kind: PlotKind, labels: &Labels) -> Result<String, PlotError> {
    let t = Table::read(csv_path, kind.required_columns())?;
    match kind {
        PlotKind::Trajectory => render_trajectory(&t, labels),
        PlotKind::Bands => render_bands(&t, labels),
        PlotKind::Loss => render_loss(&t, labels),
    }
}

pub fn plot(csv_path: &Path, kind: PlotKind, out_svg: &Path, labels: &Labels) -> Result<(), PlotError> {
    let svg = render(csv_path, kind, labels)?;
    std::fs::write(out_svg, svg).map_err(|source| PlotError::Write {
        path: out_svg.display().to_string(),
        source,
    })
}

