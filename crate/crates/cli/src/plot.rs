//! Plot-ready output: per-figure CSV files (x, one y column per series, an
//! optional yerr column per series) plus a dependency-free SVG rendering.
//! Both are pure functions of their inputs, so emitted files are
//! byte-deterministic.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use echostate::experiment::{fmt_f64, SiAggregate, SweepResult};
use echostate::metrics::Spectrum;

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("invalid figure: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One plotted series; `yerr`, when present, is drawn as vertical error bars.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub yerr: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Log-scale the x axis (the sampling-interval convention).
    pub log_x: bool,
    pub series: Vec<Series>,
}

impl Figure {
    fn validate(&self) -> Result<(), PlotError> {
        if self.series.is_empty() {
            return Err(PlotError::Invalid("figure has no series".into()));
        }
        let xs = &self.series[0].xs;
        for s in &self.series {
            if s.ys.len() != s.xs.len() {
                return Err(PlotError::Invalid(format!(
                    "series '{}' has {} x values but {} y values",
                    s.label,
                    s.xs.len(),
                    s.ys.len()
                )));
            }
            if let Some(e) = &s.yerr {
                if e.len() != s.xs.len() {
                    return Err(PlotError::Invalid(format!(
                        "series '{}' has {} x values but {} error values",
                        s.label,
                        s.xs.len(),
                        e.len()
                    )));
                }
            }
            if s.xs != *xs {
                return Err(PlotError::Invalid(format!(
                    "series '{}' is on a different x grid",
                    s.label
                )));
            }
            if s.label.is_empty() || s.label.contains(',') || s.label.ends_with("_err") {
                return Err(PlotError::Invalid(format!(
                    "series label '{}' is not CSV-safe",
                    s.label
                )));
            }
        }
        if self.x_label.is_empty() || self.x_label.contains(',') {
            return Err(PlotError::Invalid("x label is not CSV-safe".into()));
        }
        Ok(())
    }
}

/// Write the figure as CSV: three comment lines carrying title, axis mode and
/// y label, then a header row, then one row per x value.
pub fn write_figure_csv<W: Write>(mut w: W, fig: &Figure) -> Result<(), PlotError> {
    fig.validate()?;
    writeln!(w, "# title: {}", fig.title)?;
    writeln!(
        w,
        "# x: {} ({})",
        fig.x_label,
        if fig.log_x { "log" } else { "linear" }
    )?;
    writeln!(w, "# y: {}", fig.y_label)?;
    let mut header = fig.x_label.clone();
    for s in &fig.series {
        header.push(',');
        header.push_str(&s.label);
        if s.yerr.is_some() {
            let _ = write!(header, ",{}_err", s.label);
        }
    }
    writeln!(w, "{header}")?;
    for i in 0..fig.series[0].xs.len() {
        let mut row = fmt_f64(fig.series[0].xs[i]);
        for s in &fig.series {
            row.push(',');
            row.push_str(&fmt_f64(s.ys[i]));
            if let Some(e) = &s.yerr {
                row.push(',');
                row.push_str(&fmt_f64(e[i]));
            }
        }
        writeln!(w, "{row}")?;
    }
    Ok(())
}

/// Read a figure CSV produced by [`write_figure_csv`] back into memory.
pub fn read_figure_csv<R: BufRead>(r: R) -> Result<Figure, PlotError> {
    let mut title = String::new();
    let mut y_label = String::new();
    let mut x_label = String::new();
    let mut log_x = false;
    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# title: ") {
            title = rest.to_string();
        } else if let Some(rest) = line.strip_prefix("# x: ") {
            if let Some(stripped) = rest.strip_suffix(" (log)") {
                x_label = stripped.to_string();
                log_x = true;
            } else if let Some(stripped) = rest.strip_suffix(" (linear)") {
                x_label = stripped.to_string();
                log_x = false;
            } else {
                return Err(PlotError::Invalid(format!("bad x comment: {line}")));
            }
        } else if let Some(rest) = line.strip_prefix("# y: ") {
            y_label = rest.to_string();
        } else if line.starts_with('#') {
            continue;
        } else if header.is_none() {
            header = Some(line.split(',').map(str::to_string).collect());
        } else {
            let row = line
                .split(',')
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| PlotError::Invalid(format!("bad number '{v}': {e}")))
                })
                .collect::<Result<Vec<f64>, PlotError>>()?;
            rows.push(row);
        }
    }
    let header = header.ok_or_else(|| PlotError::Invalid("missing header row".into()))?;
    if header.len() < 2 {
        return Err(PlotError::Invalid(
            "header needs an x and a y column".into(),
        ));
    }
    if x_label.is_empty() {
        x_label = header[0].clone();
    }
    for row in &rows {
        if row.len() != header.len() {
            return Err(PlotError::Invalid(format!(
                "row has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
    }
    let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let mut series: Vec<Series> = Vec::new();
    let mut col = 1;
    while col < header.len() {
        let label = header[col].clone();
        let ys: Vec<f64> = rows.iter().map(|r| r[col]).collect();
        col += 1;
        let yerr = if col < header.len() && header[col] == format!("{label}_err") {
            let e: Vec<f64> = rows.iter().map(|r| r[col]).collect();
            col += 1;
            Some(e)
        } else {
            None
        };
        series.push(Series {
            label,
            xs: xs.clone(),
            ys,
            yerr,
        });
    }
    let fig = Figure {
        title,
        x_label,
        y_label,
        log_x,
        series,
    };
    fig.validate()?;
    Ok(fig)
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 560.0;
const M_LEFT: f64 = 78.0;
const M_RIGHT: f64 = 24.0;
const M_TOP: f64 = 42.0;
const M_BOTTOM: f64 = 58.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if s.is_empty() || s == "-" {
            "0".into()
        } else {
            s
        }
    } else {
        format!("{v:.1e}")
    }
}

/// Round a raw step to the nearest 1/2/5 x 10^k not smaller than it.
fn nice_step(raw: f64) -> f64 {
    let mag = 10f64.powf(raw.abs().log10().floor());
    let unit = raw / mag;
    let nice = if unit <= 1.0 {
        1.0
    } else if unit <= 2.0 {
        2.0
    } else if unit <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn linear_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return vec![lo];
    }
    let step = nice_step((hi - lo) / target.max(1) as f64);
    let mut ticks = Vec::new();
    let mut k = (lo / step).ceil() as i64;
    while (k as f64) * step <= hi + step * 1e-9 {
        ticks.push(k as f64 * step);
        k += 1;
    }
    if ticks.is_empty() {
        ticks.push(lo);
    }
    ticks
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn transform(&self, v: f64) -> f64 {
        if self.log {
            v.log10()
        } else {
            v
        }
    }
    fn to_px(&self, v: f64, px_lo: f64, px_hi: f64) -> f64 {
        let t = self.transform(v);
        if self.hi == self.lo {
            return 0.5 * (px_lo + px_hi);
        }
        px_lo + (t - self.lo) / (self.hi - self.lo) * (px_hi - px_lo)
    }
    fn ticks(&self) -> Vec<f64> {
        if self.log {
            // One tick per decade; fall back to the endpoints for sub-decade
            // spans.
            let k_lo = self.lo.ceil() as i64;
            let k_hi = self.hi.floor() as i64;
            if k_lo <= k_hi {
                (k_lo..=k_hi).map(|k| 10f64.powi(k as i32)).collect()
            } else {
                vec![10f64.powf(self.lo), 10f64.powf(self.hi)]
            }
        } else {
            linear_ticks(self.lo, self.hi, 5)
        }
    }
}

/// Render the figure as a standalone SVG document. Non-finite points and
/// error bars are skipped; an entirely non-finite figure still renders its
/// axes.
pub fn render_svg(fig: &Figure) -> Result<String, PlotError> {
    fig.validate()?;
    let log_x = fig.log_x
        && fig
            .series
            .iter()
            .flat_map(|s| s.xs.iter())
            .all(|&x| !x.is_finite() || x > 0.0);

    // Data ranges over finite points (y extended by error bars).
    let mut txs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in &fig.series {
        for (i, &x) in s.xs.iter().enumerate() {
            let y = s.ys[i];
            if !x.is_finite() || !y.is_finite() || (log_x && x <= 0.0) {
                continue;
            }
            txs.push(if log_x { x.log10() } else { x });
            ys.push(y);
            if let Some(e) = &s.yerr {
                if e[i].is_finite() {
                    ys.push(y - e[i]);
                    ys.push(y + e[i]);
                }
            }
        }
    }
    let (tx_lo, tx_hi) = match (
        txs.iter().cloned().reduce(f64::min),
        txs.iter().cloned().reduce(f64::max),
    ) {
        (Some(lo), Some(hi)) if lo < hi => (lo, hi),
        (Some(lo), Some(_)) => (lo - 0.5, lo + 0.5),
        _ => (0.0, 1.0),
    };
    let (y_lo, y_hi) = match (
        ys.iter().cloned().reduce(f64::min),
        ys.iter().cloned().reduce(f64::max),
    ) {
        (Some(lo), Some(hi)) if lo < hi => {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
        (Some(lo), Some(_)) => (lo - 0.5, lo + 0.5),
        _ => (0.0, 1.0),
    };
    let x_axis = Axis {
        lo: tx_lo,
        hi: tx_hi,
        log: log_x,
    };
    let y_axis = Axis {
        lo: y_lo,
        hi: y_hi,
        log: false,
    };
    let (px_l, px_r) = (M_LEFT, SVG_W - M_RIGHT);
    let (px_t, px_b) = (M_TOP, SVG_H - M_BOTTOM);
    let x_px = |v: f64| x_axis.to_px(v, px_l, px_r);
    let y_px = |v: f64| y_axis.to_px(v, px_b, px_t); // inverted: +y is down

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="24" font-family="monospace" font-size="16" text-anchor="middle">{}</text>"#,
        0.5 * (px_l + px_r),
        xml_escape(&fig.title)
    );

    // Grid and ticks.
    for &tv in &x_axis.ticks() {
        let px = x_px(tv);
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.2}" y1="{px_t:.2}" x2="{px:.2}" y2="{px_b:.2}" stroke="#dddddd" stroke-width="1"/>"##
        );
        let _ = writeln!(
            svg,
            r#"<text x="{px:.2}" y="{:.2}" font-family="monospace" font-size="12" text-anchor="middle">{}</text>"#,
            px_b + 18.0,
            xml_escape(&fmt_tick(tv))
        );
    }
    for &tv in &y_axis.ticks() {
        let py = y_px(tv);
        let _ = writeln!(
            svg,
            r##"<line x1="{px_l:.2}" y1="{py:.2}" x2="{px_r:.2}" y2="{py:.2}" stroke="#dddddd" stroke-width="1"/>"##
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="12" text-anchor="end">{}</text>"#,
            px_l - 6.0,
            py + 4.0,
            xml_escape(&fmt_tick(tv))
        );
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{px_l:.2}" y="{px_t:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black" stroke-width="1"/>"#,
        px_r - px_l,
        px_b - px_t
    );
    let x_caption = if log_x {
        format!("{} (log scale)", fig.x_label)
    } else {
        fig.x_label.clone()
    };
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="14" text-anchor="middle">{}</text>"#,
        0.5 * (px_l + px_r),
        SVG_H - 14.0,
        xml_escape(&x_caption)
    );
    let _ = writeln!(
        svg,
        r#"<text x="20" y="{:.2}" font-family="monospace" font-size="14" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
        0.5 * (px_t + px_b),
        0.5 * (px_t + px_b),
        xml_escape(&fig.y_label)
    );

    // Series: error bars first, then lines, then markers.
    for (si, s) in fig.series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if let Some(errs) = &s.yerr {
            for (i, &x) in s.xs.iter().enumerate() {
                let (y, e) = (s.ys[i], errs[i]);
                if !x.is_finite() || !y.is_finite() || !e.is_finite() || (log_x && x <= 0.0) {
                    continue;
                }
                let px = x_px(x);
                let (y0, y1) = (y_px(y - e), y_px(y + e));
                let _ = writeln!(
                    svg,
                    r#"<line x1="{px:.2}" y1="{y0:.2}" x2="{px:.2}" y2="{y1:.2}" stroke="{color}" stroke-width="1"/>"#
                );
                for yy in [y0, y1] {
                    let _ = writeln!(
                        svg,
                        r#"<line x1="{:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="{color}" stroke-width="1"/>"#,
                        px - 4.0,
                        px + 4.0
                    );
                }
            }
        }
        let pts: Vec<String> =
            s.xs.iter()
                .zip(&s.ys)
                .filter(|&(&x, &y)| x.is_finite() && y.is_finite() && !(log_x && x <= 0.0))
                .map(|(&x, &y)| format!("{:.2},{:.2}", x_px(x), y_px(y)))
                .collect();
        if pts.len() >= 2 {
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
        }
        for p in &pts {
            let (cx, cy) = p.split_once(',').expect("formatted above");
            let _ = writeln!(svg, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
    }

    // Legend, top-right inside the plot area.
    for (si, s) in fig.series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let ly = px_t + 16.0 + 18.0 * si as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            px_r - 150.0,
            px_r - 120.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="12">{}</text>"#,
            px_r - 114.0,
            ly + 4.0,
            xml_escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Which summary indicator a figure shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    Mph,
    L1,
    Kld,
    Ip,
    Spectrum,
}

impl PlotKind {
    pub fn stem(self) -> &'static str {
        match self {
            PlotKind::Mph => "mph",
            PlotKind::L1 => "l1",
            PlotKind::Kld => "kld",
            PlotKind::Ip => "ip",
            PlotKind::Spectrum => "spectrum",
        }
    }

    /// The four kinds derived from sweep summaries.
    pub const SUMMARY_KINDS: [PlotKind; 4] =
        [PlotKind::Mph, PlotKind::L1, PlotKind::Kld, PlotKind::Ip];
}

fn column(rows: &[SiAggregate], f: impl Fn(&SiAggregate) -> f64) -> Vec<f64> {
    rows.iter().map(f).collect()
}

/// Build the figure for one summary indicator: x = sampling interval on a
/// log axis, y = bucket mean, yerr = bucket standard deviation.
pub fn summary_figure(rows: &[SiAggregate], kind: PlotKind) -> Result<Figure, PlotError> {
    if rows.is_empty() {
        return Err(PlotError::Invalid("summary has no rows".into()));
    }
    let xs: Vec<f64> = rows.iter().map(|a| a.si).collect();
    let series = |label: &str, y: Vec<f64>, e: Vec<f64>| Series {
        label: label.to_string(),
        xs: xs.clone(),
        ys: y,
        yerr: Some(e),
    };
    let fig = match kind {
        PlotKind::Mph => Figure {
            title: "Mean prediction horizon vs sampling interval".into(),
            x_label: "si".into(),
            y_label: "mean prediction horizon (time units)".into(),
            log_x: true,
            series: vec![
                series(
                    "mph_chi",
                    column(rows, |a| a.mph_mean[0]),
                    column(rows, |a| a.mph_std[0]),
                ),
                series(
                    "mph_psi",
                    column(rows, |a| a.mph_mean[1]),
                    column(rows, |a| a.mph_std[1]),
                ),
                series(
                    "mph_omega",
                    column(rows, |a| a.mph_mean[2]),
                    column(rows, |a| a.mph_std[2]),
                ),
            ],
        },
        PlotKind::L1 => Figure {
            title: "Density L1 distance vs sampling interval".into(),
            x_label: "si".into(),
            y_label: "L1 distance".into(),
            log_x: true,
            series: vec![series(
                "l1",
                column(rows, |a| a.l1_mean),
                column(rows, |a| a.l1_std),
            )],
        },
        PlotKind::Kld => Figure {
            title: "Kullback-Leibler divergence vs sampling interval".into(),
            x_label: "si".into(),
            y_label: "KLD".into(),
            log_x: true,
            series: vec![
                series(
                    "kld_real_auto",
                    column(rows, |a| a.kld_real_auto_mean),
                    column(rows, |a| a.kld_real_auto_std),
                ),
                series(
                    "kld_auto_real",
                    column(rows, |a| a.kld_auto_real_mean),
                    column(rows, |a| a.kld_auto_real_std),
                ),
            ],
        },
        PlotKind::Ip => Figure {
            title: "Tangent inner product vs sampling interval".into(),
            x_label: "si".into(),
            y_label: "mean inner product".into(),
            log_x: true,
            series: vec![series(
                "ip",
                column(rows, |a| a.ip_mean),
                column(rows, |a| a.ip_std),
            )],
        },
        PlotKind::Spectrum => {
            return Err(PlotError::Invalid(
                "spectrum figures are built from series files; use the spectrum subcommand".into(),
            ))
        }
    };
    Ok(fig)
}

/// Overlay figure for one or more amplitude spectra sharing a frequency
/// grid. Grids recovered from CSV timestamps can be a few ULP apart, so the
/// comparison is tolerant and the first spectrum's grid is used for all.
pub fn spectrum_figure(spectra: &[(String, Spectrum)]) -> Result<Figure, PlotError> {
    if spectra.is_empty() {
        return Err(PlotError::Invalid("no spectra given".into()));
    }
    let xs = spectra[0].1.frequencies.clone();
    for (label, s) in spectra {
        let same_grid = s.frequencies.len() == xs.len()
            && s.frequencies
                .iter()
                .zip(&xs)
                .all(|(&a, &b)| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()));
        if !same_grid {
            return Err(PlotError::Invalid(format!(
                "spectrum '{label}' is on a different frequency grid; \
match series length and sampling interval"
            )));
        }
    }
    Ok(Figure {
        title: "Amplitude spectrum".into(),
        x_label: "frequency".into(),
        y_label: "amplitude".into(),
        log_x: false,
        series: spectra
            .iter()
            .map(|(label, s)| Series {
                label: label.clone(),
                xs: xs.clone(),
                ys: s.amplitudes.clone(),
                yerr: None,
            })
            .collect(),
    })
}

/// Write the plot-ready CSV (and, when `with_svg` is set, the SVG) for one
/// indicator into `dir`. Returns the paths written.
pub fn emit_plot_data(
    summary: &SweepResult,
    kind: PlotKind,
    dir: &Path,
    with_svg: bool,
) -> Result<Vec<PathBuf>, PlotError> {
    let fig = summary_figure(&summary.aggregates, kind)?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv_path = dir.join(format!("{}.csv", kind.stem()));
    let mut buf = Vec::new();
    write_figure_csv(&mut buf, &fig)?;
    std::fs::write(&csv_path, buf)?;
    written.push(csv_path);
    if with_svg {
        let svg_path = dir.join(format!("{}.svg", kind.stem()));
        std::fs::write(&svg_path, render_svg(&fig)?)?;
        written.push(svg_path);
    }
    Ok(written)
}
