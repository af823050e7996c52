//! Report emission as JSON, CSV or standalone SVG.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::format::write_atomic;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "svg" => Ok(Self::Svg),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Json => "json",
            Self::Csv => "csv",
            Self::Svg => "svg",
        }
    }
}

/// Anything that can be written as a table and, optionally, drawn.
pub trait Report: Serialize {
    fn csv_header(&self) -> Vec<String>;
    fn csv_rows(&self) -> Vec<Vec<String>>;

    /// `None` when the report has no natural picture.
    fn svg(&self) -> Option<String> {
        None
    }

    fn is_empty(&self) -> bool {
        self.csv_rows().is_empty()
    }
}

pub fn render_csv<R: Report + ?Sized>(report: &R) -> String {
    let mut out = report.csv_header().join(",");
    out.push('\n');
    for row in report.csv_rows() {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn emit_report<R: Report>(report: &R, path: &Path, format: ReportFormat) -> Result<()> {
    if report.is_empty() {
        return Err(Error::EmptyReport);
    }
    let body = match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            s
        }
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Svg => report
            .svg()
            .ok_or_else(|| Error::Config("report has no SVG rendering".into()))?,
    };
    write_atomic(path, body.as_bytes())
}

pub fn header(columns: &[&str]) -> Vec<String> {
    columns.iter().map(|c| c.to_string()).collect()
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_real(v: f64) -> String {
    format!("{v}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Vertical bar chart; each entry is `(label, height)`.
pub fn svg_bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let top = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12);
    let bw = (w - 2.0 * pad) / bars.len().max(1) as f64;
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = write!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for (i, (label, v)) in bars.iter().enumerate() {
        let bh = (h - 2.0 * pad) * v / top;
        let x = pad + i as f64 * bw;
        let _ = write!(
            s,
            r##"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{bh:.2}" fill="#4a78b5"><title>{}: {}</title></rect>"##,
            h - pad - bh,
            (bw - 1.0).max(0.5),
            escape(label),
            v
        );
    }
    let _ = write!(
        s,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    if let (Some(first), Some(last)) = (bars.first(), bars.last()) {
        let _ = write!(
            s,
            r#"<text x="{pad}" y="{}" font-family="sans-serif" font-size="11">{}</text><text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            h - pad + 15.0,
            escape(&first.0),
            w - pad,
            h - pad + 15.0,
            escape(&last.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Square heat map of a row-major `n×n` grid, one `<rect>` per cell.
pub fn svg_heat_grid(title: &str, n: usize, values: &[f64]) -> String {
    let cell = 16.0;
    let side = n as f64 * cell;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{}" viewBox="0 0 {side} {}">"#,
        side + 24.0,
        side + 24.0
    );
    let _ = write!(
        s,
        r#"<text x="{}" y="16" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        side / 2.0,
        escape(title)
    );
    for (idx, v) in values.iter().enumerate() {
        let (r, c) = (idx / n, idx % n);
        let t = (v - lo) / span;
        let _ = write!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="{cell}" height="{cell}" fill="{}"><title>{v}</title></rect>"#,
            c as f64 * cell,
            24.0 + r as f64 * cell,
            heat_colour(t)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn heat_colour(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * t.sqrt()) as u8;
    let g = (255.0 * t * t) as u8;
    let b = (255.0 * (1.0 - t) * 0.6) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Grayscale images of size `h×w` (values in `[0,1]`) tiled left to right, `cols` per row.
pub fn svg_image_grid(images: &[&[f64]], h: usize, w: usize, cols: usize) -> String {
    let px = 4.0;
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let (tw, th) = (w as f64 * px + 4.0, h as f64 * px + 4.0);
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" shape-rendering="crispEdges">"#,
        cols as f64 * tw,
        rows as f64 * th
    );
    for (k, img) in images.iter().enumerate() {
        let (ox, oy) = ((k % cols) as f64 * tw, (k / cols) as f64 * th);
        for (i, v) in img.iter().take(h * w).enumerate() {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = write!(
                s,
                r##"<rect x="{}" y="{}" width="{px}" height="{px}" fill="#{g:02x}{g:02x}{g:02x}"/>"##,
                ox + (i % w) as f64 * px,
                oy + (i / w) as f64 * px
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Binary PGM (P5) with the images tiled horizontally.
pub fn pgm_strip(images: &[&[f64]], h: usize, w: usize) -> Vec<u8> {
    let width = w * images.len();
    let mut out = format!("P5\n{width} {h}\n255\n").into_bytes();
    for r in 0..h {
        for img in images {
            for c in 0..w {
                out.push((img[r * w + c].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}
