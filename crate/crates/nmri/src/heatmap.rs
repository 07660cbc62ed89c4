// SPDX-License-Identifier: MIT OR Apache-2.0

//! Standalone SVG heatmaps of grids and traces.

use std::fmt::Write as _;
use std::str::FromStr;

use nmri_core::clinic::RobustnessProfile;
use nmri_core::scan_func::{column_label, CausalTraceResult, ImportanceGrid};
use serde::{Deserialize, Serialize};

use crate::api::ResultDocument;
use crate::{Error, Result};

const CELL_W: usize = 28;
const CELL_H: usize = 20;
const LEFT: usize = 150;
const TOP: usize = 40;
const BOTTOM: usize = 70;
const LEGEND_W: usize = 90;
const LEGEND_STEPS: usize = 16;
const MISSING: &str = "#3060c0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Palette {
    /// Grayscale for the lower half of the scale, hot colors above it.
    #[default]
    GrayHot,
    Gray,
    Hot,
}

impl Palette {
    pub fn name(self) -> &'static str {
        match self {
            Palette::GrayHot => "gray-hot",
            Palette::Gray => "gray",
            Palette::Hot => "hot",
        }
    }

    fn stops(self) -> &'static [(f64, [u8; 3])] {
        match self {
            Palette::GrayHot => &[
                (0.0, [0, 0, 0]),
                (0.5, [128, 128, 128]),
                (0.75, [255, 0, 0]),
                (0.9, [255, 255, 0]),
                (1.0, [255, 255, 255]),
            ],
            Palette::Gray => &[(0.0, [0, 0, 0]), (1.0, [255, 255, 255])],
            Palette::Hot => &[(0.0, [0, 0, 0]), (0.4, [255, 0, 0]), (0.8, [255, 255, 0]), (1.0, [255, 255, 255])],
        }
    }

    /// Color at `t ∈ [0, 1]`, piecewise linear between stops.
    pub fn color(self, t: f64) -> String {
        let t = t.clamp(0.0, 1.0);
        let stops = self.stops();
        let i = stops.iter().rposition(|(s, _)| *s <= t).unwrap_or(0).min(stops.len() - 2);
        let ((t0, c0), (t1, c1)) = (stops[i], stops[i + 1]);
        let f = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let mix = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * f).round() as u8;
        format!("#{:02x}{:02x}{:02x}", mix(c0[0], c1[0]), mix(c0[1], c1[1]), mix(c0[2], c1[2]))
    }
}

impl FromStr for Palette {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Palette::GrayHot, Palette::Gray, Palette::Hot]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown palette `{s}` (gray-hot, gray, hot)")))
    }
}

/// A rectangular grid with axis labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub title: String,
    pub row_axis: String,
    pub col_axis: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `[row][col]`.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorScale {
    pub min: f64,
    pub max: f64,
    pub palette: Palette,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapDocument {
    pub scale: ColorScale,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: usize,
    pub svg: String,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c if c.is_control() => out.push_str(&format!("\\x{:02x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        v.to_string()
    }
}

pub fn render_heatmap(grid: &Grid, palette: Palette) -> Result<HeatmapDocument> {
    let n_rows = grid.values.len();
    let n_cols = grid.values.first().map_or(0, Vec::len);
    if n_rows == 0 || n_cols == 0 {
        return Err(Error::Core(nmri_core::Error::EmptyInput("heatmap grid has no cells".into())));
    }
    if grid.values.iter().any(|r| r.len() != n_cols) {
        return Err(Error::Usage("heatmap grid is not rectangular".into()));
    }
    if grid.rows.len() != n_rows || grid.cols.len() != n_cols {
        return Err(Error::Usage("heatmap labels do not match the grid shape".into()));
    }
    let finite = grid.values.iter().flatten().copied().filter(|v| v.is_finite());
    let (min, max) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (min, max) = if min.is_finite() { (min, max) } else { (0.0, 0.0) };
    let scale = |v: f64| if max > min { (v - min) / (max - min) } else { 0.0 };

    let width = LEFT + n_cols * CELL_W + LEGEND_W;
    let height = TOP + (n_rows * CELL_H).max(LEGEND_STEPS * 8) + BOTTOM;
    let mut svg = String::new();
    let w = &mut svg;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(
        w,
        r#"<metadata>{{"palette":"{}","min":{},"max":{},"rows":{n_rows},"cols":{n_cols}}}</metadata>"#,
        palette.name(),
        fmt_value(min),
        fmt_value(max)
    );
    let _ = writeln!(w, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##);
    let _ = writeln!(w, r#"<text x="{LEFT}" y="16" font-size="12">{}</text>"#, escape(&grid.title));
    let _ = writeln!(w, r#"<text x="4" y="{}">{}</text>"#, TOP - 6, escape(&grid.row_axis));
    for (r, label) in grid.rows.iter().enumerate() {
        let y = TOP + r * CELL_H + CELL_H / 2 + 4;
        let _ = writeln!(w, r#"<text class="row-label" x="{}" y="{y}" text-anchor="end">{}</text>"#, LEFT - 4, escape(label));
    }
    for (c, label) in grid.cols.iter().enumerate() {
        let x = LEFT + c * CELL_W + CELL_W / 2;
        let y = TOP + n_rows * CELL_H + 6;
        let _ = writeln!(
            w,
            r#"<text class="col-label" x="{x}" y="{y}" transform="rotate(60 {x} {y})">{}</text>"#,
            escape(label)
        );
    }
    let _ = writeln!(
        w,
        r#"<text x="{LEFT}" y="{}">{}</text>"#,
        TOP + n_rows * CELL_H + BOTTOM - 4,
        escape(&grid.col_axis)
    );
    for (r, row) in grid.values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let fill = if v.is_finite() { palette.color(scale(v)) } else { MISSING.to_string() };
            let _ = writeln!(
                w,
                r#"<rect class="cell" x="{}" y="{}" width="{CELL_W}" height="{CELL_H}" fill="{fill}"><title>{} / {}: {}</title></rect>"#,
                LEFT + c * CELL_W,
                TOP + r * CELL_H,
                escape(&grid.rows[r]),
                escape(&grid.cols[c]),
                fmt_value(v)
            );
        }
    }
    let lx = LEFT + n_cols * CELL_W + 16;
    let step_h = 8;
    let _ = writeln!(w, r#"<g class="legend">"#);
    for i in 0..LEGEND_STEPS {
        let t = 1.0 - i as f64 / (LEGEND_STEPS - 1) as f64;
        let _ = writeln!(
            w,
            r#"<rect class="legend-step" x="{lx}" y="{}" width="14" height="{step_h}" fill="{}"/>"#,
            TOP + i * step_h,
            palette.color(t)
        );
    }
    let _ = writeln!(w, r#"<text x="{}" y="{}">{}</text>"#, lx + 18, TOP + 8, fmt_value(max));
    let _ = writeln!(w, r#"<text x="{}" y="{}">{}</text>"#, lx + 18, TOP + LEGEND_STEPS * step_h, fmt_value(min));
    let _ = writeln!(w, "</g>");
    let _ = writeln!(w, "</svg>");

    Ok(HeatmapDocument {
        scale: ColorScale { min, max, palette },
        rows: grid.rows.clone(),
        cols: grid.cols.clone(),
        cells: n_rows * n_cols,
        svg,
    })
}

fn token_labels(ids: &[u32], text: Option<&Vec<String>>) -> Vec<String> {
    ids.iter()
        .enumerate()
        .map(|(i, id)| match text.and_then(|t| t.get(i)) {
            Some(s) => format!("{i}:{s}"),
            None => format!("{i}:{id}"),
        })
        .collect()
}

fn field<T: serde::de::DeserializeOwned>(doc: &ResultDocument, key: &str) -> Result<T> {
    let v = doc
        .result
        .get(key)
        .ok_or_else(|| Error::parse("result document", format!("no `{key}` in a {} result", doc.kind)))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::parse("result document", e))
}

/// Extracts the renderable grid of a dti, trace, fmri or sweep result.
pub fn grid_from_document(doc: &ResultDocument) -> Result<Grid> {
    let parse = |e: serde_json::Error| Error::parse("result document", e);
    match doc.kind.as_str() {
        "dti" => {
            let g: ImportanceGrid = field(doc, "grid")?;
            let text: Option<Vec<String>> = field(doc, "token_text")?;
            let cols = match g.granularity {
                nmri_core::scan_func::Granularity::PerPosition => token_labels(g.tokens.ids(), text.as_ref()),
                nmri_core::scan_func::Granularity::WholeSite => g.columns.iter().map(column_label).collect(),
            };
            Ok(Grid {
                title: format!("DTI importance (p_clean {:.4})", g.p_clean()),
                row_axis: "site".into(),
                col_axis: "position".into(),
                rows: g.sites.iter().map(|s| s.describe()).collect(),
                cols,
                values: g.importance,
            })
        }
        "trace" => {
            let t: CausalTraceResult = serde_json::from_value(doc.result.clone()).map_err(parse)?;
            Ok(Grid {
                title: format!("Recovery for token {} (p_clean {:.4}, p_corrupt {:.4})", t.target, t.p_clean, t.p_corrupt),
                row_axis: "site".into(),
                col_axis: "position".into(),
                rows: t.sites.iter().map(|s| s.describe()).collect(),
                cols: token_labels(t.corrupt_tokens.ids(), None),
                values: t.recovery,
            })
        }
        "fmri" => {
            let map: nmri_core::scan_func::FmriMap = field(doc, "map")?;
            let text: Option<Vec<String>> = field(doc, "token_text")?;
            Ok(Grid {
                title: "Residual stream norm".into(),
                row_axis: "layer".into(),
                col_axis: "position".into(),
                rows: (0..map.resid_norms.len()).map(|l| format!("blocks.{l}")).collect(),
                cols: token_labels(map.tokens.ids(), text.as_ref()),
                values: map.resid_norms,
            })
        }
        "sweep" => {
            let p: RobustnessProfile = serde_json::from_value(doc.result.clone()).map_err(parse)?;
            let cols: Vec<String> = p.plan.modes.iter().map(|m| m.label()).collect();
            let mut rows: Vec<String> = Vec::new();
            let mut values: Vec<Vec<f64>> = Vec::new();
            for e in &p.entries {
                let site = e.site.describe();
                if rows.last() != Some(&site) {
                    rows.push(site);
                    values.push(Vec::with_capacity(cols.len()));
                }
                values.last_mut().expect("row pushed").push(e.delta.delta_l);
            }
            Ok(Grid {
                title: "Perturbation sensitivity (ΔL)".into(),
                row_axis: "site".into(),
                col_axis: "mode".into(),
                rows,
                cols,
                values,
            })
        }
        other => Err(Error::Usage(format!("a {other} result has no heatmap; render dti, trace, fmri or sweep results"))),
    }
}
