//! Standalone SVG scatter plots of projected latents.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const SIZE: f64 = 800.0;
const MARGIN: f64 = 60.0;
const RADIUS: f64 = 3.0;

/// Twelve categorical colors; labels beyond twelve reuse them cyclically.
pub const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
];

pub fn color(label: usize) -> &'static str {
    PALETTE[label % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders 2-D points colored by label with a legend listing each label.
pub fn scatter(points: &[[f64; 2]], labels: &[usize], title: &str) -> Result<String> {
    if points.len() != labels.len() {
        return Err(Error::Data("points and labels differ in length".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "scatter" });
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = |a: usize| {
        let s = hi[a] - lo[a];
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };
    let inner = SIZE - 2.0 * MARGIN;
    let px = |v: f64| MARGIN + (v - lo[0]) / span(0) * inner;
    let py = |v: f64| SIZE - MARGIN - (v - lo[1]) / span(1) * inner;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="30" font-family="sans-serif" font-size="18" text-anchor="middle">{}</text>"#,
        SIZE / 2.0,
        escape(title)
    )
    .unwrap();
    writeln!(
        s,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{inner}" height="{inner}" fill="none" stroke="#cccccc"/>"##
    )
    .unwrap();
    for (p, &l) in points.iter().zip(labels) {
        writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{RADIUS}" fill="{}" fill-opacity="0.7"/>"#,
            px(p[0]),
            py(p[1]),
            color(l)
        )
        .unwrap();
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    for (i, l) in present.iter().enumerate() {
        let y = MARGIN + 10.0 + 18.0 * i as f64;
        let x = SIZE - MARGIN - 110.0;
        writeln!(
            s,
            r#"<circle cx="{x}" cy="{y}" r="5" fill="{}"/><text x="{}" y="{}" font-family="sans-serif" font-size="13">condition {l}</text>"#,
            color(*l),
            x + 12.0,
            y + 4.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}
