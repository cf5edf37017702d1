//! SVG overlays: the label mask as a grayscale grid with the ground-truth
//! box in green and the predicted box in red.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::io::write_atomic;
use crate::labels::{KeypointBox, Mask};

/// Side length of one mask pixel in SVG units.
pub const CELL: f64 = 20.0;
pub const TRUTH_COLOR: &str = "#00a000";
pub const PRED_COLOR: &str = "#e00000";

fn rect(out: &mut String, b: &KeypointBox, w: f64, h: f64, color: &str, class: &str) {
    writeln!(
        out,
        r#"<rect class="{class}" x="{:.4}" y="{:.4}" width="{:.4}" height="{:.4}" fill="none" stroke="{color}" stroke-width="2"/>"#,
        b.x_min * w,
        b.y_min * h,
        b.width() * w,
        b.height() * h
    )
    .unwrap();
}

/// Renders `mask` with optional truth and prediction outlines. Box
/// coordinates are normalized: x spans columns, y spans rows.
pub fn render_svg(
    mask: &Mask,
    truth: Option<&KeypointBox>,
    pred: Option<&KeypointBox>,
    title: &str,
) -> String {
    let (w, h) = (mask.width() as f64 * CELL, mask.height() as f64 * CELL);
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(out, "<title>{title}</title>").unwrap();
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            let fill = if mask.get(r, c) == 1 {
                "#ffffff"
            } else {
                "#303030"
            };
            writeln!(
                out,
                r##"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#808080" stroke-width="0.5"/>"##,
                c as f64 * CELL,
                r as f64 * CELL
            )
            .unwrap();
        }
    }
    if let Some(b) = truth {
        rect(&mut out, b, w, h, TRUTH_COLOR, "truth");
    }
    if let Some(b) = pred {
        rect(&mut out, b, w, h, PRED_COLOR, "pred");
    }
    out.push_str("</svg>\n");
    out
}

/// `dir/sample_<index>.svg`.
pub fn sample_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("sample_{index}.svg"))
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    write_atomic(path, svg.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rects(svg: &str, class: &str) -> Vec<String> {
        let tag = format!(r#"<rect class="{class}""#);
        svg.lines()
            .filter(|l| l.starts_with(&tag))
            .map(|l| l[tag.len()..].to_string())
            .collect()
    }

    #[test]
    fn perfect_prediction_overlays_exactly() {
        let mut m = Mask::zeros(16, 16);
        m.set(5, 3, 1);
        let b = KeypointBox::new(0.125, 0.25, 0.6875, 0.5625);
        let svg = render_svg(&m, Some(&b), Some(&b), "s");
        let (t, p) = (rects(&svg, "truth"), rects(&svg, "pred"));
        assert_eq!(t.len(), 1);
        let geom = |s: &str| s.split(" fill").next().unwrap().to_string();
        assert_eq!(geom(&t[0]), geom(&p[0]));
        assert!(t[0].contains(r#"x="40.0000" y="80.0000" width="180.0000" height="100.0000""#));
        assert_eq!(svg.matches("<rect").count(), 256 + 2);
        assert_eq!(svg.matches(r##"fill="#ffffff""##).count(), 1);
    }

    #[test]
    fn degenerate_box_is_still_drawn() {
        let m = Mask::zeros(16, 16);
        let b = KeypointBox::new(0.5, 0.25, 0.5, 0.25);
        let svg = render_svg(&m, None, Some(&b), "s");
        let p = rects(&svg, "pred");
        assert_eq!(p.len(), 1);
        assert!(p[0].contains(r#"x="160.0000" y="80.0000" width="0.0000" height="0.0000""#));
    }
}
