//! Bird's-eye-view SVG plots.
//!
//! The view spans x in [-40, 40] m (right) and z in [0, 80] m (forward, drawn
//! upward) at 10 px per meter, giving an 800x800 canvas.

use crate::geometry::{bev_polygon, Box3D};
use std::fmt::Write;

pub const PIXELS_PER_METER: f64 = 10.0;
pub const VIEW_X_MIN: f64 = -40.0;
pub const VIEW_X_MAX: f64 = 40.0;
pub const VIEW_Z_MAX: f64 = 80.0;
const GRID_STEP: f64 = 10.0;

/// Maps camera-frame ground coordinates to SVG pixels.
pub fn to_pixels(x: f64, z: f64) -> (f64, f64) {
    (
        (x - VIEW_X_MIN) * PIXELS_PER_METER,
        (VIEW_Z_MAX - z) * PIXELS_PER_METER,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotBox {
    pub box3d: Box3D,
    pub class: String,
    pub uncertainty: Option<f64>,
}

fn points(b: &Box3D) -> String {
    bev_polygon(b)
        .iter()
        .map(|&(x, z)| {
            let (px, py) = to_pixels(x, z);
            format!("{px:.3},{py:.3}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// SVG 1.1 document: ground grid, ground truth dashed, detections solid with
/// their uncertainty printed next to them.
pub fn bev_svg(dets: &[PlotBox], gts: &[Box3D]) -> String {
    let width = (VIEW_X_MAX - VIEW_X_MIN) * PIXELS_PER_METER;
    let height = VIEW_Z_MAX * PIXELS_PER_METER;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        s,
        r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##
    );
    let _ = writeln!(s, r##"<g id="grid" stroke="#d0d0d0" stroke-width="1">"##);
    let steps = ((VIEW_X_MAX - VIEW_X_MIN) / GRID_STEP) as usize;
    for k in 0..=steps {
        let x = VIEW_X_MIN + k as f64 * GRID_STEP;
        let (px, _) = to_pixels(x, 0.0);
        let _ = writeln!(s, r#"<line x1="{px}" y1="0" x2="{px}" y2="{height}"/>"#);
    }
    for k in 0..=((VIEW_Z_MAX / GRID_STEP) as usize) {
        let (_, py) = to_pixels(0.0, k as f64 * GRID_STEP);
        let _ = writeln!(s, r#"<line x1="0" y1="{py}" x2="{width}" y2="{py}"/>"#);
    }
    s.push_str("</g>\n");
    let _ = writeln!(
        s,
        r##"<g id="ground-truth" fill="none" stroke="#2a9d2a" stroke-width="2" stroke-dasharray="6,4">"##
    );
    for g in gts {
        let _ = writeln!(s, r#"<polygon class="gt" points="{}"/>"#, points(g));
    }
    s.push_str("</g>\n");
    let _ = writeln!(
        s,
        r##"<g id="detections" fill="none" stroke="#d62828" stroke-width="2">"##
    );
    for d in dets {
        let _ = writeln!(
            s,
            r#"<polygon class="det" data-class="{}" points="{}"/>"#,
            escape(&d.class),
            points(&d.box3d)
        );
    }
    s.push_str("</g>\n");
    let _ = writeln!(
        s,
        r##"<g id="labels" font-family="monospace" font-size="12" fill="#202020">"##
    );
    for d in dets {
        let (px, py) = to_pixels(d.box3d.x, d.box3d.z);
        let label = match d.uncertainty {
            Some(u) => format!("{u:.4}"),
            None => "n/a".into(),
        };
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{:.3}">{label}</text>"#,
            px + 12.0,
            py - 12.0
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(x: f64, z: f64, ry: f64) -> Box3D {
        Box3D {
            x,
            y: 1.6,
            z,
            h: 1.5,
            w: 1.6,
            l: 3.9,
            ry,
        }
    }

    #[test]
    fn empty_frame_has_grid_only() {
        let svg = bev_svg(&[], &[]);
        assert_eq!(svg.matches("<polygon").count(), 0);
        assert_eq!(svg.matches("<text").count(), 0);
        assert_eq!(svg.matches("<line").count(), 9 + 9);
        assert!(svg.contains(r#"version="1.1""#));
    }

    #[test]
    fn one_box_one_polygon_one_label() {
        let b = car(3.0, 20.0, 0.4);
        let svg = bev_svg(
            &[PlotBox {
                box3d: b,
                class: "Car".into(),
                uncertainty: Some(0.0215),
            }],
            &[],
        );
        assert_eq!(svg.matches("<polygon").count(), 1);
        assert_eq!(svg.matches("<text").count(), 1);
        assert!(svg.contains(">0.0215</text>"));
    }

    #[test]
    fn vertices_follow_footprint() {
        let b = car(-5.0, 30.0, 1.1);
        let svg = bev_svg(
            &[PlotBox {
                box3d: b,
                class: "Car".into(),
                uncertainty: None,
            }],
            &[b],
        );
        let start = svg.find(r#"class="det""#).unwrap();
        let pts = &svg[start..];
        let pts = &pts[pts.find("points=\"").unwrap() + 8..];
        let pts = &pts[..pts.find('"').unwrap()];
        let parsed: Vec<(f64, f64)> = pts
            .split(' ')
            .map(|p| {
                let (a, b) = p.split_once(',').unwrap();
                (a.parse().unwrap(), b.parse().unwrap())
            })
            .collect();
        for ((px, py), (x, z)) in parsed.iter().zip(bev_polygon(&b)) {
            assert!((px - (x + 40.0) * 10.0).abs() < 1e-3);
            assert!((py - (80.0 - z) * 10.0).abs() < 1e-3);
        }
        assert!(svg.contains("stroke-dasharray"));
        assert_eq!(svg.matches(r#"class="gt""#).count(), 1);
    }
}
