//! KITTI-convention text formats.
//!
//! Detector outputs use the standard label columns extended with per-class
//! scores:
//!
//! * 3D: `type trunc occ alpha x1 y1 x2 y2 h w l x y z ry objectness s_1 .. s_H`
//! * 2D: `type x1 y1 x2 y2 objectness s_1 .. s_H`
//!
//! Fused results are plain 16-column KITTI result lines; uncertainties go to a
//! sidecar file with lines `<line-index> <uncertainty>`.

use crate::geometry::{Box2D, Box3D, Calibration};
use crate::matching::{Detection2D, Detection3D};
use crate::pipeline::{FusedDetection, LabeledObject, PipelineConfig, TrainConfig};
use nalgebra::{Matrix3, Matrix3x4};
use std::f64::consts::PI;
use std::fmt::{self, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub struct ParseError {
    /// 1-based input line, when the error is tied to one.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

fn perr(line: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        line: Some(line),
        message: message.into(),
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("config line {line}: `{key}`: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub key: String,
    pub message: String,
}

/// Ordered class names; the position is the class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassList(Vec<String>);

impl Default for ClassList {
    fn default() -> Self {
        Self(vec!["Car".into(), "Pedestrian".into(), "Cyclist".into()])
    }
}

impl ClassList {
    pub fn new(names: Vec<String>) -> Result<Self, String> {
        if names.len() < 2 {
            return Err("at least two classes are required".into());
        }
        for (k, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) || n == "DontCare" {
                return Err(format!("invalid class name `{n}`"));
            }
            if names[..k].contains(n) {
                return Err(format!("duplicate class name `{n}`"));
            }
        }
        Ok(Self(names))
    }

    /// Parses a comma-separated list such as `Car,Pedestrian,Cyclist`.
    pub fn parse(list: &str) -> Result<Self, String> {
        Self::new(list.split(',').map(|s| s.trim().to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.0.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }
}

impl fmt::Display for ClassList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(","))
    }
}

/// Parsed records plus the number of lines skipped for an unknown class.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub skipped: usize,
}

fn number(tok: &str, line: usize, what: &str) -> Result<f64, ParseError> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(perr(line, format!("invalid {what} `{tok}`"))),
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, f)| !f.is_empty())
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a < -PI {
        a += 2.0 * PI;
    }
    a
}

/// Observation angle of a box seen from the camera.
pub fn observation_angle(b: &Box3D) -> f64 {
    wrap_angle(b.ry - b.x.atan2(b.z))
}

// ---------------------------------------------------------------------------
// calibration

const IMAGE_SIZE_KEY: &str = "IMAGE_SIZE";

/// Parses a KITTI calib file. `P2`, `R0_rect` and `Tr_velo_to_cam` are required;
/// an optional `IMAGE_SIZE: <w> <h>` line overrides the default 1242x375.
pub fn parse_calib(text: &str) -> Result<Calibration, ParseError> {
    let mut p2 = None;
    let mut r0 = None;
    let mut tr = None;
    let mut size = None;
    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let (key, rest) = raw
            .split_once(':')
            .ok_or_else(|| perr(ln, "expected `KEY: values`"))?;
        let key = key.trim();
        let wanted = match key {
            "P2" | "Tr_velo_to_cam" => 12,
            "R0_rect" => 9,
            IMAGE_SIZE_KEY => 2,
            _ => continue,
        };
        let values = rest
            .split_whitespace()
            .map(|t| number(t, ln, "calibration value"))
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != wanted {
            return Err(perr(
                ln,
                format!("{key} needs {wanted} values, found {}", values.len()),
            ));
        }
        match key {
            "P2" => p2 = Some(Matrix3x4::from_row_slice(&values)),
            "Tr_velo_to_cam" => tr = Some(Matrix3x4::from_row_slice(&values)),
            "R0_rect" => r0 = Some(Matrix3::from_row_slice(&values)),
            _ => {
                if values[0] <= 0.0 || values[1] <= 0.0 {
                    return Err(perr(ln, "image size must be positive"));
                }
                size = Some((values[0], values[1]));
            }
        }
    }
    let missing = |k: &str| ParseError {
        line: None,
        message: format!("missing calibration key `{k}`"),
    };
    let (image_width, image_height) = size.unwrap_or((
        Calibration::DEFAULT_IMAGE_WIDTH,
        Calibration::DEFAULT_IMAGE_HEIGHT,
    ));
    Ok(Calibration {
        p2: p2.ok_or_else(|| missing("P2"))?,
        r0: r0.ok_or_else(|| missing("R0_rect"))?,
        tr_velo_to_cam: tr.ok_or_else(|| missing("Tr_velo_to_cam"))?,
        image_width,
        image_height,
    })
}

fn push_values<'a>(out: &mut String, key: &str, values: impl Iterator<Item = &'a f64>) {
    out.push_str(key);
    out.push(':');
    for v in values {
        let _ = write!(out, " {v:.12e}");
    }
    out.push('\n');
}

pub fn write_calib(c: &Calibration) -> String {
    let mut out = String::new();
    // nalgebra stores column-major; emit row-major
    let p2: Vec<f64> = c.p2.transpose().iter().copied().collect();
    let r0: Vec<f64> = c.r0.transpose().iter().copied().collect();
    let tr: Vec<f64> = c.tr_velo_to_cam.transpose().iter().copied().collect();
    push_values(&mut out, "P2", p2.iter());
    push_values(&mut out, "R0_rect", r0.iter());
    push_values(&mut out, "Tr_velo_to_cam", tr.iter());
    push_values(
        &mut out,
        IMAGE_SIZE_KEY,
        [c.image_width, c.image_height].iter(),
    );
    out
}

// ---------------------------------------------------------------------------
// KITTI object lines (labels and results)

/// One KITTI label or result line.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiObject {
    pub kind: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    pub bbox: Box2D,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub ry: f64,
    /// Present on result lines only.
    pub score: Option<f64>,
}

/// Ground-truth label records are KITTI object lines without a score.
pub type GroundTruthRecord = KittiObject;

impl KittiObject {
    pub fn is_dont_care(&self) -> bool {
        self.kind == "DontCare"
    }

    pub fn box3d(&self) -> Box3D {
        Box3D {
            x: self.x,
            y: self.y,
            z: self.z,
            h: self.h,
            w: self.w,
            l: self.l,
            ry: self.ry,
        }
    }
}

fn parse_object_fields(f: &[&str], ln: usize) -> Result<KittiObject, ParseError> {
    let n = |k: usize, what: &str| number(f[k], ln, what);
    let truncation = n(1, "truncation")?;
    if !(-1.0..=1.0).contains(&truncation) {
        return Err(perr(ln, format!("truncation `{}` out of range", f[1])));
    }
    let occlusion: i32 = f[2]
        .parse()
        .ok()
        .filter(|o| (-1..=3).contains(o))
        .ok_or_else(|| perr(ln, format!("invalid occlusion `{}`", f[2])))?;
    let bbox = Box2D::new(n(4, "bbox")?, n(5, "bbox")?, n(6, "bbox")?, n(7, "bbox")?);
    Ok(KittiObject {
        kind: f[0].to_string(),
        truncation,
        occlusion,
        alpha: n(3, "alpha")?,
        bbox,
        h: n(8, "height")?,
        w: n(9, "width")?,
        l: n(10, "length")?,
        x: n(11, "x")?,
        y: n(12, "y")?,
        z: n(13, "z")?,
        ry: n(14, "rotation_y")?,
        score: None,
    })
}

fn parse_objects(text: &str, with_score: bool) -> Result<Vec<KittiObject>, ParseError> {
    let want = if with_score { 16 } else { 15 };
    content_lines(text)
        .map(|(ln, f)| {
            if f.len() != want {
                return Err(perr(
                    ln,
                    format!("expected {want} fields, found {}", f.len()),
                ));
            }
            let mut obj = parse_object_fields(&f, ln)?;
            if with_score {
                obj.score = Some(number(f[15], ln, "score")?);
            }
            Ok(obj)
        })
        .collect()
}

/// Parses 15-column ground-truth labels, keeping `DontCare` rows in file order.
pub fn parse_gt_labels(text: &str) -> Result<Vec<GroundTruthRecord>, ParseError> {
    parse_objects(text, false)
}

/// Parses 16-column KITTI result lines.
pub fn parse_results(text: &str) -> Result<Vec<KittiObject>, ParseError> {
    parse_objects(text, true)
}

pub fn format_object(o: &KittiObject) -> String {
    let mut s = format!(
        "{} {:.2} {} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4}",
        o.kind,
        o.truncation,
        o.occlusion,
        o.alpha,
        o.bbox.x1,
        o.bbox.y1,
        o.bbox.x2,
        o.bbox.y2,
        o.h,
        o.w,
        o.l,
        o.x,
        o.y,
        o.z,
        o.ry
    );
    if let Some(score) = o.score {
        let _ = write!(s, " {score:.4}");
    }
    s
}

pub fn write_objects(objects: &[KittiObject]) -> String {
    objects.iter().map(|o| format_object(o) + "\n").collect()
}

/// Keeps known-class, non-`DontCare` objects as training targets.
pub fn labels_for_training(objects: &[KittiObject], classes: &ClassList) -> Vec<LabeledObject> {
    objects
        .iter()
        .filter_map(|o| {
            classes.index_of(&o.kind).map(|class_index| LabeledObject {
                class_index,
                bbox: o.bbox,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// detector outputs

fn class_scores(f: &[&str], ln: usize) -> Result<Vec<f64>, ParseError> {
    f.iter()
        .map(|t| {
            let v = number(t, ln, "class score")?;
            if v < 0.0 {
                return Err(perr(ln, format!("negative class score `{t}`")));
            }
            Ok(v)
        })
        .collect()
}

fn objectness(tok: &str, ln: usize) -> Result<f64, ParseError> {
    let v = number(tok, ln, "objectness")?;
    if !(0.0..=1.0).contains(&v) {
        return Err(perr(ln, format!("objectness `{tok}` outside [0, 1]")));
    }
    Ok(v)
}

/// Parses 3D detector output with `16 + H` columns per line.
pub fn parse_det3d(text: &str, classes: &ClassList) -> Result<Parsed<Detection3D>, ParseError> {
    let want = 16 + classes.len();
    let mut out = Parsed {
        records: Vec::new(),
        skipped: 0,
    };
    for (ln, f) in content_lines(text) {
        if f.len() != want {
            return Err(perr(
                ln,
                format!("expected {want} fields, found {}", f.len()),
            ));
        }
        let obj = parse_object_fields(&f[..15], ln)?;
        if !(obj.h > 0.0 && obj.w > 0.0 && obj.l > 0.0) {
            return Err(perr(ln, "box dimensions must be positive"));
        }
        let objectness = objectness(f[15], ln)?;
        let scores = class_scores(&f[16..], ln)?;
        let Some(class_label) = classes.index_of(&obj.kind) else {
            out.skipped += 1;
            continue;
        };
        out.records.push(Detection3D {
            box3d: obj.box3d(),
            objectness,
            class_scores: scores,
            class_label,
        });
    }
    Ok(out)
}

/// Rounds to the 4 decimals the writers emit.
fn quantize(v: f64) -> f64 {
    format!("{v:.4}").parse().unwrap_or(v)
}

/// Writes 3D detections; the image-box columns carry the clipped projection.
///
/// Derived columns are computed from the rounded geometry, so parsing and
/// writing again reproduces the text exactly.
pub fn write_det3d(dets: &[Detection3D], classes: &ClassList, calib: &Calibration) -> String {
    let mut out = String::new();
    for d in dets {
        let b = Box3D {
            x: quantize(d.box3d.x),
            y: quantize(d.box3d.y),
            z: quantize(d.box3d.z),
            h: quantize(d.box3d.h),
            w: quantize(d.box3d.w),
            l: quantize(d.box3d.l),
            ry: quantize(d.box3d.ry),
        };
        let obj = KittiObject {
            kind: classes
                .name(d.class_label)
                .unwrap_or("DontCare")
                .to_string(),
            truncation: 0.0,
            occlusion: 0,
            alpha: observation_angle(&b),
            bbox: crate::geometry::project_to_image(&b, calib)
                .unwrap_or(Box2D::new(0.0, 0.0, 0.0, 0.0)),
            h: b.h,
            w: b.w,
            l: b.l,
            x: b.x,
            y: b.y,
            z: b.z,
            ry: b.ry,
            score: Some(d.objectness),
        };
        out.push_str(&format_object(&obj));
        for s in &d.class_scores {
            let _ = write!(out, " {s:.4}");
        }
        out.push('\n');
    }
    out
}

/// Parses 2D detector output with `6 + H` columns per line.
pub fn parse_det2d(text: &str, classes: &ClassList) -> Result<Parsed<Detection2D>, ParseError> {
    let want = 6 + classes.len();
    let mut out = Parsed {
        records: Vec::new(),
        skipped: 0,
    };
    for (ln, f) in content_lines(text) {
        if f.len() != want {
            return Err(perr(
                ln,
                format!("expected {want} fields, found {}", f.len()),
            ));
        }
        let coords = f[1..5]
            .iter()
            .map(|t| number(t, ln, "bbox"))
            .collect::<Result<Vec<_>, _>>()?;
        let box2d = Box2D::new(coords[0], coords[1], coords[2], coords[3]);
        if box2d.x1 > box2d.x2 || box2d.y1 > box2d.y2 {
            return Err(perr(ln, "bbox corners out of order"));
        }
        let objectness = objectness(f[5], ln)?;
        let scores = class_scores(&f[6..], ln)?;
        let Some(class_label) = classes.index_of(f[0]) else {
            out.skipped += 1;
            continue;
        };
        out.records.push(Detection2D {
            box2d,
            objectness,
            class_scores: scores,
            class_label,
        });
    }
    Ok(out)
}

pub fn write_det2d(dets: &[Detection2D], classes: &ClassList) -> String {
    let mut out = String::new();
    for d in dets {
        let b = &d.box2d;
        let _ = write!(
            out,
            "{} {:.4} {:.4} {:.4} {:.4} {:.4}",
            classes.name(d.class_label).unwrap_or("DontCare"),
            b.x1,
            b.y1,
            b.x2,
            b.y2,
            d.objectness
        );
        for s in &d.class_scores {
            let _ = write!(out, " {s:.4}");
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// fused results

/// Result-file records for fused detections, in order.
pub fn result_objects(dets: &[FusedDetection], classes: &ClassList) -> Vec<KittiObject> {
    dets.iter()
        .map(|d| KittiObject {
            kind: classes
                .name(d.class_label)
                .unwrap_or("DontCare")
                .to_string(),
            truncation: 0.0,
            occlusion: 0,
            alpha: observation_angle(&d.box3d),
            bbox: d.bbox.unwrap_or(Box2D::new(0.0, 0.0, 0.0, 0.0)),
            h: d.box3d.h,
            w: d.box3d.w,
            l: d.box3d.l,
            x: d.box3d.x,
            y: d.box3d.y,
            z: d.box3d.z,
            ry: d.box3d.ry,
            score: Some(d.score),
        })
        .collect()
}

/// KITTI result lines and the matching uncertainty sidecar.
pub fn write_results(dets: &[FusedDetection], classes: &ClassList) -> (String, String) {
    let objects = result_objects(dets, classes);
    let mut sidecar = String::new();
    for (k, d) in dets.iter().enumerate() {
        let _ = writeln!(sidecar, "{k} {:.6}", d.uncertainty);
    }
    (write_objects(&objects), sidecar)
}

/// Parses `<line-index> <uncertainty>` lines.
pub fn parse_uncertainty_sidecar(text: &str) -> Result<Vec<(usize, f64)>, ParseError> {
    content_lines(text)
        .map(|(ln, f)| {
            if f.len() != 2 {
                return Err(perr(ln, format!("expected 2 fields, found {}", f.len())));
            }
            let idx = f[0]
                .parse()
                .map_err(|_| perr(ln, format!("invalid line index `{}`", f[0])))?;
            let u = number(f[1], ln, "uncertainty")?;
            if !(0.0..=1.0).contains(&u) {
                return Err(perr(ln, format!("uncertainty `{}` outside [0, 1]", f[1])));
            }
            Ok((idx, u))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// run configuration

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
}

const CONFIG_KEYS: &[&str] = &[
    "conf_threshold",
    "nms_iou",
    "u_max",
    "max_range",
    "pair_iou_floor",
    "target_iou_car",
    "target_iou_other",
    "lambda_anneal_epochs",
    "kappa",
    "classes",
    "epochs",
    "seed",
    "lr",
];

impl RunConfig {
    /// Sets one key from its textual value, without cross-field validation.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn float(v: &str) -> Result<f64, String> {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("invalid number `{v}`"))
        }
        fn int<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("invalid integer `{v}`"))
        }
        let p = &mut self.pipeline;
        match key {
            "conf_threshold" => p.conf_threshold = float(value)?,
            "nms_iou" => p.nms_iou = float(value)?,
            "u_max" => p.u_max = float(value)?,
            "max_range" => p.max_range = float(value)?,
            "pair_iou_floor" => p.pair_iou_floor = float(value)?,
            "target_iou_car" => p.target_iou_car = float(value)?,
            "target_iou_other" => p.target_iou_other = float(value)?,
            "lambda_anneal_epochs" => p.lambda_anneal_epochs = int(value)?,
            "kappa" => p.kappa = float(value)?,
            "classes" => p.classes = ClassList::parse(value)?,
            "epochs" => self.train.epochs = int(value)?,
            "seed" => self.train.seed = int(value)?,
            "lr" => {
                let lr = float(value)?;
                if lr <= 0.0 {
                    return Err(format!("lr must be positive, got {lr}"));
                }
                self.train.lr = lr;
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.pipeline.validate()
    }
}

/// Parses `key = value` lines with `#` comments. Missing keys keep their defaults.
pub fn load_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cerr = |key: &str, message: String| ConfigError {
            line: ln,
            key: key.to_string(),
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| cerr(line, "expected `key = value`".into()))?;
        let (key, value) = (key.trim(), value.trim());
        cfg.set(key, value).map_err(|m| cerr(key, m))?;
        // range checks name the offending key
        let mut probe = RunConfig::default();
        probe.set(key, value).map_err(|m| cerr(key, m))?;
        probe.validate().map_err(|m| cerr(key, m))?;
    }
    Ok(cfg)
}

pub fn write_config(cfg: &RunConfig) -> String {
    let p = &cfg.pipeline;
    let mut out = String::new();
    let _ = writeln!(out, "conf_threshold = {}", p.conf_threshold);
    let _ = writeln!(out, "nms_iou = {}", p.nms_iou);
    let _ = writeln!(out, "u_max = {}", p.u_max);
    let _ = writeln!(out, "max_range = {}", p.max_range);
    let _ = writeln!(out, "pair_iou_floor = {}", p.pair_iou_floor);
    let _ = writeln!(out, "target_iou_car = {}", p.target_iou_car);
    let _ = writeln!(out, "target_iou_other = {}", p.target_iou_other);
    let _ = writeln!(out, "lambda_anneal_epochs = {}", p.lambda_anneal_epochs);
    let _ = writeln!(out, "kappa = {}", p.kappa);
    let _ = writeln!(out, "classes = {}", p.classes);
    let _ = writeln!(out, "epochs = {}", cfg.train.epochs);
    let _ = writeln!(out, "seed = {}", cfg.train.seed);
    let _ = writeln!(out, "lr = {}", cfg.train.lr);
    out
}

/// Every accepted config key.
pub fn config_keys() -> &'static [&'static str] {
    CONFIG_KEYS
}

// ---------------------------------------------------------------------------
// directory layout

/// Whether `id` is a zero-padded 6-digit frame id.
pub fn is_frame_id(id: &str) -> bool {
    id.len() == 6 && id.bytes().all(|b| b.is_ascii_digit())
}

pub fn frame_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.txt"))
}

pub fn sidecar_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.unc.txt"))
}

/// Sorted frame ids of `<id>.txt` files in `dir`.
pub fn list_frames(dir: &Path) -> std::io::Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(stem) = name.strip_suffix(".txt") {
            if is_frame_id(stem) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const CALIB: &str = "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n\
P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03\n\
R0_rect: 1 0 0 0 1 0 0 0 1\n\
Tr_velo_to_cam: 0 -1 0 0 0 0 -1 -0.08 1 0 0 -0.27\n\
Tr_imu_to_velo: 1 0 0 0 0 1 0 0 0 0 1 0\n";

    #[test]
    fn calib_echo() {
        let c = parse_calib(CALIB).unwrap();
        assert_eq!(c.p2[(0, 0)], 721.5377);
        assert_eq!(c.p2[(0, 3)], 44.85728);
        assert_eq!(c.p2[(1, 2)], 172.854);
        assert_eq!(c.r0, Matrix3::identity());
        assert_eq!(c.tr_velo_to_cam[(1, 3)], -0.08);
        assert_eq!(c.tr_velo_to_cam[(2, 0)], 1.0);
        assert_eq!(c.image_width, 1242.0);
        let padded = CALIB.replace(' ', "   ").replace("P2:", "  P2 :");
        assert_eq!(parse_calib(&padded).unwrap(), c);
        assert_eq!(parse_calib(&write_calib(&c)).unwrap(), c);
    }

    #[test]
    fn calib_errors() {
        let no_r0: String = CALIB
            .lines()
            .filter(|l| !l.starts_with("R0"))
            .map(|l| format!("{l}\n"))
            .collect();
        let e = parse_calib(&no_r0).unwrap_err();
        assert!(e.message.contains("R0_rect"), "{e}");
        let short = CALIB.replace("R0_rect: 1 0 0 0 1 0 0 0 1", "R0_rect: 1 0 0");
        assert_eq!(parse_calib(&short).unwrap_err().line, Some(3));
        let bad = CALIB.replace("R0_rect: 1 0 0", "R0_rect: 1 x 0");
        assert_eq!(parse_calib(&bad).unwrap_err().line, Some(3));
        assert_eq!(parse_calib("garbage").unwrap_err().line, Some(1));
    }

    const DET3D: &str =
        "Car 0 0 -1.5 100 100 200 180 1.5 1.6 3.9 2.0 1.5 20.0 -1.5 0.9 22.29 0.01 0.01";

    #[test]
    fn det3d_echo() {
        let classes = ClassList::default();
        let p = parse_det3d(DET3D, &classes).unwrap();
        assert_eq!(p.records.len(), 1);
        let d = &p.records[0];
        assert_eq!(d.class_scores, vec![22.29, 0.01, 0.01]);
        assert_eq!(d.objectness, 0.9);
        assert_eq!(d.class_label, 0);
        assert_eq!((d.box3d.h, d.box3d.w, d.box3d.l), (1.5, 1.6, 3.9));
        assert_eq!(
            (d.box3d.x, d.box3d.y, d.box3d.z, d.box3d.ry),
            (2.0, 1.5, 20.0, -1.5)
        );
        assert!(parse_det3d("", &classes).unwrap().records.is_empty());
        let fifteen = "Car 0 0 -1.5 100 100 200 180 1.5 1.6 3.9 2.0 1.5 20.0 -1.5";
        assert_eq!(parse_det3d(fifteen, &classes).unwrap_err().line, Some(1));
        let van = DET3D.replace("Car", "Van");
        let p = parse_det3d(&format!("{DET3D}\n{van}\n"), &classes).unwrap();
        assert_eq!((p.records.len(), p.skipped), (1, 1));
    }

    #[test]
    fn det2d_echo() {
        let classes = ClassList::default();
        let p = parse_det2d("Pedestrian 10 20 30 60 0.8 0.1 0.85 0.05\n", &classes).unwrap();
        let d = &p.records[0];
        assert_eq!(d.box2d, Box2D::new(10.0, 20.0, 30.0, 60.0));
        assert_eq!(d.class_label, 1);
        assert_eq!(d.class_scores, vec![0.1, 0.85, 0.05]);
        assert!(parse_det2d("\n\n", &classes).unwrap().records.is_empty());
        let e = parse_det2d("Car 1 2 3 4 0.5 0.1\n", &classes).unwrap_err();
        assert_eq!(e.line, Some(1));
        assert!(parse_det2d("Car 1 2 3 4 1.5 0.1 0.1 0.1", &classes).is_err());
        assert!(parse_det2d("Car 1 2 3 4 0.5 0.1 nan 0.1", &classes).is_err());
    }

    const LABELS: &str =
        "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59\n\
DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n\
Pedestrian 0.00 0 0.21 423.17 173.67 433.17 224.03 1.60 0.38 0.30 -5.87 1.63 23.11 -0.03\n";

    #[test]
    fn labels_keep_order_and_dontcare() {
        let recs = parse_gt_labels(LABELS).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].kind, "Car");
        assert!(recs[1].is_dont_care());
        assert_eq!(recs[2].kind, "Pedestrian");
        assert_eq!(recs[2].occlusion, 0);
        assert_abs_diff_eq!(recs[0].z, 46.70);
        let e = parse_gt_labels("Car 0 0 0 1 2 3\nCar 0 0\n").unwrap_err();
        assert_eq!(e.line, Some(1));
        let e =
            parse_gt_labels(&format!("{LABELS}\nCar 0 9 0 1 2 3 4 1 1 1 1 1 1 0\n")).unwrap_err();
        assert_eq!(e.line, Some(5));
        let training = labels_for_training(&recs, &ClassList::default());
        assert_eq!(training.len(), 2);
        assert_eq!(training[1].class_index, 1);
    }

    #[test]
    fn labels_roundtrip_as_fixed_point() {
        let once = write_objects(&parse_gt_labels(LABELS).unwrap());
        let twice = write_objects(&parse_gt_labels(&once).unwrap());
        assert_eq!(once, twice);
    }

    #[test]
    fn sidecar_parse() {
        assert_eq!(
            parse_uncertainty_sidecar("0 0.1186\n1 0.0215\n").unwrap(),
            vec![(0, 0.1186), (1, 0.0215)]
        );
        assert!(parse_uncertainty_sidecar("0 1.5\n").is_err());
        assert!(parse_uncertainty_sidecar("x 0.5\n").is_err());
    }

    #[test]
    fn config_defaults_and_errors() {
        let cfg = load_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.pipeline.conf_threshold, 0.95);
        assert_eq!(cfg.pipeline.nms_iou, 0.4);
        assert_eq!(cfg.train.lr, 0.003);
        let cfg = load_config("# comment\nnms_iou = 0.4   # trailing\nepochs=3\n").unwrap();
        assert_eq!(cfg.pipeline.nms_iou, 0.4);
        assert_eq!(cfg.train.epochs, 3);
        let e = load_config("nms_iou = 1.5").unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (1, "nms_iou"));
        let e = load_config("\nbogus = 1").unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (2, "bogus"));
        assert!(load_config("u_max = 0").is_err());
        assert!(load_config("lr = -1").is_err());
        assert!(load_config("classes = Car").is_err());
        let custom = load_config("classes = Car, Van\nu_max = 0.2\n").unwrap();
        assert_eq!(custom.pipeline.classes.len(), 2);
        assert_eq!(load_config(&write_config(&custom)).unwrap(), custom);
    }

    #[test]
    fn frame_ids() {
        assert!(is_frame_id("000123"));
        assert!(!is_frame_id("00012"));
        assert!(!is_frame_id("00012a"));
    }
}
