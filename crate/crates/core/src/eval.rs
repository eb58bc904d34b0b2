//! KITTI-style average precision: 2D, orientation similarity, BEV and 3D.

use crate::geometry::{iou_3d, iou_axis_aligned, rotated_bev_iou, Box2D};
use crate::kitti_io::{ClassList, KittiObject};
use crate::par::{self, Execution};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("prediction set has {preds} frames but ground truth has {gts}")]
    FrameMismatch { preds: usize, gts: usize },
    #[error("unknown metric `{0}` (expected 2d, aos, bev or 3d)")]
    UnknownMetric(String),
    #[error("unsupported interpolation `{0}` (expected 11 or 40)")]
    UnknownInterp(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[serde(rename = "2d")]
    Image,
    Aos,
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Image, Metric::Aos, Metric::Bev, Metric::ThreeD];

    pub fn parse(s: &str) -> Result<Self, EvalError> {
        match s.to_ascii_lowercase().as_str() {
            "2d" => Ok(Self::Image),
            "aos" => Ok(Self::Aos),
            "bev" => Ok(Self::Bev),
            "3d" => Ok(Self::ThreeD),
            _ => Err(EvalError::UnknownMetric(s.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Image => "2d",
            Self::Aos => "aos",
            Self::Bev => "bev",
            Self::ThreeD => "3d",
        }
    }

    /// Overlap between a prediction and a ground-truth object under this metric.
    pub fn iou(self, a: &KittiObject, b: &KittiObject) -> f64 {
        match self {
            Self::Image | Self::Aos => iou_axis_aligned(&a.bbox, &b.bbox),
            Self::Bev => rotated_bev_iou(&a.box3d(), &b.box3d()),
            Self::ThreeD => iou_3d(&a.box3d(), &b.box3d()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Interp {
    #[serde(rename = "11")]
    Eleven,
    #[serde(rename = "40")]
    Forty,
}

impl Interp {
    pub fn parse(s: &str) -> Result<Self, EvalError> {
        match s {
            "11" => Ok(Self::Eleven),
            "40" => Ok(Self::Forty),
            _ => Err(EvalError::UnknownInterp(s.to_string())),
        }
    }

    /// Recall sample positions.
    pub fn samples(self) -> Vec<f64> {
        match self {
            Self::Eleven => (0..=10).map(|k| k as f64 / 10.0).collect(),
            Self::Forty => (1..=40).map(|k| k as f64 / 40.0).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DifficultyBucket {
    pub name: &'static str,
    pub min_height: f64,
    pub max_occlusion: i32,
    pub max_truncation: f64,
}

impl DifficultyBucket {
    pub const EASY: Self = Self {
        name: "Easy",
        min_height: 40.0,
        max_occlusion: 0,
        max_truncation: 0.15,
    };
    pub const MODERATE: Self = Self {
        name: "Moderate",
        min_height: 25.0,
        max_occlusion: 1,
        max_truncation: 0.30,
    };
    pub const HARD: Self = Self {
        name: "Hard",
        min_height: 25.0,
        max_occlusion: 2,
        max_truncation: 0.50,
    };
    pub const ALL: [Self; 3] = [Self::EASY, Self::MODERATE, Self::HARD];

    pub fn admits(&self, gt: &KittiObject) -> bool {
        gt.bbox.height() >= self.min_height
            && gt.occlusion <= self.max_occlusion
            && gt.truncation <= self.max_truncation
    }
}

/// IoU needed for a true positive.
pub fn class_iou_threshold(class: &str) -> f64 {
    if class == "Car" {
        0.7
    } else {
        0.5
    }
}

fn neighbor_class(class: &str) -> Option<&'static str> {
    match class {
        "Car" => Some("Van"),
        "Pedestrian" => Some("Person_sitting"),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtRole {
    /// Counts toward recall.
    Valid,
    /// Same or neighboring class outside the bucket: matches are neither TP nor FP.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    TruePositive { gt: usize },
    FalsePositive,
    Ignored,
}

/// Fraction of `pred` covered by `region`.
fn coverage(pred: &Box2D, region: &Box2D) -> f64 {
    let area = pred.area();
    if area <= 0.0 {
        return 0.0;
    }
    pred.intersection(region) / area
}

/// Greedy matching in the given prediction order: each prediction takes the
/// highest-IoU unmatched ground truth at or above `threshold`. Unmatched
/// predictions inside a `DontCare` region (half their image area or more),
/// or flagged in `small`, are ignored.
pub fn match_greedy(
    num_preds: usize,
    gts: &[GtRole],
    iou: impl Fn(usize, usize) -> f64,
    threshold: f64,
    small: &[bool],
    in_dontcare: &[bool],
) -> (Vec<Outcome>, Vec<bool>) {
    let mut taken = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(num_preds);
    for p in 0..num_preds {
        let mut best: Option<(usize, f64)> = None;
        for (g, _) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let o = iou(p, g);
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        let outcome = match best {
            Some((g, _)) => {
                taken[g] = true;
                match gts[g] {
                    GtRole::Valid => Outcome::TruePositive { gt: g },
                    GtRole::Ignored => Outcome::Ignored,
                }
            }
            None if small[p] || in_dontcare[p] => Outcome::Ignored,
            None => Outcome::FalsePositive,
        };
        outcomes.push(outcome);
    }
    (outcomes, taken)
}

/// Precision/recall points with non-decreasing recall.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrCurve {
    pub points: Vec<(f64, f64)>,
}

/// Mean of the best precision at or beyond each sampled recall, in percent.
pub fn ap_interp(curve: &PrCurve, interp: Interp) -> f64 {
    if curve.points.is_empty() {
        return 0.0;
    }
    let samples = interp.samples();
    let total: f64 = samples
        .iter()
        .map(|&r| {
            curve
                .points
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    100.0 * total / samples.len() as f64
}

/// One scored prediction after matching.
#[derive(Debug, Clone, Copy)]
struct Scored {
    score: f64,
    outcome: Outcome,
    similarity: f64,
}

/// Builds the curve from pooled outcomes; predictions with equal scores enter
/// together so the result does not depend on their order.
fn build_curve(mut scored: Vec<Scored>, num_valid: usize, orientation: bool) -> PrCurve {
    let mut curve = PrCurve::default();
    if num_valid == 0 {
        return curve;
    }
    scored.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (mut tp, mut fp, mut sim) = (0usize, 0usize, 0.0);
    let mut k = 0;
    while k < scored.len() {
        let s = scored[k].score;
        while k < scored.len() && scored[k].score == s {
            match scored[k].outcome {
                Outcome::TruePositive { .. } => {
                    tp += 1;
                    sim += scored[k].similarity;
                }
                Outcome::FalsePositive => fp += 1,
                Outcome::Ignored => {}
            }
            k += 1;
        }
        if tp + fp == 0 {
            continue;
        }
        let numerator = if orientation { sim } else { tp as f64 };
        curve
            .points
            .push((tp as f64 / num_valid as f64, numerator / (tp + fp) as f64));
    }
    curve
}

fn orientation_similarity(pred: &KittiObject, gt: &KittiObject) -> f64 {
    (1.0 + (pred.alpha - gt.alpha).cos()) / 2.0
}

fn frame_outcomes(
    preds: &[KittiObject],
    gts: &[KittiObject],
    metric: Metric,
    class: &str,
    bucket: &DifficultyBucket,
) -> (Vec<Scored>, usize) {
    let neighbor = neighbor_class(class);
    let mut gt_idx = Vec::new();
    let mut roles = Vec::new();
    let mut dontcare = Vec::new();
    for (g, gt) in gts.iter().enumerate() {
        if gt.is_dont_care() {
            dontcare.push(gt.bbox);
        } else if gt.kind == class {
            gt_idx.push(g);
            roles.push(if bucket.admits(gt) {
                GtRole::Valid
            } else {
                GtRole::Ignored
            });
        } else if Some(gt.kind.as_str()) == neighbor {
            gt_idx.push(g);
            roles.push(GtRole::Ignored);
        }
    }
    let mut own: Vec<&KittiObject> = preds.iter().filter(|p| p.kind == class).collect();
    own.sort_by(|a, b| b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)));
    let small: Vec<bool> = own
        .iter()
        .map(|p| p.bbox.height() < bucket.min_height)
        .collect();
    let in_dc: Vec<bool> = own
        .iter()
        .map(|p| dontcare.iter().any(|r| coverage(&p.bbox, r) >= 0.5))
        .collect();
    let (outcomes, _) = match_greedy(
        own.len(),
        &roles,
        |p, g| metric.iou(own[p], &gts[gt_idx[g]]),
        class_iou_threshold(class),
        &small,
        &in_dc,
    );
    let scored = own
        .iter()
        .zip(outcomes)
        .map(|(p, outcome)| Scored {
            score: p.score.unwrap_or(0.0),
            outcome,
            similarity: match outcome {
                Outcome::TruePositive { gt } => orientation_similarity(p, &gts[gt_idx[gt]]),
                _ => 0.0,
            },
        })
        .collect();
    let valid = roles.iter().filter(|r| **r == GtRole::Valid).count();
    (scored, valid)
}

/// Pooled PR curve for one class and bucket.
pub fn pr_curve(
    preds: &[Vec<KittiObject>],
    gts: &[Vec<KittiObject>],
    metric: Metric,
    class: &str,
    bucket: &DifficultyBucket,
) -> Result<PrCurve, EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::FrameMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    let mut pooled = Vec::new();
    let mut valid = 0;
    for (p, g) in preds.iter().zip(gts) {
        let (s, v) = frame_outcomes(p, g, metric, class, bucket);
        pooled.extend(s);
        valid += v;
    }
    Ok(build_curve(pooled, valid, metric == Metric::Aos))
}

/// AP (or AOS) in percent for one class and bucket, pooled over frames.
pub fn evaluate(
    preds: &[Vec<KittiObject>],
    gts: &[Vec<KittiObject>],
    metric: Metric,
    classes: &ClassList,
    class: &str,
    bucket: &DifficultyBucket,
    interp: Interp,
) -> Result<f64, EvalError> {
    if classes.index_of(class).is_none() {
        return Err(EvalError::UnknownClass(class.to_string()));
    }
    Ok(ap_interp(
        &pr_curve(preds, gts, metric, class, bucket)?,
        interp,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRow {
    pub class: String,
    pub easy: f64,
    pub moderate: f64,
    pub hard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub interp: Interp,
    pub rows: Vec<ClassRow>,
}

/// Class x difficulty table for one metric.
pub fn evaluate_report(
    preds: &[Vec<KittiObject>],
    gts: &[Vec<KittiObject>],
    metric: Metric,
    classes: &ClassList,
    interp: Interp,
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    let jobs: Vec<(usize, usize)> = (0..classes.len())
        .flat_map(|c| (0..3).map(move |b| (c, b)))
        .collect();
    let values = par::map(exec, &jobs, |&(c, b)| {
        let class = classes.name(c).unwrap_or_default();
        evaluate(
            preds,
            gts,
            metric,
            classes,
            class,
            &DifficultyBucket::ALL[b],
            interp,
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let rows = classes
        .names()
        .iter()
        .enumerate()
        .map(|(c, name)| ClassRow {
            class: name.clone(),
            easy: values[3 * c],
            moderate: values[3 * c + 1],
            hard: values[3 * c + 2],
        })
        .collect();
    Ok(EvalReport {
        metric,
        interp,
        rows,
    })
}

/// Aligned plain-text table, one line per class.
pub fn format_report(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let interp = match r.interp {
            Interp::Eleven => 11,
            Interp::Forty => 40,
        };
        let _ = writeln!(out, "metric={} interp={interp}", r.metric.name());
        let _ = writeln!(
            out,
            "{:<12} {:>9} {:>9} {:>9}",
            "class", "Easy", "Moderate", "Hard"
        );
        for row in &r.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>9.2} {:>9.2} {:>9.2}",
                row.class, row.easy, row.moderate, row.hard
            );
        }
    }
    out
}

pub fn report_json(reports: &[EvalReport]) -> String {
    serde_json::to_string_pretty(reports).unwrap_or_else(|_| "[]".into())
}

/// Arithmetic mean uncertainty per class; classes without detections are absent.
pub fn mean_uncertainty_per_class<'a>(
    items: impl IntoIterator<Item = (&'a str, f64)>,
) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (class, u) in items {
        let e = acc.entry(class.to_string()).or_insert((0.0, 0));
        e.0 += u;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (sum, n))| (k, sum / n as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn obj(kind: &str, x: f64, z: f64, score: Option<f64>) -> KittiObject {
        KittiObject {
            kind: kind.into(),
            truncation: 0.0,
            occlusion: 0,
            alpha: 0.3,
            bbox: Box2D::new(100.0 + 10.0 * x, 100.0, 160.0 + 10.0 * x, 160.0 + z),
            h: 1.5,
            w: 1.6,
            l: 3.9,
            x,
            y: 1.5,
            z,
            ry: 0.2,
            score,
        }
    }

    fn scene() -> (Vec<Vec<KittiObject>>, Vec<Vec<KittiObject>>) {
        let gts = vec![
            vec![
                obj("Car", 0.0, 20.0, None),
                obj("Pedestrian", 5.0, 15.0, None),
            ],
            vec![obj("Car", -4.0, 30.0, None)],
        ];
        let preds = gts
            .iter()
            .map(|f| {
                f.iter()
                    .map(|g| KittiObject {
                        score: Some(1.0),
                        ..g.clone()
                    })
                    .collect()
            })
            .collect();
        (preds, gts)
    }

    #[test]
    fn hand_interpolation() {
        let curve = PrCurve {
            points: vec![(0.5, 1.0), (1.0, 0.5)],
        };
        assert_abs_diff_eq!(
            ap_interp(&curve, Interp::Eleven),
            850.0 / 11.0,
            epsilon = 1e-12
        );
        let flat = PrCurve {
            points: (1..=10).map(|k| (k as f64 / 10.0, 1.0)).collect(),
        };
        assert_eq!(ap_interp(&flat, Interp::Eleven), 100.0);
        assert_eq!(ap_interp(&flat, Interp::Forty), 100.0);
        assert_eq!(ap_interp(&PrCurve::default(), Interp::Eleven), 0.0);
    }

    #[test]
    fn perfect_and_empty() {
        let (preds, gts) = scene();
        let classes = ClassList::default();
        for metric in Metric::ALL {
            for b in DifficultyBucket::ALL {
                let ap =
                    evaluate(&preds, &gts, metric, &classes, "Car", &b, Interp::Eleven).unwrap();
                assert_eq!(ap, 100.0, "{metric:?} {}", b.name);
                let empty = vec![Vec::new(); gts.len()];
                let ap =
                    evaluate(&empty, &gts, metric, &classes, "Car", &b, Interp::Eleven).unwrap();
                assert_eq!(ap, 0.0);
            }
        }
        assert!(matches!(
            evaluate(
                &preds,
                &gts,
                Metric::Bev,
                &classes,
                "Tram",
                &DifficultyBucket::EASY,
                Interp::Eleven
            ),
            Err(EvalError::UnknownClass(_))
        ));
    }

    #[test]
    fn one_to_one_and_duplicates() {
        let roles = [GtRole::Valid, GtRole::Valid];
        let iou = |p: usize, g: usize| if p == g { 0.9 } else { 0.0 };
        let (out, taken) = match_greedy(2, &roles, iou, 0.7, &[false; 2], &[false; 2]);
        assert_eq!(
            out,
            vec![
                Outcome::TruePositive { gt: 0 },
                Outcome::TruePositive { gt: 1 }
            ]
        );
        assert_eq!(taken, vec![true, true]);
        let (out, _) = match_greedy(2, &roles[..1], |_, _| 0.9, 0.7, &[false; 2], &[false; 2]);
        assert_eq!(
            out,
            vec![Outcome::TruePositive { gt: 0 }, Outcome::FalsePositive]
        );
    }

    #[test]
    fn dontcare_and_hard_gts_are_ignored() {
        let (out, _) = match_greedy(1, &[GtRole::Ignored], |_, _| 0.9, 0.7, &[false], &[false]);
        assert_eq!(out, vec![Outcome::Ignored]);
        let (out, _) = match_greedy(1, &[], |_, _| 0.0, 0.7, &[false], &[true]);
        assert_eq!(out, vec![Outcome::Ignored]);
    }

    #[test]
    fn aos_exact_and_flipped() {
        let (mut preds, gts) = scene();
        let classes = ClassList::default();
        let b = DifficultyBucket::MODERATE;
        let ap = evaluate(
            &preds,
            &gts,
            Metric::Image,
            &classes,
            "Car",
            &b,
            Interp::Eleven,
        )
        .unwrap();
        let aos = evaluate(
            &preds,
            &gts,
            Metric::Aos,
            &classes,
            "Car",
            &b,
            Interp::Eleven,
        )
        .unwrap();
        assert_eq!(aos, ap);
        for f in &mut preds {
            for p in f {
                p.alpha += std::f64::consts::PI;
            }
        }
        let aos = evaluate(
            &preds,
            &gts,
            Metric::Aos,
            &classes,
            "Car",
            &b,
            Interp::Eleven,
        )
        .unwrap();
        assert_abs_diff_eq!(aos, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn frame_order_invariance() {
        let (mut preds, mut gts) = scene();
        preds[0].push(obj("Car", 10.0, 40.0, Some(1.0)));
        let classes = ClassList::default();
        let b = DifficultyBucket::HARD;
        let a = evaluate(
            &preds,
            &gts,
            Metric::Bev,
            &classes,
            "Car",
            &b,
            Interp::Forty,
        )
        .unwrap();
        preds.reverse();
        gts.reverse();
        let r = evaluate(
            &preds,
            &gts,
            Metric::Bev,
            &classes,
            "Car",
            &b,
            Interp::Forty,
        )
        .unwrap();
        assert_eq!(a, r);
    }

    #[test]
    fn low_score_false_positive_never_helps() {
        let (mut preds, gts) = scene();
        let classes = ClassList::default();
        let b = DifficultyBucket::EASY;
        let before = evaluate(
            &preds,
            &gts,
            Metric::ThreeD,
            &classes,
            "Car",
            &b,
            Interp::Eleven,
        )
        .unwrap();
        preds[1].push(obj("Car", 15.0, 60.0, Some(0.01)));
        let after = evaluate(
            &preds,
            &gts,
            Metric::ThreeD,
            &classes,
            "Car",
            &b,
            Interp::Eleven,
        )
        .unwrap();
        assert!(after <= before);
    }

    #[test]
    fn uncertainty_means() {
        let m = mean_uncertainty_per_class([("Car", 0.11827)]);
        assert_eq!(m["Car"], 0.11827);
        let m = mean_uncertainty_per_class([("Car", 0.02), ("Car", 0.04)]);
        assert_abs_diff_eq!(m["Car"], 0.03, epsilon = 1e-15);
        assert!(!m.contains_key("Pedestrian"));
    }

    #[test]
    fn report_shapes() {
        let (preds, gts) = scene();
        let classes = ClassList::default();
        let r = evaluate_report(
            &preds,
            &gts,
            Metric::Bev,
            &classes,
            Interp::Eleven,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows[0].moderate, 100.0);
        let json: serde_json::Value =
            serde_json::from_str(&report_json(std::slice::from_ref(&r))).unwrap();
        assert_eq!(json[0]["metric"], "bev");
        assert_eq!(json[0]["rows"][0]["class"], "Car");
        let text = format_report(&[r]);
        assert!(text.contains("Moderate"));
        assert_eq!(text.lines().count(), 5);
    }
}
