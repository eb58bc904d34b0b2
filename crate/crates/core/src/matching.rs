//! Candidate-level association of 3D and 2D detections.
//!
//! Every 3D candidate is projected into the image and compared against every
//! 2D candidate, giving an `m x n` grid of (IoU, 3D objectness, 2D objectness,
//! distance) entries. Each non-zero-IoU cell becomes a hypothetical pair whose
//! class opinions are fused; 3D candidates that intersect nothing keep one
//! fallback pair carrying their own opinion.

use crate::evidence::{combine_opinions, opinion_from_slice, EvidenceError, Opinion};
use crate::fusion_net::{ModelParams, NetError, ObjsFeature, NO_MATCH_OBJECTNESS};
use crate::geometry::{
    iou_axis_aligned, planar_distance_normalized, project_to_image, Box2D, Box3D, Calibration,
    CalibrationError,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Detection3D {
    pub box3d: Box3D,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
    pub class_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection2D {
    pub box2d: Box2D,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
    pub class_label: usize,
}

/// One cell of the matching grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchEntry {
    pub iou: f64,
    pub objs3d: f64,
    pub objs2d: f64,
    pub dis: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchGrid {
    rows: usize,
    cols: usize,
    entries: Vec<MatchEntry>,
    /// Image-plane box of each 3D candidate, `None` when it does not project.
    pub projected: Vec<Option<Box2D>>,
    /// Normalized planar distance of each 3D candidate.
    pub dis: Vec<f64>,
}

impl MatchGrid {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &MatchEntry {
        &self.entries[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[MatchEntry] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn build_match_matrix(
    dets3d: &[Detection3D],
    dets2d: &[Detection2D],
    calib: &Calibration,
    max_range: f64,
) -> Result<MatchGrid, CalibrationError> {
    let projected: Vec<Option<Box2D>> = dets3d
        .iter()
        .map(|d| project_to_image(&d.box3d, calib))
        .collect();
    let dis = dets3d
        .iter()
        .map(|d| planar_distance_normalized(&d.box3d, calib, max_range))
        .collect::<Result<Vec<_>, _>>()?;
    let mut entries = Vec::with_capacity(dets3d.len() * dets2d.len());
    for (i, d3) in dets3d.iter().enumerate() {
        for d2 in dets2d {
            let iou = projected[i]
                .as_ref()
                .map_or(0.0, |p| iou_axis_aligned(p, &d2.box2d));
            entries.push(MatchEntry {
                iou,
                objs3d: d3.objectness,
                objs2d: d2.objectness,
                dis: dis[i],
            });
        }
    }
    Ok(MatchGrid {
        rows: dets3d.len(),
        cols: dets2d.len(),
        entries,
        projected,
        dis,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypotheticalPair {
    pub i: usize,
    /// 2D partner index; `None` for the fallback pair of an unmatched candidate.
    pub j: Option<usize>,
    pub entry: MatchEntry,
    pub opinion3d: Opinion,
    pub opinion2d: Option<Opinion>,
    pub fused: Opinion,
    pub is_matched: bool,
}

impl HypotheticalPair {
    /// The five-channel input of the objectness network.
    pub fn feature(&self) -> ObjsFeature {
        ObjsFeature {
            iou: self.entry.iou,
            objs3d: self.entry.objs3d,
            objs2d: self.entry.objs2d,
            dis: self.entry.dis,
            uncertainty: self.fused.uncertainty(),
        }
    }
}

/// Fuses the two class opinions of a matched pair with Dempster's rule.
pub fn fuse_pair_classes(mut pair: HypotheticalPair) -> Result<HypotheticalPair, EvidenceError> {
    if let Some(o2) = &pair.opinion2d {
        pair.fused = combine_opinions(&pair.opinion3d, o2)?;
    }
    Ok(pair)
}

fn fallback_pair(
    i: usize,
    grid: &MatchGrid,
    det: &Detection3D,
    opinion3d: Opinion,
) -> HypotheticalPair {
    HypotheticalPair {
        i,
        j: None,
        entry: MatchEntry {
            iou: 0.0,
            objs3d: det.objectness,
            objs2d: NO_MATCH_OBJECTNESS,
            dis: grid.dis[i],
        },
        fused: opinion3d.clone(),
        opinion3d,
        opinion2d: None,
        is_matched: false,
    }
}

/// Enumerates hypothetical pairs, ordered by 3D index then 2D index.
///
/// A cell becomes a pair when its IoU exceeds `iou_floor` (strictly; the
/// default floor is 0). A matched pair whose opinions are in total conflict is
/// dropped; a candidate left without pairs gets its fallback pair.
pub fn enumerate_pairs(
    grid: &MatchGrid,
    dets3d: &[Detection3D],
    dets2d: &[Detection2D],
    params: &ModelParams,
    iou_floor: f64,
) -> Result<Vec<HypotheticalPair>, NetError> {
    let opinions2d = dets2d
        .iter()
        .map(|d| {
            Ok(opinion_from_slice(
                &params.head2d.evidence(&d.class_scores)?,
            )?)
        })
        .collect::<Result<Vec<Opinion>, NetError>>()?;
    let mut pairs = Vec::new();
    for (i, det) in dets3d.iter().enumerate() {
        let opinion3d = opinion_from_slice(&params.head3d.evidence(&det.class_scores)?)?;
        let before = pairs.len();
        for (j, entry) in grid.row(i).iter().enumerate() {
            if !(entry.iou > 0.0 && entry.iou > iou_floor) {
                continue;
            }
            let pair = HypotheticalPair {
                i,
                j: Some(j),
                entry: *entry,
                opinion3d: opinion3d.clone(),
                opinion2d: Some(opinions2d[j].clone()),
                fused: opinion3d.clone(),
                is_matched: true,
            };
            match fuse_pair_classes(pair) {
                Ok(p) => pairs.push(p),
                Err(EvidenceError::TotalConflict(_)) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        if pairs.len() == before {
            pairs.push(fallback_pair(i, grid, det, opinion3d));
        }
    }
    Ok(pairs)
}
