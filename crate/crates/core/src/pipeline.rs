//! Per-frame fusion, post-processing and the training loop.

use crate::error::Error;
use crate::evidence::opinion_from_slice;
use crate::fusion_net::{
    init_params, sgd_step, total_loss, total_loss_grad, AdamConfig, AdamState, ModelParams,
    ObjsFeature, PairSample, DEFAULT_KAPPA, DEFAULT_LR,
};
use crate::geometry::{
    iou_axis_aligned, rotated_bev_iou, Box2D, Box3D, Calibration, DEFAULT_MAX_RANGE,
};
use crate::kitti_io::ClassList;
use crate::matching::{
    build_match_matrix, enumerate_pairs, Detection2D, Detection3D, HypotheticalPair,
};
use crate::par::{self, Execution};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Inference and training knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Minimum fused objectness kept before NMS.
    pub conf_threshold: f64,
    /// BEV IoU at or above which a lower-scoring same-class box is suppressed.
    pub nms_iou: f64,
    /// Maximum uncertainty kept after NMS.
    pub u_max: f64,
    pub max_range: f64,
    /// Pairs need IoU strictly above this (and above zero).
    pub pair_iou_floor: f64,
    pub target_iou_car: f64,
    pub target_iou_other: f64,
    /// Epochs over which the KL weight ramps linearly to 1; 0 disables the ramp.
    pub lambda_anneal_epochs: usize,
    pub kappa: f64,
    pub classes: ClassList,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.95,
            nms_iou: 0.4,
            u_max: 0.10,
            max_range: DEFAULT_MAX_RANGE,
            pair_iou_floor: 0.0,
            target_iou_car: 0.5,
            target_iou_other: 0.25,
            lambda_anneal_epochs: 10,
            kappa: DEFAULT_KAPPA,
            classes: ClassList::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} must lie in [0, 1], got {v}"))
            }
        };
        unit("conf_threshold", self.conf_threshold)?;
        unit("nms_iou", self.nms_iou)?;
        unit("pair_iou_floor", self.pair_iou_floor)?;
        unit("target_iou_car", self.target_iou_car)?;
        unit("target_iou_other", self.target_iou_other)?;
        if !(self.u_max > 0.0 && self.u_max <= 1.0) {
            return Err(format!("u_max must lie in (0, 1], got {}", self.u_max));
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(format!(
                "max_range must be positive, got {}",
                self.max_range
            ));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(format!("kappa must be positive, got {}", self.kappa));
        }
        Ok(())
    }

    /// Weight of the KL term in epoch `epoch` (1-based).
    pub fn lambda(&self, epoch: usize) -> f64 {
        if self.lambda_anneal_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.lambda_anneal_epochs as f64).min(1.0)
        }
    }

    pub fn target_iou(&self, class_index: usize) -> f64 {
        if self.classes.name(class_index) == Some("Car") {
            self.target_iou_car
        } else {
            self.target_iou_other
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            seed: 0,
            lr: DEFAULT_LR,
        }
    }
}

/// Final output for one 3D candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedDetection {
    pub box3d: Box3D,
    /// Projected image box, when the candidate is visible.
    pub bbox: Option<Box2D>,
    pub score: f64,
    pub beliefs: Vec<f64>,
    pub uncertainty: f64,
    pub class_label: usize,
    /// `(3D index, 2D index)` of the selected pair.
    pub source: (usize, Option<usize>),
    pub feature: ObjsFeature,
}

/// The detections of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub dets3d: Vec<Detection3D>,
    pub dets2d: Vec<Detection2D>,
    pub calib: Calibration,
}

/// For each 3D index, the position in `pairs` of its highest-scoring pair.
///
/// Ties prefer the larger IoU, then the lower 2D index.
pub fn select_best_per_candidate(pairs: &[HypotheticalPair], scores: &[f64]) -> Vec<usize> {
    let mut best: Vec<usize> = Vec::new();
    for (k, pair) in pairs.iter().enumerate() {
        match best.last().copied() {
            Some(b) if pairs[b].i == pair.i => {
                let cur = &pairs[b];
                let better = scores[k] > scores[b]
                    || (scores[k] == scores[b]
                        && (pair.entry.iou > cur.entry.iou
                            || (pair.entry.iou == cur.entry.iou && lower_j(pair.j, cur.j))));
                if better {
                    *best.last_mut().unwrap() = k;
                }
            }
            _ => best.push(k),
        }
    }
    best
}

fn lower_j(a: Option<usize>, b: Option<usize>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => x < y,
        (Some(_), None) => true,
        _ => false,
    }
}

fn by_score_desc(dets: &[FusedDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy class-wise suppression on rotated BEV footprints.
pub fn nms(dets: Vec<FusedDetection>, iou_thresh: f64) -> Vec<FusedDetection> {
    let order = by_score_desc(&dets);
    let mut keep: Vec<usize> = Vec::new();
    for &k in &order {
        let suppressed = keep.iter().any(|&q| {
            dets[q].class_label == dets[k].class_label
                && rotated_bev_iou(&dets[q].box3d, &dets[k].box3d) >= iou_thresh
        });
        if !suppressed {
            keep.push(k);
        }
    }
    let mut slots: Vec<Option<FusedDetection>> = dets.into_iter().map(Some).collect();
    keep.into_iter().filter_map(|k| slots[k].take()).collect()
}

pub fn filter_uncertainty(dets: Vec<FusedDetection>, u_max: f64) -> Vec<FusedDetection> {
    dets.into_iter()
        .filter(|d| d.uncertainty <= u_max)
        .collect()
}

fn postprocess(dets: Vec<FusedDetection>, cfg: &PipelineConfig) -> Vec<FusedDetection> {
    let confident = dets
        .into_iter()
        .filter(|d| d.score >= cfg.conf_threshold)
        .collect();
    filter_uncertainty(nms(confident, cfg.nms_iou), cfg.u_max)
}

/// Pairs, their scores, and the projected box of every 3D candidate.
pub type ScoredPairs = (Vec<HypotheticalPair>, Vec<f64>, Vec<Option<Box2D>>);

/// Scores every hypothetical pair of a frame.
pub fn score_pairs(
    frame: &FrameInput,
    params: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<ScoredPairs, Error> {
    let grid = build_match_matrix(&frame.dets3d, &frame.dets2d, &frame.calib, cfg.max_range)?;
    let pairs = enumerate_pairs(
        &grid,
        &frame.dets3d,
        &frame.dets2d,
        params,
        cfg.pair_iou_floor,
    )?;
    let scores = pairs
        .iter()
        .map(|p| params.score.score(&p.feature()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((pairs, scores, grid.projected))
}

/// Fuses one frame's 2D and 3D detections into scored, filtered 3D detections.
pub fn fuse_frame(
    frame: &FrameInput,
    params: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<Vec<FusedDetection>, Error> {
    let (pairs, scores, projected) = score_pairs(frame, params, cfg)?;
    let selected = select_best_per_candidate(&pairs, &scores)
        .into_iter()
        .map(|k| {
            let pair = &pairs[k];
            FusedDetection {
                box3d: frame.dets3d[pair.i].box3d,
                bbox: projected[pair.i],
                score: scores[k],
                beliefs: pair.fused.belief().to_vec(),
                uncertainty: pair.fused.uncertainty(),
                class_label: pair.fused.argmax(),
                source: (pair.i, pair.j),
                feature: pair.feature(),
            }
        })
        .collect();
    Ok(postprocess(selected, cfg))
}

/// The 3D detector on its own: detector objectness and label, 3D-head opinion.
pub fn baseline_3d_frame(
    frame: &FrameInput,
    params: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<Vec<FusedDetection>, Error> {
    let grid = build_match_matrix(&frame.dets3d, &[], &frame.calib, cfg.max_range)?;
    let dets = frame
        .dets3d
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let opinion = opinion_from_slice(&params.head3d.evidence(&d.class_scores)?)?;
            Ok(FusedDetection {
                box3d: d.box3d,
                bbox: grid.projected[i],
                score: d.objectness,
                beliefs: opinion.belief().to_vec(),
                uncertainty: opinion.uncertainty(),
                class_label: d.class_label,
                source: (i, None),
                feature: ObjsFeature {
                    iou: 0.0,
                    objs3d: d.objectness,
                    objs2d: crate::fusion_net::NO_MATCH_OBJECTNESS,
                    dis: grid.dis[i],
                    uncertainty: opinion.uncertainty(),
                },
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(postprocess(dets, cfg))
}

/// Fuses many frames; frames are independent so they may run in parallel.
pub fn fuse_frames(
    frames: &[FrameInput],
    params: &ModelParams,
    cfg: &PipelineConfig,
    exec: Execution,
) -> Vec<Result<Vec<FusedDetection>, Error>> {
    par::map(exec, frames, |f| fuse_frame(f, params, cfg))
}

/// A ground-truth object reduced to what target assignment needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledObject {
    pub class_index: usize,
    pub bbox: Box2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingFrame {
    pub input: FrameInput,
    /// `None` when the frame has no label file.
    pub labels: Option<Vec<LabeledObject>>,
}

/// Builds the training samples of one frame under the current parameters.
///
/// A pair's class target is the class of the best-overlapping ground truth
/// (projected 3D box vs. label box, per-class IoU threshold). It is an object
/// when some ground truth of its fused class passes the threshold.
pub fn build_samples(
    frame: &FrameInput,
    labels: &[LabeledObject],
    params: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<Vec<PairSample>, Error> {
    let grid = build_match_matrix(&frame.dets3d, &frame.dets2d, &frame.calib, cfg.max_range)?;
    let pairs = enumerate_pairs(
        &grid,
        &frame.dets3d,
        &frame.dets2d,
        params,
        cfg.pair_iou_floor,
    )?;
    Ok(pairs
        .iter()
        .map(|pair| {
            let overlaps: Vec<(usize, f64)> = match grid.projected[pair.i] {
                Some(p) => labels
                    .iter()
                    .map(|gt| (gt.class_index, iou_axis_aligned(&p, &gt.bbox)))
                    .filter(|&(c, iou)| iou >= cfg.target_iou(c))
                    .collect(),
                None => Vec::new(),
            };
            let class_target = overlaps
                .iter()
                .copied()
                .reduce(|a, b| if b.1 > a.1 { b } else { a })
                .map(|(c, _)| c);
            let predicted = pair.fused.argmax();
            PairSample {
                scores3d: frame.dets3d[pair.i].class_scores.clone(),
                scores2d: pair.j.map(|j| frame.dets2d[j].class_scores.clone()),
                iou: pair.entry.iou,
                objs3d: pair.entry.objs3d,
                objs2d: pair.entry.objs2d,
                dis: pair.entry.dis,
                class_target,
                obj_target: overlaps.iter().any(|&(c, _)| c == predicted),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean per-frame loss of each epoch, with the KL term at full weight.
    pub epoch_losses: Vec<f64>,
    /// Frames without ground truth, skipped every epoch.
    pub skipped_frames: usize,
}

/// Sequential training: Adam on the evidence heads, SGD on the objectness network,
/// one frame per step.
pub fn train(
    frames: &[TrainingFrame],
    cfg: &PipelineConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome, Error> {
    let usable: Vec<&TrainingFrame> = frames.iter().filter(|f| f.labels.is_some()).collect();
    let skipped_frames = frames.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut params = init_params(tcfg.seed, cfg.classes.len(), cfg.kappa);
    let mut adam = AdamState::new(
        params.heads_flat().len(),
        AdamConfig {
            lr: tcfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tcfg.epochs);
    for epoch in 1..=tcfg.epochs {
        let lambda = cfg.lambda(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let frame = usable[k];
            let labels = frame.labels.as_deref().unwrap_or_default();
            let samples = build_samples(&frame.input, labels, &params, cfg)?;
            if samples.is_empty() {
                continue;
            }
            // the log tracks the full objective so epochs stay comparable while lambda ramps
            total += total_loss(&params, &samples, 1.0)?;
            let (_, grad) = total_loss_grad(&params, &samples, lambda)?;
            let mut heads = params.heads_flat();
            adam.step(&mut heads, &grad.heads_flat())?;
            params.assign_heads_flat(&heads);
            let mut score = params.score.flatten();
            sgd_step(&mut score, &grad.score.flatten(), tcfg.lr)?;
            params.score.assign_flat(&score);
        }
        epoch_losses.push(total / usable.len() as f64);
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
        skipped_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_to_image;
    use crate::geometry::testing::pinhole;

    fn calib() -> Calibration {
        pinhole(700.0, 620.0, 190.0, 1242.0, 375.0)
    }

    fn det3(x: f64, z: f64, objectness: f64, scores: Vec<f64>) -> Detection3D {
        let label = (0..scores.len())
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
            .unwrap();
        Detection3D {
            box3d: Box3D {
                x,
                y: 1.6,
                z,
                h: 1.5,
                w: 1.6,
                l: 3.9,
                ry: 0.1,
            },
            objectness,
            class_scores: scores,
            class_label: label,
        }
    }

    fn fused(x: f64, z: f64, score: f64, class_label: usize, u: f64) -> FusedDetection {
        FusedDetection {
            box3d: Box3D {
                x,
                y: 1.6,
                z,
                h: 1.5,
                w: 1.6,
                l: 3.9,
                ry: 0.0,
            },
            bbox: None,
            score,
            beliefs: vec![1.0 - u, 0.0, 0.0],
            uncertainty: u,
            class_label,
            source: (0, None),
            feature: ObjsFeature {
                iou: 0.0,
                objs3d: score,
                objs2d: -10.0,
                dis: 0.1,
                uncertainty: u,
            },
        }
    }

    fn open_config() -> PipelineConfig {
        PipelineConfig {
            conf_threshold: 0.0,
            u_max: 1.0,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn no_candidates_no_output() {
        let frame = FrameInput {
            dets3d: vec![],
            dets2d: vec![],
            calib: calib(),
        };
        let params = init_params(0, 3, 25.0);
        assert!(fuse_frame(&frame, &params, &PipelineConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn lone_3d_candidate_keeps_its_opinion() {
        let d = det3(0.0, 15.0, 0.9, vec![0.9, 0.05, 0.05]);
        let frame = FrameInput {
            dets3d: vec![d.clone()],
            dets2d: vec![],
            calib: calib(),
        };
        let params = init_params(0, 3, 25.0);
        let out = fuse_frame(&frame, &params, &open_config()).unwrap();
        assert_eq!(out.len(), 1);
        let o3 = opinion_from_slice(&params.head3d.evidence(&d.class_scores).unwrap()).unwrap();
        assert_eq!(out[0].beliefs, o3.belief());
        assert_eq!(out[0].uncertainty, o3.uncertainty());
        assert_eq!(out[0].feature.objs2d, -10.0);
        assert_eq!(out[0].source, (0, None));
    }

    #[test]
    fn select_best_rules() {
        let params = init_params(0, 3, 25.0);
        let c = calib();
        let d3 = vec![det3(0.0, 15.0, 0.9, vec![0.9, 0.05, 0.05])];
        let p = project_to_image(&d3[0].box3d, &c).unwrap();
        let near = Box2D::new(p.x1 + 10.0, p.y1, p.x2 + 10.0, p.y2);
        let d2: Vec<Detection2D> = [p, near]
            .into_iter()
            .map(|b| Detection2D {
                box2d: b,
                objectness: 0.9,
                class_scores: vec![0.9, 0.05, 0.05],
                class_label: 0,
            })
            .collect();
        let grid = build_match_matrix(&d3, &d2, &c, 80.0).unwrap();
        let pairs = enumerate_pairs(&grid, &d3, &d2, &params, 0.0).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(select_best_per_candidate(&pairs, &[0.3, 0.7]), vec![1]);
        assert_eq!(select_best_per_candidate(&pairs, &[0.7, 0.3]), vec![0]);
        // equal scores: larger IoU wins (pair 0 is the exact projection)
        assert_eq!(select_best_per_candidate(&pairs, &[0.5, 0.5]), vec![0]);
        let mut swapped = pairs.clone();
        swapped.swap(0, 1);
        assert_eq!(select_best_per_candidate(&swapped, &[0.5, 0.5]), vec![1]);
        // equal scores and IoU: lower j wins
        let mut same = pairs.clone();
        same[1].entry.iou = same[0].entry.iou;
        assert_eq!(select_best_per_candidate(&same, &[0.5, 0.5]), vec![0]);
        assert_eq!(select_best_per_candidate(&pairs[..1], &[0.1]), vec![0]);
    }

    #[test]
    fn nms_cases() {
        let out = nms(
            vec![
                fused(0.0, 10.0, 0.8, 0, 0.05),
                fused(0.0, 10.0, 0.9, 0, 0.05),
            ],
            0.4,
        );
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        let out = nms(
            vec![
                fused(0.0, 10.0, 0.8, 0, 0.05),
                fused(10.0, 10.0, 0.9, 0, 0.05),
            ],
            0.4,
        );
        assert_eq!(out.len(), 2);
        // different classes never suppress each other
        let out = nms(
            vec![
                fused(0.0, 10.0, 0.8, 0, 0.05),
                fused(0.0, 10.0, 0.9, 1, 0.05),
            ],
            0.4,
        );
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn uncertainty_filter() {
        let dets = vec![
            fused(0.0, 10.0, 0.99, 0, 0.1201),
            fused(5.0, 10.0, 0.99, 0, 0.02692),
        ];
        let kept = filter_uncertainty(dets.clone(), 0.10);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].uncertainty, 0.02692);
        assert_eq!(filter_uncertainty(dets.clone(), 1.0), dets);
    }

    #[test]
    fn lambda_schedule() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.lambda(1), 0.1);
        assert_eq!(cfg.lambda(10), 1.0);
        assert_eq!(cfg.lambda(25), 1.0);
        let flat = PipelineConfig {
            lambda_anneal_epochs: 0,
            ..cfg
        };
        assert_eq!(flat.lambda(1), 1.0);
    }

    fn training_frame(labels: Option<Vec<LabeledObject>>) -> TrainingFrame {
        let c = calib();
        let d3 = vec![det3(0.0, 15.0, 0.9, vec![0.3, 0.6, 0.1])];
        let p = project_to_image(&d3[0].box3d, &c).unwrap();
        let d2 = vec![Detection2D {
            box2d: p,
            objectness: 0.9,
            class_scores: vec![0.9, 0.05, 0.05],
            class_label: 0,
        }];
        TrainingFrame {
            input: FrameInput {
                dets3d: d3,
                dets2d: d2,
                calib: c,
            },
            labels,
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let frames = vec![training_frame(Some(vec![]))];
        let tcfg = TrainConfig {
            epochs: 0,
            seed: 3,
            lr: 0.003,
        };
        let out = train(&frames, &PipelineConfig::default(), &tcfg).unwrap();
        assert_eq!(out.params, init_params(3, 3, 25.0));
        assert!(out.epoch_losses.is_empty());
    }

    #[test]
    fn one_epoch_moves_params_and_skips_unlabeled() {
        let c = calib();
        let gt = LabeledObject {
            class_index: 0,
            bbox: project_to_image(&det3(0.0, 15.0, 0.9, vec![1.0, 0.0, 0.0]).box3d, &c).unwrap(),
        };
        let frames = vec![training_frame(Some(vec![gt])), training_frame(None)];
        let tcfg = TrainConfig {
            epochs: 1,
            seed: 3,
            lr: 0.003,
        };
        let out = train(&frames, &PipelineConfig::default(), &tcfg).unwrap();
        assert_ne!(out.params, init_params(3, 3, 25.0));
        assert_eq!(out.epoch_losses.len(), 1);
        assert_eq!(out.skipped_frames, 1);
        assert!(matches!(
            train(&[training_frame(None)], &PipelineConfig::default(), &tcfg),
            Err(Error::EmptyTrainingSet)
        ));
    }

    #[test]
    fn targets_follow_fused_class() {
        let frame = training_frame(None);
        let c = calib();
        let bbox = project_to_image(&frame.input.dets3d[0].box3d, &c).unwrap();
        let params = init_params(0, 3, 25.0);
        let cfg = PipelineConfig::default();
        // the 2D head's car evidence outweighs the 3D head's pedestrian lean
        let car = build_samples(
            &frame.input,
            &[LabeledObject {
                class_index: 0,
                bbox,
            }],
            &params,
            &cfg,
        )
        .unwrap();
        assert_eq!(car.len(), 1);
        assert_eq!(car[0].class_target, Some(0));
        assert!(car[0].obj_target);
        let ped = build_samples(
            &frame.input,
            &[LabeledObject {
                class_index: 1,
                bbox,
            }],
            &params,
            &cfg,
        )
        .unwrap();
        assert_eq!(ped[0].class_target, Some(1));
        assert!(!ped[0].obj_target);
        let none = build_samples(&frame.input, &[], &params, &cfg).unwrap();
        assert_eq!(none[0].class_target, None);
        assert!(!none[0].obj_target);
    }
}
