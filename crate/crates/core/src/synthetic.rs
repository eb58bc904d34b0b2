//! Seeded synthetic driving scenes with paired 2D/3D detector outputs.
//!
//! The 3D detector localizes well but often ranks the wrong class first; the
//! 2D detector classifies reliably. Both emit a few false positives.

use crate::geometry::{project_to_image, rotated_bev_iou, Box2D, Box3D, Calibration};
use crate::kitti_io::{self, observation_angle, ClassList, KittiObject};
use crate::matching::{Detection2D, Detection3D};
use crate::pipeline::{FrameInput, TrainingFrame};
use nalgebra::{Matrix3, Matrix3x4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub frames: usize,
    pub seed: u64,
    pub classes: ClassList,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Chance that the 3D detector ranks a wrong class first.
    pub wrong_class_3d: f64,
    pub detect_prob_3d: f64,
    pub detect_prob_2d: f64,
    pub max_false_3d: usize,
    pub max_false_2d: usize,
    /// Std-dev of 3D center noise in meters.
    pub position_noise: f64,
    /// Std-dev of 2D corner noise in pixels.
    pub pixel_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            frames: 200,
            seed: 0,
            classes: ClassList::default(),
            min_objects: 2,
            max_objects: 6,
            wrong_class_3d: 0.4,
            detect_prob_3d: 0.95,
            detect_prob_2d: 0.95,
            max_false_3d: 2,
            max_false_2d: 1,
            position_noise: 0.05,
            pixel_noise: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub input: FrameInput,
    pub labels: Vec<KittiObject>,
}

impl SyntheticFrame {
    pub fn training_frame(&self, classes: &ClassList) -> TrainingFrame {
        TrainingFrame {
            input: self.input.clone(),
            labels: Some(kitti_io::labels_for_training(&self.labels, classes)),
        }
    }
}

/// KITTI-like camera: 721 px focal length, 1242x375 image.
pub fn kitti_like_calibration() -> Calibration {
    Calibration {
        p2: Matrix3x4::new(
            721.5377,
            0.0,
            609.5593,
            44.85728,
            0.0,
            721.5377,
            172.854,
            0.2163791,
            0.0,
            0.0,
            1.0,
            0.002745884,
        ),
        r0: Matrix3::identity(),
        tr_velo_to_cam: Matrix3x4::new(
            0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, -0.08, 1.0, 0.0, 0.0, -0.27,
        ),
        image_width: Calibration::DEFAULT_IMAGE_WIDTH,
        image_height: Calibration::DEFAULT_IMAGE_HEIGHT,
    }
}

/// Typical (h, w, l) in meters.
fn template_dims(class: &str) -> (f64, f64, f64) {
    match class {
        "Car" | "Van" => (1.52, 1.63, 3.88),
        "Pedestrian" | "Person_sitting" => (1.76, 0.66, 0.84),
        "Cyclist" => (1.74, 0.60, 1.76),
        _ => (1.6, 1.0, 2.0),
    }
}

fn class_prior(classes: &ClassList) -> Vec<f64> {
    let raw: Vec<f64> = classes
        .names()
        .iter()
        .map(|n| if n == "Car" { 3.0 } else { 1.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / total).collect()
}

fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let mut t = rng.random::<f64>();
    for (k, w) in weights.iter().enumerate() {
        if t < *w {
            return k;
        }
        t -= w;
    }
    weights.len() - 1
}

fn other_class(rng: &mut ChaCha8Rng, h: usize, not: usize) -> usize {
    let k = rng.random_range(0..h - 1);
    if k >= not {
        k + 1
    } else {
        k
    }
}

/// Probability-like scores with `top` ranked first.
fn scores(rng: &mut ChaCha8Rng, h: usize, top: usize, lo: f64, hi: f64) -> Vec<f64> {
    let lead = rng.random_range(lo..hi);
    let mut rest: Vec<f64> = (0..h - 1).map(|_| rng.random::<f64>() + 0.05).collect();
    let sum: f64 = rest.iter().sum();
    rest.iter_mut().for_each(|r| *r *= (1.0 - lead) / sum);
    let mut out = Vec::with_capacity(h);
    let mut it = rest.into_iter();
    for k in 0..h {
        out.push(if k == top {
            lead
        } else {
            it.next().unwrap_or(0.0)
        });
    }
    out
}

fn random_box(rng: &mut ChaCha8Rng, class: &str) -> Box3D {
    let (h, w, l) = template_dims(class);
    let z = rng.random_range(8.0..40.0);
    let half_fov = 0.55 * z - 1.0;
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(0.95..1.05);
    Box3D {
        x: rng.random_range(-half_fov..half_fov),
        y: 1.65,
        z,
        h: h * jitter(rng),
        w: w * jitter(rng),
        l: l * jitter(rng),
        ry: rng.random_range(-PI..PI),
    }
}

fn overlaps_any(b: &Box3D, placed: &[Box3D]) -> bool {
    placed.iter().any(|p| {
        let dx = p.x - b.x;
        let dz = p.z - b.z;
        (dx * dx + dz * dz).sqrt() < 4.5 || rotated_bev_iou(p, b) > 0.0
    })
}

fn generate_frame(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    calib: &Calibration,
) -> SyntheticFrame {
    let h = cfg.classes.len();
    let prior = class_prior(&cfg.classes);
    let normal = |s: f64| Normal::new(0.0, s.max(1e-12)).expect("positive std-dev");
    let pos = normal(cfg.position_noise);
    let pix = normal(cfg.pixel_noise);

    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut placed: Vec<Box3D> = Vec::new();
    let mut labels = Vec::new();
    let mut truth: Vec<(usize, Box3D, Box2D)> = Vec::new();
    let mut attempts = 0;
    while truth.len() < count && attempts < 200 {
        attempts += 1;
        let class = pick(rng, &prior);
        let name = cfg.classes.name(class).unwrap_or("Car");
        let b = random_box(rng, name);
        let Some(bbox) = project_to_image(&b, calib) else {
            continue;
        };
        if overlaps_any(&b, &placed) || bbox.height() < 25.0 {
            continue;
        }
        placed.push(b);
        truth.push((class, b, bbox));
        labels.push(KittiObject {
            kind: name.to_string(),
            truncation: 0.0,
            occlusion: rng.random_range(0..=1),
            alpha: observation_angle(&b),
            bbox,
            h: b.h,
            w: b.w,
            l: b.l,
            x: b.x,
            y: b.y,
            z: b.z,
            ry: b.ry,
            score: None,
        });
    }

    let mut dets3d = Vec::new();
    let mut dets2d = Vec::new();
    for &(class, b, bbox) in &truth {
        if rng.random::<f64>() < cfg.detect_prob_3d {
            let top = if rng.random::<f64>() < cfg.wrong_class_3d {
                other_class(rng, h, class)
            } else {
                class
            };
            let noisy = Box3D {
                x: b.x + pos.sample(rng),
                z: b.z + pos.sample(rng),
                ry: b.ry + 0.02 * pos.sample(rng),
                ..b
            };
            dets3d.push(Detection3D {
                box3d: noisy,
                objectness: rng.random_range(0.55..1.0),
                class_scores: scores(rng, h, top, 0.5, 0.9),
                class_label: top,
            });
        }
        if rng.random::<f64>() < cfg.detect_prob_2d {
            let mut jitter = || pix.sample(rng);
            let b2 = Box2D::new(
                bbox.x1 + jitter(),
                bbox.y1 + jitter(),
                bbox.x2 + jitter(),
                bbox.y2 + jitter(),
            );
            if b2.x1 < b2.x2 && b2.y1 < b2.y2 {
                dets2d.push(Detection2D {
                    box2d: b2,
                    objectness: rng.random_range(0.7..1.0),
                    class_scores: scores(rng, h, class, 0.8, 0.98),
                    class_label: class,
                });
            }
        }
    }
    for _ in 0..rng.random_range(0..=cfg.max_false_3d) {
        let class = pick(rng, &prior);
        let b = random_box(rng, cfg.classes.name(class).unwrap_or("Car"));
        if overlaps_any(&b, &placed) {
            continue;
        }
        placed.push(b);
        dets3d.push(Detection3D {
            box3d: b,
            objectness: rng.random_range(0.3..0.95),
            class_scores: scores(rng, h, class, 0.4, 0.8),
            class_label: class,
        });
    }
    for _ in 0..rng.random_range(0..=cfg.max_false_2d) {
        let class = pick(rng, &prior);
        let x1 = rng.random_range(0.0..1100.0);
        let y1 = rng.random_range(100.0..250.0);
        dets2d.push(Detection2D {
            box2d: Box2D::new(
                x1,
                y1,
                x1 + rng.random_range(20.0..120.0),
                y1 + rng.random_range(30.0..100.0),
            ),
            objectness: rng.random_range(0.1..0.6),
            class_scores: scores(rng, h, class, 0.4, 0.8),
            class_label: class,
        });
    }
    SyntheticFrame {
        input: FrameInput {
            dets3d,
            dets2d,
            calib: calib.clone(),
        },
        labels,
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Vec<SyntheticFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let calib = kitti_like_calibration();
    (0..cfg.frames)
        .map(|_| generate_frame(&mut rng, cfg, &calib))
        .collect()
}

/// Writes `det3d/`, `det2d/`, `calib/` and `label_2/` under `root`.
pub fn write_dataset(
    root: &Path,
    frames: &[SyntheticFrame],
    classes: &ClassList,
) -> std::io::Result<()> {
    let dirs = ["det3d", "det2d", "calib", "label_2"];
    for d in dirs {
        std::fs::create_dir_all(root.join(d))?;
    }
    for (k, f) in frames.iter().enumerate() {
        let id = format!("{k:06}");
        let file = |d: &str| kitti_io::frame_file(&root.join(d), &id);
        std::fs::write(
            file("det3d"),
            kitti_io::write_det3d(&f.input.dets3d, classes, &f.input.calib),
        )?;
        std::fs::write(
            file("det2d"),
            kitti_io::write_det2d(&f.input.dets2d, classes),
        )?;
        std::fs::write(file("calib"), kitti_io::write_calib(&f.input.calib))?;
        std::fs::write(file("label_2"), kitti_io::write_objects(&f.labels))?;
    }
    Ok(())
}
