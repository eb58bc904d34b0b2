//! Box geometry in the KITTI camera-rectified frame (x right, y down, z forward).

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use thiserror::Error;

/// Corners closer to the image plane than this are dropped before projection.
pub const MIN_DEPTH: f64 = 0.1;

/// Default normalization range for planar distances, in meters.
pub const DEFAULT_MAX_RANGE: f64 = 80.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("rectified camera to LiDAR transform is singular")]
    Singular,
    #[error("calibration contains non-finite values")]
    NonFinite,
    #[error("image dimensions must be positive, got {0}x{1}")]
    ImageSize(f64, f64),
}

/// Axis-aligned image box in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &Box2D) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }
}

/// Oriented 3D box. `(x, y, z)` is the bottom-face center, `ry` the yaw about the camera y axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub ry: f64,
}

impl Box3D {
    /// Geometric center of the cuboid.
    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y - 0.5 * self.h, self.z)
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }
}

/// KITTI sensor calibration for camera 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub p2: Matrix3x4<f64>,
    pub r0: Matrix3<f64>,
    pub tr_velo_to_cam: Matrix3x4<f64>,
    pub image_width: f64,
    pub image_height: f64,
}

impl Calibration {
    pub const DEFAULT_IMAGE_WIDTH: f64 = 1242.0;
    pub const DEFAULT_IMAGE_HEIGHT: f64 = 375.0;

    pub fn validate(&self) -> Result<(), CalibrationError> {
        let finite = self.p2.iter().all(|v| v.is_finite())
            && self.r0.iter().all(|v| v.is_finite())
            && self.tr_velo_to_cam.iter().all(|v| v.is_finite());
        if !finite {
            return Err(CalibrationError::NonFinite);
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(CalibrationError::ImageSize(
                self.image_width,
                self.image_height,
            ));
        }
        Ok(())
    }

    /// Projects a rectified-camera point to pixels; `None` at or behind the camera center.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let q = self.p2 * Vector4::new(p.x, p.y, p.z, 1.0);
        if q.z <= 0.0 {
            return None;
        }
        Some((q.x / q.z, q.y / q.z))
    }

    /// Homogeneous map from LiDAR coordinates to rectified camera coordinates.
    pub fn velo_to_rect(&self) -> Matrix4<f64> {
        let mut tr = Matrix4::identity();
        tr.fixed_view_mut::<3, 4>(0, 0)
            .copy_from(&self.tr_velo_to_cam);
        let mut r0 = Matrix4::identity();
        r0.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r0);
        r0 * tr
    }

    pub fn rect_to_velo(&self, p: &Vector3<f64>) -> Result<Vector3<f64>, CalibrationError> {
        let inv = self
            .velo_to_rect()
            .try_inverse()
            .ok_or(CalibrationError::Singular)?;
        let v = inv * Vector4::new(p.x, p.y, p.z, 1.0);
        Ok(Vector3::new(v.x, v.y, v.z))
    }

    pub fn velo_to_rect_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let v = self.velo_to_rect() * Vector4::new(p.x, p.y, p.z, 1.0);
        Vector3::new(v.x, v.y, v.z)
    }
}

/// The eight cuboid corners in rectified camera coordinates.
///
/// Corners 0..4 lie on the bottom face (`y`), 4..8 on the top face (`y - h`).
pub fn box3d_corners(b: &Box3D) -> [Vector3<f64>; 8] {
    let (l2, w2) = (0.5 * b.l, 0.5 * b.w);
    let xs = [l2, l2, -l2, -l2, l2, l2, -l2, -l2];
    let ys = [0.0, 0.0, 0.0, 0.0, -b.h, -b.h, -b.h, -b.h];
    let zs = [w2, -w2, -w2, w2, w2, -w2, -w2, w2];
    let (s, c) = b.ry.sin_cos();
    std::array::from_fn(|k| {
        Vector3::new(
            c * xs[k] + s * zs[k] + b.x,
            ys[k] + b.y,
            -s * xs[k] + c * zs[k] + b.z,
        )
    })
}

/// Axis-aligned pixel hull of the in-front corners, before clipping.
pub fn projected_hull(b: &Box3D, calib: &Calibration) -> Option<Box2D> {
    let mut count = 0;
    let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for corner in box3d_corners(b).iter().filter(|c| c.z > MIN_DEPTH) {
        let (u, v) = calib.project_point(corner)?;
        x1 = x1.min(u);
        y1 = y1.min(v);
        x2 = x2.max(u);
        y2 = y2.max(v);
        count += 1;
    }
    if count < 2 {
        return None;
    }
    Some(Box2D::new(x1, y1, x2, y2))
}

/// Projects a 3D box to its image-plane bounding box, clipped to the image.
pub fn project_to_image(b: &Box3D, calib: &Calibration) -> Option<Box2D> {
    let hull = projected_hull(b, calib)?;
    let clipped = Box2D::new(
        hull.x1.clamp(0.0, calib.image_width),
        hull.y1.clamp(0.0, calib.image_height),
        hull.x2.clamp(0.0, calib.image_width),
        hull.y2.clamp(0.0, calib.image_height),
    );
    if clipped.x2 <= clipped.x1 || clipped.y2 <= clipped.y1 {
        return None;
    }
    Some(clipped)
}

pub fn iou_axis_aligned(a: &Box2D, b: &Box2D) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Footprint of a box in the x-z plane, counter-clockwise in (x, z).
pub fn bev_polygon(b: &Box3D) -> [(f64, f64); 4] {
    let c = box3d_corners(b);
    let mut poly = [
        (c[0].x, c[0].z),
        (c[1].x, c[1].z),
        (c[2].x, c[2].z),
        (c[3].x, c[3].z),
    ];
    if signed_area(&poly) < 0.0 {
        poly.reverse();
    }
    poly
}

fn signed_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Sutherland-Hodgman clipping of `subject` by the convex counter-clockwise `clip`.
fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for k in 0..input.len() {
            let cur = input[k];
            let prev = input[(k + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in != prev_in {
                let (d1, d2) = (cross(a, b, prev), cross(a, b, cur));
                let t = d1 / (d1 - d2);
                output.push((prev.0 + t * (cur.0 - prev.0), prev.1 + t * (cur.1 - prev.1)));
            }
            if cur_in {
                output.push(cur);
            }
        }
    }
    output
}

/// Intersection area of two footprints in the x-z plane.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    // cheap rejection on bounding circles
    let (dx, dz) = (a.x - b.x, a.z - b.z);
    let ra = 0.5 * (a.l.hypot(a.w));
    let rb = 0.5 * (b.l.hypot(b.w));
    if dx * dx + dz * dz > (ra + rb) * (ra + rb) {
        return 0.0;
    }
    let inter = clip_convex(&bev_polygon(a), &bev_polygon(b));
    if inter.len() < 3 {
        return 0.0;
    }
    signed_area(&inter).abs()
}

pub fn rotated_bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    let union = a.l * a.w + b.l * b.w - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU: footprint overlap times vertical interval overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    // y points down, so each box spans [y - h, y]
    let top = (a.y - a.h).max(b.y - b.h);
    let bottom = a.y.min(b.y);
    let vertical = (bottom - top).max(0.0);
    let inter = bev_intersection(a, b) * vertical;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Ground-plane distance of the box center from the LiDAR origin, scaled by `max_range`.
pub fn planar_distance_normalized(
    b: &Box3D,
    calib: &Calibration,
    max_range: f64,
) -> Result<f64, CalibrationError> {
    let p = calib.rect_to_velo(&b.center())?;
    Ok((p.x.hypot(p.y) / max_range).clamp(0.0, 1.0))
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Pinhole camera with the given focal length and principal point; LiDAR axes match KITTI.
    pub fn pinhole(f: f64, cx: f64, cy: f64, width: f64, height: f64) -> Calibration {
        Calibration {
            p2: Matrix3x4::new(f, 0.0, cx, 0.0, 0.0, f, cy, 0.0, 0.0, 0.0, 1.0, 0.0),
            r0: Matrix3::identity(),
            tr_velo_to_cam: Matrix3x4::new(
                0.0, -1.0, 0.0, 0.0, //
                0.0, 0.0, -1.0, 0.0, //
                1.0, 0.0, 0.0, 0.0,
            ),
            image_width: width,
            image_height: height,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testing::pinhole;
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn bx(x: f64, z: f64, w: f64, l: f64, ry: f64) -> Box3D {
        Box3D {
            x,
            y: 1.0,
            z,
            h: 1.5,
            w,
            l,
            ry,
        }
    }

    fn sorted(mut pts: Vec<(f64, f64, f64)>) -> Vec<(f64, f64, f64)> {
        let r = |v: f64| (v * 1e9).round() / 1e9 + 0.0;
        pts.iter_mut().for_each(|p| *p = (r(p.0), r(p.1), r(p.2)));
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts
    }

    fn corner_set(b: &Box3D) -> Vec<(f64, f64, f64)> {
        sorted(box3d_corners(b).iter().map(|c| (c.x, c.y, c.z)).collect())
    }

    #[test]
    fn unit_cube_corners() {
        let b = Box3D {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            h: 1.0,
            w: 1.0,
            l: 1.0,
            ry: 0.0,
        };
        let mut expected = Vec::new();
        for x in [-0.5, 0.5] {
            for y in [0.0, -1.0] {
                for z in [-0.5, 0.5] {
                    expected.push((x, y, z));
                }
            }
        }
        assert_eq!(corner_set(&b), sorted(expected));
        let centroid = box3d_corners(&b)
            .iter()
            .fold(Vector3::zeros(), |acc, c| acc + c)
            / 8.0;
        assert_abs_diff_eq!((centroid - b.center()).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn quarter_turn_swaps_extents() {
        let b = Box3D {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            h: 1.0,
            w: 2.0,
            l: 4.0,
            ry: FRAC_PI_2,
        };
        let c = box3d_corners(&b);
        let max_x = c.iter().map(|p| p.x).fold(f64::MIN, f64::max);
        let max_z = c.iter().map(|p| p.z).fold(f64::MIN, f64::max);
        assert_abs_diff_eq!(max_x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(max_z, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn half_turn_is_same_cuboid() {
        let b = Box3D {
            x: 1.0,
            y: 2.0,
            z: 3.0,
            h: 1.0,
            w: 2.0,
            l: 4.0,
            ry: 0.0,
        };
        let flipped = Box3D { ry: PI, ..b };
        assert_eq!(corner_set(&b), corner_set(&flipped));
    }

    #[test]
    fn principal_axis_projection() {
        let calib = pinhole(100.0, 50.0, 50.0, 100.0, 100.0);
        let b = Box3D {
            x: 0.0,
            y: 0.0005,
            z: 10.0,
            h: 0.001,
            w: 0.001,
            l: 0.001,
            ry: 0.0,
        };
        let p = project_to_image(&b, &calib).unwrap();
        let (cx, cy) = p.center();
        assert_abs_diff_eq!(cx, 50.0, epsilon = 1e-6);
        assert_abs_diff_eq!(cy, 50.0, epsilon = 1e-6);
    }

    #[test]
    fn behind_camera_is_absent() {
        let calib = pinhole(100.0, 50.0, 50.0, 100.0, 100.0);
        let b = Box3D {
            x: 0.0,
            y: 0.0,
            z: -10.0,
            h: 1.0,
            w: 1.0,
            l: 1.0,
            ry: 0.0,
        };
        assert_eq!(project_to_image(&b, &calib), None);
    }

    #[test]
    fn partially_outside_is_clipped() {
        let calib = pinhole(100.0, 50.0, 50.0, 100.0, 100.0);
        let b = Box3D {
            x: 5.0,
            y: 0.5,
            z: 10.0,
            h: 1.0,
            w: 1.0,
            l: 1.0,
            ry: 0.0,
        };
        let hull = projected_hull(&b, &calib).unwrap();
        let clipped = project_to_image(&b, &calib).unwrap();
        assert!(hull.x2 > 100.0);
        assert_eq!(clipped.x2, 100.0);
        assert!(clipped.area() < hull.area());
    }

    #[test]
    fn axis_aligned_iou_cases() {
        let a = Box2D::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou_axis_aligned(&a, &a), 1.0);
        assert_eq!(iou_axis_aligned(&a, &Box2D::new(2.0, 2.0, 3.0, 3.0)), 0.0);
        let shifted = Box2D::new(0.5, 0.0, 1.5, 1.0);
        assert_abs_diff_eq!(iou_axis_aligned(&a, &shifted), 1.0 / 3.0, epsilon = 1e-12);
        let degenerate = Box2D::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou_axis_aligned(&degenerate, &degenerate), 0.0);
    }

    #[test]
    fn rotated_iou_cases() {
        let a = bx(1.0, 20.0, 1.6, 3.9, 0.3);
        assert_abs_diff_eq!(rotated_bev_iou(&a, &a), 1.0, epsilon = 1e-9);
        assert_eq!(rotated_bev_iou(&a, &bx(101.0, 20.0, 1.6, 3.9, 0.3)), 0.0);
        // unit square vs. its 45 degree rotation: overlap is the regular octagon
        let s = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let r = bx(0.0, 0.0, 1.0, 1.0, FRAC_PI_4);
        let octagon = 2.0 * (2.0f64.sqrt() - 1.0);
        assert_abs_diff_eq!(
            rotated_bev_iou(&s, &r),
            octagon / (2.0 - octagon),
            epsilon = 1e-9
        );
    }

    #[test]
    fn volumetric_iou_uses_vertical_overlap() {
        let a = Box3D {
            x: 0.0,
            y: 1.0,
            z: 10.0,
            h: 2.0,
            w: 1.0,
            l: 1.0,
            ry: 0.0,
        };
        let b = Box3D { y: 2.0, ..a };
        // half the height overlaps: inter = 1, union = 3
        assert_abs_diff_eq!(iou_3d(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(iou_3d(&a, &a), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn planar_distance_cases() {
        let calib = pinhole(700.0, 600.0, 180.0, 1242.0, 375.0);
        let at = |vx: f64, vy: f64, vz: f64| {
            let c = calib.velo_to_rect_point(&Vector3::new(vx, vy, vz));
            Box3D {
                x: c.x,
                y: c.y + 0.75,
                z: c.z,
                h: 1.5,
                w: 1.0,
                l: 1.0,
                ry: 0.0,
            }
        };
        assert_abs_diff_eq!(
            planar_distance_normalized(&at(0.0, 0.0, -1.0), &calib, 80.0).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            planar_distance_normalized(&at(80.0, 0.0, 0.0), &calib, 80.0).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            planar_distance_normalized(&at(30.0, 40.0, -0.5), &calib, 100.0).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        let mut singular = calib.clone();
        singular.r0 = Matrix3::zeros();
        assert_eq!(
            planar_distance_normalized(&at(1.0, 1.0, 0.0), &singular, 80.0),
            Err(CalibrationError::Singular)
        );
    }

    fn box_strategy() -> impl Strategy<Value = Box3D> {
        (
            -20.0f64..20.0,
            1.0f64..40.0,
            0.3f64..3.0,
            0.3f64..5.0,
            -PI..PI,
            0.5f64..2.5,
        )
            .prop_map(|(x, z, w, l, ry, h)| Box3D {
                x,
                y: 1.6,
                z,
                h,
                w,
                l,
                ry,
            })
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in box_strategy(), b in box_strategy()) {
            let ab = rotated_bev_iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - rotated_bev_iou(&b, &a)).abs() < 1e-12);
            prop_assert!((rotated_bev_iou(&a, &a) - 1.0).abs() < 1e-9);
            let a2 = Box2D::new(a.x, a.z, a.x + a.w, a.z + a.l);
            let b2 = Box2D::new(b.x, b.z, b.x + b.w, b.z + b.l);
            prop_assert_eq!(iou_axis_aligned(&a2, &b2), iou_axis_aligned(&b2, &a2));
        }

        #[test]
        fn iou_translation_invariant(a in box_strategy(), b in box_strategy(), dx in -5.0f64..5.0, dz in -5.0f64..5.0) {
            let shift = |q: &Box3D| Box3D { x: q.x + dx, z: q.z + dz, ..*q };
            prop_assert!((rotated_bev_iou(&a, &b) - rotated_bev_iou(&shift(&a), &shift(&b))).abs() < 1e-9);
            let a2 = Box2D::new(a.x, a.z, a.x + a.w, a.z + a.l);
            let b2 = Box2D::new(b.x, b.z, b.x + b.w, b.z + b.l);
            let s2 = |q: &Box2D| Box2D::new(q.x1 + dx, q.y1 + dz, q.x2 + dx, q.y2 + dz);
            prop_assert!((iou_axis_aligned(&a2, &b2) - iou_axis_aligned(&s2(&a2), &s2(&b2))).abs() < 1e-9);
        }

        #[test]
        fn axis_aligned_rotated_agree(a in box_strategy(), b in box_strategy()) {
            let a = Box3D { ry: 0.0, ..a };
            let b = Box3D { ry: 0.0, ..b };
            // at ry = 0 the length runs along x and the width along z
            let rect = |q: &Box3D| Box2D::new(q.x - q.l / 2.0, q.z - q.w / 2.0, q.x + q.l / 2.0, q.z + q.w / 2.0);
            prop_assert!((rotated_bev_iou(&a, &b) - iou_axis_aligned(&rect(&a), &rect(&b))).abs() < 1e-9);
        }

        #[test]
        fn center_inside_projected_hull(x in -5.0f64..5.0, z in 5.0f64..40.0, ry in -PI..PI) {
            let calib = pinhole(700.0, 600.0, 180.0, 1242.0, 375.0);
            let b = Box3D { x, y: 1.6, z, h: 1.5, w: 1.6, l: 3.9, ry };
            let hull = projected_hull(&b, &calib).unwrap();
            let (u, v) = calib.project_point(&b.center()).unwrap();
            prop_assert!(hull.x1 <= u && u <= hull.x2 && hull.y1 <= v && v <= hull.y2);
        }
    }
}
