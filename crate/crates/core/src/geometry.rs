//! Rotated box geometry in the ground plane and in 3D.
//!
//! Footprints are convex rectangles, so intersections are computed exactly
//! with convex polygon clipping and areas with the shoelace formula. The
//! generalized IoU uses the convex hull of both footprints (times the joint
//! vertical span in 3D) as the enclosing region.

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use crate::error::{Error, Result};

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = a - two_pi * ((a + PI) / two_pi).floor();
    // floor() can land exactly on +pi through rounding
    if w >= PI {
        w - two_pi
    } else {
        w
    }
}

/// An oriented 3D box. `size` is `(w, l, h)`; the length axis points along `yaw`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Vector3<f64>,
    pub size: Vector3<f64>,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Vector3<f64>, size: Vector3<f64>, yaw: f64) -> Result<Self> {
        if !center.iter().all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(Error::InvalidBox("non-finite center or yaw".into()));
        }
        if !size.iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(Error::InvalidBox(format!(
                "size components must be positive, got ({}, {}, {})",
                size[0], size[1], size[2]
            )));
        }
        Ok(Box3D {
            center,
            size,
            yaw: wrap_angle(yaw),
        })
    }

    /// Convenience constructor from scalar fields.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, yaw: f64) -> Result<Self> {
        Self::new(Vector3::new(x, y, z), Vector3::new(w, l, h), yaw)
    }

    pub fn width(&self) -> f64 {
        self.size[0]
    }

    pub fn length(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn bottom(&self) -> f64 {
        self.center[2] - 0.5 * self.height()
    }

    pub fn top(&self) -> f64 {
        self.center[2] + 0.5 * self.height()
    }

    pub fn bev_area(&self) -> f64 {
        self.width() * self.length()
    }

    pub fn bev_center(&self) -> Vector2<f64> {
        Vector2::new(self.center[0], self.center[1])
    }
}

/// A simple polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct BevPolygon {
    pub vertices: Vec<Vector2<f64>>,
}

impl BevPolygon {
    /// Signed shoelace area; positive for counter-clockwise order.
    pub fn signed_area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }
}

fn shoelace(pts: &[Vector2<f64>]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

/// Ground-plane rectangle of `b`, rotated by its yaw, in CCW order.
pub fn bev_footprint(b: &Box3D) -> BevPolygon {
    let (s, c) = b.yaw.sin_cos();
    let hl = 0.5 * b.length();
    let hw = 0.5 * b.width();
    let local = [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)];
    let vertices = local
        .iter()
        .map(|&(lx, ly)| Vector2::new(b.center[0] + c * lx - s * ly, b.center[1] + s * lx + c * ly))
        .collect();
    BevPolygon { vertices }
}

fn cross(o: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Clips convex `subject` against convex CCW `clip` (Sutherland-Hodgman).
fn clip_convex(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let dp = cross(a, b, p);
            let dq = cross(a, b, q);
            let p_in = dp >= 0.0;
            let q_in = dq >= 0.0;
            if p_in {
                output.push(p);
            }
            if p_in != q_in {
                let t = dp / (dp - dq);
                output.push(p + (q - p) * t);
            }
        }
    }
    output
}

/// Area of the intersection of two convex CCW polygons.
pub fn intersection_area(a: &BevPolygon, b: &BevPolygon) -> f64 {
    let clipped = clip_convex(&a.vertices, &b.vertices);
    shoelace(&clipped).max(0.0)
}

/// Convex hull (Andrew's monotone chain), CCW, collinear points dropped.
pub fn convex_hull(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts = points.to_vec();
    pts.sort_by(|p, q| p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * pts.len());
    for &p in pts.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn hull_area(a: &BevPolygon, b: &BevPolygon) -> f64 {
    let all: Vec<_> = a.vertices.iter().chain(b.vertices.iter()).copied().collect();
    shoelace(&convex_hull(&all))
}

/// Overlap terms shared by the IoU variants.
#[derive(Debug, Clone, Copy)]
struct Overlap {
    intersection: f64,
    union: f64,
    hull: f64,
}

fn overlap_bev(a: &Box3D, b: &Box3D) -> Overlap {
    let pa = bev_footprint(a);
    let pb = bev_footprint(b);
    let inter = intersection_area(&pa, &pb);
    Overlap {
        intersection: inter,
        union: a.bev_area() + b.bev_area() - inter,
        hull: hull_area(&pa, &pb),
    }
}

fn overlap_3d(a: &Box3D, b: &Box3D) -> Overlap {
    let pa = bev_footprint(a);
    let pb = bev_footprint(b);
    let dz = (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(0.0);
    let span = a.top().max(b.top()) - a.bottom().min(b.bottom());
    let inter = intersection_area(&pa, &pb) * dz;
    Overlap {
        intersection: inter,
        union: a.volume() + b.volume() - inter,
        hull: hull_area(&pa, &pb) * span,
    }
}

impl Overlap {
    fn iou(&self) -> f64 {
        self.intersection / self.union
    }

    fn giou(&self) -> f64 {
        self.iou() + self.union / self.hull - 1.0
    }
}

/// Intersection volume of two boxes.
pub fn intersection_volume(a: &Box3D, b: &Box3D) -> f64 {
    overlap_3d(a, b).intersection
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    overlap_3d(a, b).iou()
}

pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    overlap_bev(a, b).iou()
}

/// Generalized IoU of two oriented 3D boxes, in `[-1, 1]`.
pub fn giou3d(a: &Box3D, b: &Box3D) -> f64 {
    overlap_3d(a, b).giou()
}

/// Generalized IoU of the ground-plane footprints, in `[-1, 1]`.
pub fn giou_bev(a: &Box3D, b: &Box3D) -> f64 {
    overlap_bev(a, b).giou()
}

/// Greedy non-maximum suppression on BEV IoU.
///
/// Boxes are visited by descending score (stable, so equal scores keep input
/// order) and a box is kept unless it overlaps an already kept box by more
/// than `overlap_threshold`. Returns the kept indices in visiting order.
pub fn nms(boxes: &[(Box3D, f64)], overlap_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].1.total_cmp(&boxes[i].1));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| iou_bev(&boxes[k].0, &boxes[i].0) > overlap_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cube(x: f64, y: f64, z: f64, s: f64) -> Box3D {
        Box3D::from_parts(x, y, z, s, s, s, 0.0).unwrap()
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI + 0.1), -PI + 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.3), 0.3);
        for k in -50..50 {
            let w = wrap_angle(k as f64 * 0.77);
            assert!((-PI..PI).contains(&w));
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(Box3D::from_parts(0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0).is_err());
        assert!(Box3D::from_parts(0.0, 0.0, 0.0, -1.0, 1.0, 1.0, 0.0).is_err());
        assert!(Box3D::from_parts(0.0, f64::NAN, 0.0, 1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn unit_footprint() {
        let p = bev_footprint(&cube(0.0, 0.0, 0.0, 1.0));
        let mut got: Vec<(f64, f64)> = p.vertices.iter().map(|v| (v.x, v.y)).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)]);
        assert!(p.signed_area() > 0.0);
    }

    #[test]
    fn footprint_quarter_turn_same_vertex_set() {
        let a = bev_footprint(&cube(0.0, 0.0, 0.0, 1.0));
        let b = bev_footprint(&Box3D::from_parts(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, PI / 2.0).unwrap());
        for v in &a.vertices {
            assert!(b.vertices.iter().any(|w| (v - w).norm() < 1e-12));
        }
    }

    #[test]
    fn rotated_rectangle_area() {
        let b = Box3D::from_parts(0.0, 0.0, 0.0, 1.0, 2.0, 1.0, PI / 4.0).unwrap();
        let p = bev_footprint(&b);
        let (s, c) = (PI / 4.0).sin_cos();
        let expected = Vector2::new(c * 1.0 - s * (-0.5), s * 1.0 + c * (-0.5));
        assert!((p.vertices[0] - expected).norm() < 1e-12);
        assert_abs_diff_eq!(p.signed_area(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn giou_closed_form_cases() {
        let a = Box3D::from_parts(1.0, -2.0, 0.3, 1.7, 4.2, 1.5, 0.4).unwrap();
        assert_abs_diff_eq!(giou3d(&a, &a), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(giou_bev(&a, &a), 1.0, epsilon = 1e-9);

        let touching = (cube(0.0, 0.0, 0.0, 2.0), cube(2.0, 0.0, 0.0, 2.0));
        assert_abs_diff_eq!(giou3d(&touching.0, &touching.1), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(giou_bev(&touching.0, &touching.1), 0.0, epsilon = 1e-9);

        let far = (cube(0.0, 0.0, 0.0, 1.0), cube(10.0, 0.0, 0.0, 1.0));
        assert_abs_diff_eq!(giou3d(&far.0, &far.1), 2.0 / 11.0 - 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(giou_bev(&far.0, &far.1), 2.0 / 11.0 - 1.0, epsilon = 1e-9);
    }

    #[test]
    fn vertical_offset_kills_3d_not_bev() {
        let a = cube(0.0, 0.0, 0.0, 2.0);
        let b = cube(0.2, 0.0, 3.0, 2.0);
        assert_eq!(intersection_volume(&a, &b), 0.0);
        assert!(giou3d(&a, &b) < 0.0);
        assert!(giou_bev(&a, &b) > 0.8);
    }

    #[test]
    fn nms_cases() {
        assert!(nms(&[], 0.5).is_empty());
        let a = cube(0.0, 0.0, 0.0, 2.0);
        assert_eq!(nms(&[(a, 0.4)], 0.5), vec![0]);
        assert_eq!(nms(&[(a, 0.8), (a, 0.9)], 0.5), vec![1]);

        // B shifted so that IoU with A is 0.7: overlap 2*(2-d)/(8-2*(2-d)) = 0.7
        let d = 2.0 - 0.7 * 8.0 / (2.0 * 1.7);
        let b = cube(d, 0.0, 0.0, 2.0);
        assert_abs_diff_eq!(iou_bev(&a, &b), 0.7, epsilon = 1e-9);
        let c = cube(20.0, 0.0, 0.0, 2.0);
        let mut kept = nms(&[(a, 0.9), (b, 0.8), (c, 0.5)], 0.5);
        kept.sort();
        assert_eq!(kept, vec![0, 2]);
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let a = cube(0.0, 0.0, 0.0, 2.0);
        assert_eq!(nms(&[(a, 0.7), (a, 0.7)], 0.5), vec![0]);
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (
            -4.0..4.0f64,
            -4.0..4.0f64,
            -1.0..1.0f64,
            0.3..3.0f64,
            0.3..5.0f64,
            0.3..2.5f64,
            -PI..PI,
        )
            .prop_map(|(x, y, z, w, l, h, t)| Box3D::from_parts(x, y, z, w, l, h, t).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn giou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let g = giou3d(&a, &b);
            prop_assert!((g - giou3d(&b, &a)).abs() < 1e-9);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&g));
            prop_assert!(g <= iou3d(&a, &b) + 1e-12);
        }

        #[test]
        fn giou_rigid_invariance(a in arb_box(), b in arb_box(), tx in -50.0..50.0f64, ty in -50.0..50.0f64, rot in -PI..PI) {
            let (s, c) = rot.sin_cos();
            let mv = |bx: &Box3D| {
                let x = c * bx.center[0] - s * bx.center[1] + tx;
                let y = s * bx.center[0] + c * bx.center[1] + ty;
                Box3D::new(Vector3::new(x, y, bx.center[2]), bx.size, bx.yaw + rot).unwrap()
            };
            prop_assert!((giou3d(&a, &b) - giou3d(&mv(&a), &mv(&b))).abs() < 1e-9);
            prop_assert!((giou_bev(&a, &b) - giou_bev(&mv(&a), &mv(&b))).abs() < 1e-9);
        }

        #[test]
        fn nms_permutation_invariant(boxes in prop::collection::vec((arb_box(), 0.0..1.0f64), 1..8), seed in any::<u64>()) {
            let mut scores: Vec<f64> = boxes.iter().map(|b| b.1).collect();
            scores.sort_by(f64::total_cmp);
            scores.dedup();
            prop_assume!(scores.len() == boxes.len());
            let base: Vec<usize> = nms(&boxes, 0.3);
            let mut perm: Vec<usize> = (0..boxes.len()).collect();
            let mut s = seed;
            for i in (1..perm.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let shuffled: Vec<_> = perm.iter().map(|&i| boxes[i]).collect();
            let mut mapped: Vec<usize> = nms(&shuffled, 0.3).into_iter().map(|k| perm[k]).collect();
            let mut base_sorted = base;
            base_sorted.sort();
            mapped.sort();
            prop_assert_eq!(base_sorted, mapped);
        }
    }
}
