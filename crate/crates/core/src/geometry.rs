//! SE(2) algebra, point-to-segment distance and weighted segment fitting.
//!
//! Points are `nalgebra::Vector2<f64>` in meters. Angles are radians and every
//! heading produced here is normalized to `(-π, π]`.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = Vector2<f64>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("segment endpoints coincide or are not finite")]
    DegenerateSegment,
    #[error("cannot fit a segment: {0}")]
    DegenerateFit(&'static str),
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let wrapped = theta.sin().atan2(theta.cos());
    if wrapped <= -PI {
        wrapped + TAU
    } else {
        wrapped
    }
}

fn rotate(angle: f64, v: &Point) -> Point {
    let (s, c) = angle.sin_cos();
    Point::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// A rigid motion `p ↦ R(rotation)·p + translation`.
///
/// Used both as a relative pose (expressed in the frame of the pose it is
/// composed onto) and as a world-frame action on poses and points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform2D {
    pub rotation: f64,
    pub translation: Point,
}

impl Default for Transform2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform2D {
    pub fn new(rotation: f64, tx: f64, ty: f64) -> Self {
        Self {
            rotation: normalize_angle(rotation),
            translation: Point::new(tx, ty),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn from_translation(t: Point) -> Self {
        Self {
            rotation: 0.0,
            translation: t,
        }
    }

    /// Rotation by `angle` about `pivot`.
    pub fn rotation_about(pivot: &Point, angle: f64) -> Self {
        let translation = pivot - rotate(angle, pivot);
        Self {
            rotation: normalize_angle(angle),
            translation,
        }
    }

    pub fn apply(&self, p: &Point) -> Point {
        rotate(self.rotation, p) + self.translation
    }

    /// Rotates a direction vector, ignoring translation.
    pub fn apply_vector(&self, v: &Point) -> Point {
        rotate(self.rotation, v)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Transform2D) -> Transform2D {
        Transform2D {
            rotation: normalize_angle(self.rotation + other.rotation),
            translation: rotate(self.rotation, &other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Transform2D {
        Transform2D {
            rotation: normalize_angle(-self.rotation),
            translation: -rotate(-self.rotation, &self.translation),
        }
    }

    /// Left action on a pose: moves the pose as a rigid body in the world frame.
    pub fn apply_to_pose(&self, pose: &Pose2D) -> Pose2D {
        Pose2D::from_transform(&self.compose(&pose.to_transform()))
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (s, c) = self.rotation.sin_cos();
        Matrix3::new(
            c,
            -s,
            self.translation.x,
            s,
            c,
            self.translation.y,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite() && self.translation.iter().all(|v| v.is_finite())
    }
}

/// A robot pose in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Default for Pose2D {
    fn default() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn to_transform(&self) -> Transform2D {
        Transform2D {
            rotation: self.theta,
            translation: self.position(),
        }
    }

    pub fn from_transform(t: &Transform2D) -> Self {
        Self::new(t.translation.x, t.translation.y, t.rotation)
    }

    /// `self ⊕ rel`, with `rel` expressed in this pose's frame.
    pub fn compose(&self, rel: &Transform2D) -> Pose2D {
        Pose2D::from_transform(&self.to_transform().compose(rel))
    }

    /// The relative transform `self⁻¹ ⊕ other`.
    pub fn between(&self, other: &Pose2D) -> Transform2D {
        self.to_transform().inverse().compose(&other.to_transform())
    }

    /// Maps a point from this pose's sensor frame into the world frame.
    pub fn transform_point(&self, p: &Point) -> Point {
        rotate(self.theta, p) + self.position()
    }

    /// Maps a world-frame point into this pose's sensor frame.
    pub fn inverse_transform_point(&self, p: &Point) -> Point {
        rotate(-self.theta, &(p - self.position()))
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

/// Shorthand for [`Pose2D::compose`].
pub fn compose(a: &Pose2D, rel: &Transform2D) -> Pose2D {
    a.compose(rel)
}

/// A line segment feature between two endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub p0: Point,
    pub p1: Point,
}

impl Segment {
    pub fn new(p0: Point, p1: Point) -> Result<Self, GeometryError> {
        let finite = p0.iter().chain(p1.iter()).all(|v| v.is_finite());
        if !finite || (p1 - p0).norm() <= 0.0 {
            return Err(GeometryError::DegenerateSegment);
        }
        Ok(Self { p0, p1 })
    }

    pub fn from_coords(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        Self::new(Point::new(x0, y0), Point::new(x1, y1))
    }

    pub fn length(&self) -> f64 {
        (self.p1 - self.p0).norm()
    }

    /// Center of mass (midpoint).
    pub fn cm(&self) -> Point {
        (self.p0 + self.p1) * 0.5
    }

    /// Unit vector from `p0` to `p1`.
    pub fn direction(&self) -> Point {
        (self.p1 - self.p0) / self.length()
    }

    /// Unit normal, to the left of the `p0 → p1` direction.
    pub fn normal(&self) -> Point {
        let d = self.direction();
        Point::new(-d.y, d.x)
    }

    pub fn heading(&self) -> f64 {
        let d = self.p1 - self.p0;
        d.y.atan2(d.x)
    }

    pub fn transformed(&self, t: &Transform2D) -> Segment {
        Segment {
            p0: t.apply(&self.p0),
            p1: t.apply(&self.p1),
        }
    }

    /// Parameter in `[0, 1]` of the point on the segment closest to `p`.
    pub fn closest_parameter(&self, p: &Point) -> f64 {
        let d = self.p1 - self.p0;
        ((p - self.p0).dot(&d) / d.norm_squared()).clamp(0.0, 1.0)
    }

    pub fn closest_point(&self, p: &Point) -> Point {
        self.p0 + (self.p1 - self.p0) * self.closest_parameter(p)
    }
}

/// Squared distance from `p` to the nearest point of the closed segment.
pub fn point_segment_sq_dist(p: &Point, seg: &Segment) -> f64 {
    (p - seg.closest_point(p)).norm_squared()
}

/// Acute angle between the infinite lines carrying two segments, in `[0, π/2]`.
pub fn line_angle_between(a: &Segment, b: &Segment) -> f64 {
    let cos = a.direction().dot(&b.direction()).abs().min(1.0);
    cos.acos()
}

/// Principal direction of a symmetric 2×2 scatter `[[sxx, sxy], [sxy, syy]]`.
///
/// Ties (isotropic scatter) resolve to +x; the returned direction always has
/// a non-negative x component, and +y when x is zero.
pub(crate) fn principal_direction(sxx: f64, sxy: f64, syy: f64) -> Point {
    if sxy == 0.0 {
        return if sxx >= syy {
            Point::new(1.0, 0.0)
        } else {
            Point::new(0.0, 1.0)
        };
    }
    let phi = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    Point::new(phi.cos(), phi.sin())
}

/// Weighted total-least-squares segment fit.
///
/// The line passes through the weighted centroid along the principal axis of
/// the weighted scatter; endpoints are the extremal projections of the
/// positively weighted points.
pub fn fit_segment(points: &[Point], weights: &[f64]) -> Result<Segment, GeometryError> {
    assert_eq!(points.len(), weights.len(), "one weight per point");
    let active: Vec<(Point, f64)> = points
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(p, w)| (*p, *w))
        .collect();
    if active.len() < 2 {
        return Err(GeometryError::DegenerateFit(
            "fewer than two weighted points",
        ));
    }
    let mass: f64 = active.iter().map(|(_, w)| w).sum();
    let centroid = active
        .iter()
        .fold(Point::zeros(), |acc, (p, w)| acc + p * *w)
        / mass;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (p, w) in &active {
        let d = p - centroid;
        sxx += w * d.x * d.x;
        sxy += w * d.x * d.y;
        syy += w * d.y * d.y;
    }
    let direction = principal_direction(sxx, sxy, syy);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (p, _) in &active {
        let t = (p - centroid).dot(&direction);
        lo = lo.min(t);
        hi = hi.max(t);
    }
    if !(hi - lo > 1e-12) {
        return Err(GeometryError::DegenerateFit("points are coincident"));
    }
    Segment::new(centroid + direction * lo, centroid + direction * hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn assert_pose_eq(a: &Pose2D, b: &Pose2D, tol: f64) {
        assert_abs_diff_eq!(a.x, b.x, epsilon = tol);
        assert_abs_diff_eq!(a.y, b.y, epsilon = tol);
        assert_abs_diff_eq!(normalize_angle(a.theta - b.theta), 0.0, epsilon = tol);
    }

    #[test]
    fn compose_identity_rotation() {
        let p = compose(
            &Pose2D::new(0.0, 0.0, 0.0),
            &Transform2D::new(0.0, 1.0, 0.0),
        );
        assert_pose_eq(&p, &Pose2D::new(1.0, 0.0, 0.0), 1e-15);
    }

    #[test]
    fn compose_quarter_turn() {
        let p = compose(
            &Pose2D::new(0.0, 0.0, FRAC_PI_2),
            &Transform2D::new(0.0, 1.0, 0.0),
        );
        assert_pose_eq(&p, &Pose2D::new(0.0, 1.0, FRAC_PI_2), 1e-15);
    }

    #[test]
    fn chain_round_trip_returns_to_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let steps: Vec<Transform2D> = (0..100)
            .map(|_| {
                Transform2D::new(
                    rng.random_range(-PI..PI),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect();
        let mut pose = Pose2D::default();
        for s in &steps {
            pose = pose.compose(s);
        }
        for s in steps.iter().rev() {
            pose = pose.compose(&s.inverse());
        }
        assert_pose_eq(&pose, &Pose2D::default(), 1e-9);
    }

    #[test]
    fn normalize_angle_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_abs_diff_eq!(normalize_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(normalize_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(
            normalize_angle(-FRAC_PI_2 - TAU),
            -FRAC_PI_2,
            epsilon = 1e-12
        );
        assert_eq!(normalize_angle(0.25), 0.25);
    }

    #[test]
    fn segment_distance_examples() {
        let seg = Segment::from_coords(0.0, 0.0, 2.0, 0.0).unwrap();
        assert_eq!(point_segment_sq_dist(&Point::new(0.7, 0.0), &seg), 0.0);
        assert_abs_diff_eq!(
            point_segment_sq_dist(&Point::new(1.2, 0.3), &seg),
            0.09,
            epsilon = 1e-15
        );
        let beyond = Point::new(2.3, 0.4);
        // Brute force over a dense sampling of the segment.
        let brute = (0..=200_000)
            .map(|k| {
                let q = Point::new(2.0 * k as f64 / 200_000.0, 0.0);
                (beyond - q).norm_squared()
            })
            .fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(brute, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(point_segment_sq_dist(&beyond, &seg), brute, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_segment_rejected() {
        assert_eq!(
            Segment::from_coords(1.0, 1.0, 1.0, 1.0),
            Err(GeometryError::DegenerateSegment)
        );
        assert!(Segment::from_coords(0.0, f64::NAN, 1.0, 1.0).is_err());
    }

    #[test]
    fn normal_is_left_of_direction() {
        let seg = Segment::from_coords(1.0, 1.0, 3.0, 1.0).unwrap();
        assert_abs_diff_eq!(seg.normal(), Point::new(0.0, 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(seg.normal().dot(&(seg.p1 - seg.p0)), 0.0);
        assert_abs_diff_eq!(seg.cm(), Point::new(2.0, 1.0));
    }

    #[test]
    fn fit_collinear_points() {
        let pts = [
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(2.0, 0.0),
        ];
        let seg = fit_segment(&pts, &[1.0; 3]).unwrap();
        assert_abs_diff_eq!(seg.p0, Point::new(0.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(seg.p1, Point::new(2.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn fit_skewed_pair_of_pairs() {
        let eps = 0.01;
        let pts = [
            Point::new(0.0, eps),
            Point::new(0.0, -eps),
            Point::new(1.0, -eps),
            Point::new(1.0, eps),
        ];
        let seg = fit_segment(&pts, &[1.0; 4]).unwrap();
        // Closed-form 2×2 PCA: sxx = 1, syy = 4ε², sxy = 0 → x-axis exactly.
        let (sxx, syy, sxy): (f64, f64, f64) = (1.0, 4.0 * eps * eps, 0.0);
        let oracle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
        assert!(normalize_angle(seg.heading() - oracle).abs() < 0.02);
    }

    #[test]
    fn fit_isotropic_square_ties_toward_x() {
        let pts = [
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(0.0, 1.0),
        ];
        let seg = fit_segment(&pts, &[1.0; 4]).unwrap();
        assert_abs_diff_eq!(seg.direction(), Point::new(1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn fit_vertical_prefers_positive_y() {
        let pts = [
            Point::new(0.0, 0.0),
            Point::new(0.0, 1.0),
            Point::new(0.0, 3.0),
        ];
        let seg = fit_segment(&pts, &[1.0; 3]).unwrap();
        assert_abs_diff_eq!(seg.direction(), Point::new(0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn fit_rejects_degenerate_inputs() {
        let pts = [Point::new(0.0, 0.0), Point::new(1.0, 0.0)];
        assert!(matches!(
            fit_segment(&pts, &[1.0, 0.0]),
            Err(GeometryError::DegenerateFit(_))
        ));
        let same = [Point::new(0.5, 0.5); 3];
        assert!(matches!(
            fit_segment(&same, &[1.0; 3]),
            Err(GeometryError::DegenerateFit(_))
        ));
    }

    fn arb_pose() -> impl Strategy<Value = Pose2D> {
        (-50.0..50.0f64, -50.0..50.0f64, -PI..PI).prop_map(|(x, y, t)| Pose2D::new(x, y, t))
    }

    fn arb_transform() -> impl Strategy<Value = Transform2D> {
        (-PI..PI, -50.0..50.0f64, -50.0..50.0f64).prop_map(|(r, x, y)| Transform2D::new(r, x, y))
    }

    proptest! {
        #[test]
        fn compose_matches_homogeneous_matrices(a in arb_pose(), rel in arb_transform()) {
            let lhs = a.compose(&rel).to_transform().to_matrix();
            let rhs = a.to_transform().to_matrix() * rel.to_matrix();
            prop_assert!((lhs - rhs).abs().max() < 1e-9);
        }

        #[test]
        fn composition_is_associative(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let l = a.compose(&b).compose(&c).to_matrix();
            let r = a.compose(&b.compose(&c)).to_matrix();
            prop_assert!((l - r).abs().max() < 1e-9);
        }

        #[test]
        fn inverse_cancels(t in arb_transform()) {
            let id = t.inverse().compose(&t);
            prop_assert!(id.rotation.abs() < 1e-12);
            prop_assert!(id.translation.norm() < 1e-12);
        }

        #[test]
        fn theta_stays_normalized(a in arb_pose(), rel in arb_transform()) {
            let p = a.compose(&rel);
            prop_assert!(p.theta > -PI && p.theta <= PI);
            let q = rel.apply_to_pose(&a);
            prop_assert!(q.theta > -PI && q.theta <= PI);
        }

        #[test]
        fn sq_dist_nonnegative_and_zero_on_segment(
            x0 in -5.0..5.0f64, y0 in -5.0..5.0f64, x1 in -5.0..5.0f64, y1 in -5.0..5.0f64,
            px in -10.0..10.0f64, py in -10.0..10.0f64, s in 0.0..1.0f64,
        ) {
            prop_assume!((x1 - x0).hypot(y1 - y0) > 1e-3);
            let seg = Segment::from_coords(x0, y0, x1, y1).unwrap();
            prop_assert!(point_segment_sq_dist(&Point::new(px, py), &seg) >= 0.0);
            let on = seg.p0 + (seg.p1 - seg.p0) * s;
            prop_assert!(point_segment_sq_dist(&on, &seg) < 1e-12);
        }

        #[test]
        fn fit_is_rigidly_equivariant(t in arb_transform(), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point> = (0..20)
                .map(|_| Point::new(rng.random_range(-3.0..3.0), rng.random_range(-0.3..0.3)))
                .collect();
            let w: Vec<f64> = (0..20).map(|_| rng.random_range(0.1..1.0)).collect();
            let moved: Vec<Point> = pts.iter().map(|p| t.apply(p)).collect();
            let a = fit_segment(&pts, &w).unwrap().transformed(&t);
            let b = fit_segment(&moved, &w).unwrap();
            let same = (a.p0 - b.p0).norm().max((a.p1 - b.p1).norm());
            let swapped = (a.p0 - b.p1).norm().max((a.p1 - b.p0).norm());
            prop_assert!(same.min(swapped) < 1e-9);
        }
    }
}
