//! Residuals of the joint problem and their analytic Jacobians.
//!
//! Variables are pose blocks `(x, y, θ)` and segment blocks
//! `(p0.x, p0.y, p1.x, p1.y)` for each side of each human factor.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_angle, Point, Pose2D, Segment};
use crate::model::{
    CorrectionMode, FactorGraph, HumanCorrectionFactor, ObservationRef, RelativePoseFactor, Side,
};

/// Segments shorter than this are pushed back out by a soft barrier.
pub const MIN_SEGMENT_LENGTH: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualWeights {
    /// Translational cost scale of `R_p`, 1/m.
    pub k1: f64,
    /// Rotational cost scale of `R_p`.
    pub k2: f64,
    /// Overall scale of every human-factor row (`R_a`, `R_b`, `R_p`, barrier)
    /// relative to whitened odometry rows.
    pub human: f64,
}

impl Default for ResidualWeights {
    fn default() -> Self {
        Self {
            k1: 2.0,
            k2: 1.0,
            human: 1.0e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variable {
    Pose(usize),
    Segment { factor: usize, side: Side },
}

impl Variable {
    pub fn dim(&self) -> usize {
        match self {
            Variable::Pose(_) => 3,
            Variable::Segment { .. } => 4,
        }
    }
}

/// One scalar residual with its nonzero Jacobian blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub value: f64,
    pub blocks: Vec<(Variable, Vec<f64>)>,
}

impl ResidualRow {
    fn scaled(mut self, s: f64) -> Self {
        self.value *= s;
        for (_, g) in &mut self.blocks {
            g.iter_mut().for_each(|v| *v *= s);
        }
        self
    }
}

/// Upper-triangular square root `U` of the information, `UᵀU = Λ`.
pub fn sqrt_information(info: &Matrix3<f64>) -> Matrix3<f64> {
    match info.cholesky() {
        Some(c) => c.l().transpose(),
        None => Matrix3::zeros(),
    }
}

/// SE(2) error `z⁻¹ ⊕ (x_i⁻¹ ⊕ x_j)` as `(dx, dy, dθ)`.
pub fn relative_error(
    measurement: &crate::geometry::Transform2D,
    xi: &Pose2D,
    xj: &Pose2D,
) -> Vector3<f64> {
    let e = measurement.inverse().compose(&xi.between(xj));
    Vector3::new(
        e.translation.x,
        e.translation.y,
        normalize_angle(e.rotation),
    )
}

/// Whitened odometry residual.
pub fn residual_relative(factor: &RelativePoseFactor, xi: &Pose2D, xj: &Pose2D) -> Vector3<f64> {
    sqrt_information(&factor.information) * relative_error(&factor.measurement, xi, xj)
}

fn rot(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Whitened odometry residual with Jacobians with respect to `x_i` and `x_j`.
pub fn relative_jacobians(
    factor: &RelativePoseFactor,
    xi: &Pose2D,
    xj: &Pose2D,
) -> (Vector3<f64>, Matrix3<f64>, Matrix3<f64>) {
    let sqrt_info = sqrt_information(&factor.information);
    let e = relative_error(&factor.measurement, xi, xj);
    let rz_t = rot(factor.measurement.rotation).transpose();
    let ri_t = rot(xi.theta).transpose();
    let (s, c) = xi.theta.sin_cos();
    let d_ri_t = Matrix2::new(-s, c, -c, -s);
    let dt = xj.position() - xi.position();

    let a = rz_t * ri_t;
    let da_dtheta = rz_t * d_ri_t * dt;
    let mut ji = Matrix3::zeros();
    let mut jj = Matrix3::zeros();
    ji.fixed_view_mut::<2, 2>(0, 0).copy_from(&(-a));
    ji.fixed_view_mut::<2, 1>(0, 2).copy_from(&da_dtheta);
    ji[(2, 2)] = -1.0;
    jj.fixed_view_mut::<2, 2>(0, 0).copy_from(&a);
    jj[(2, 2)] = 1.0;
    (sqrt_info * e, sqrt_info * ji, sqrt_info * jj)
}

pub fn relative_rows(factor: &RelativePoseFactor, xi: &Pose2D, xj: &Pose2D) -> [ResidualRow; 3] {
    let (r, ji, jj) = relative_jacobians(factor, xi, xj);
    std::array::from_fn(|k| ResidualRow {
        value: r[k],
        blocks: vec![
            (
                Variable::Pose(factor.i),
                ji.row(k).iter().copied().collect(),
            ),
            (
                Variable::Pose(factor.j),
                jj.row(k).iter().copied().collect(),
            ),
        ],
    })
}

/// Squared point-to-segment distance and its gradient.
struct SqDist {
    value: f64,
    d_point: Vector2<f64>,
    d_p0: Vector2<f64>,
    d_p1: Vector2<f64>,
}

fn sq_dist_grad(q: &Point, seg: &Segment) -> SqDist {
    let d = seg.p1 - seg.p0;
    let l2 = d.norm_squared();
    let u = if l2 > 0.0 {
        ((q - seg.p0).dot(&d) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let r = q - (seg.p0 + d * u);
    SqDist {
        value: r.norm_squared(),
        d_point: 2.0 * r,
        d_p0: -2.0 * (1.0 - u) * r,
        d_p1: -2.0 * u * r,
    }
}

/// Root-mean-square distance of a selection to its segment, with gradient.
pub fn fit_row(
    graph: &FactorGraph,
    selection: &[ObservationRef],
    seg: &Segment,
    seg_var: Variable,
) -> ResidualRow {
    let n = selection.len().max(1) as f64;
    let mut sum = 0.0;
    let mut pose_grads: Vec<(usize, Vector3<f64>)> = Vec::new();
    let mut d_seg = [0.0; 4];
    for obs in selection {
        let pose = &graph.poses[obs.pose];
        let local = graph.scans[obs.pose].points[obs.index];
        let q = pose.transform_point(&local);
        let g = sq_dist_grad(&q, seg);
        sum += g.value;
        let lever = q - pose.position();
        let d_pose = Vector3::new(
            g.d_point.x,
            g.d_point.y,
            g.d_point.x * -lever.y + g.d_point.y * lever.x,
        );
        match pose_grads.last_mut() {
            Some((p, acc)) if *p == obs.pose => *acc += d_pose,
            _ => pose_grads.push((obs.pose, d_pose)),
        }
        d_seg[0] += g.d_p0.x;
        d_seg[1] += g.d_p0.y;
        d_seg[2] += g.d_p1.x;
        d_seg[3] += g.d_p1.y;
    }
    let mean = sum / n;
    let value = mean.max(0.0).sqrt();
    // d√m = dm / 2√m; the gradient is undefined at an exact fit.
    let scale = if mean > 1e-30 {
        1.0 / (2.0 * value * n)
    } else {
        0.0
    };
    let mut blocks: Vec<(Variable, Vec<f64>)> = pose_grads
        .into_iter()
        .map(|(p, g)| (Variable::Pose(p), (g * scale).iter().copied().collect()))
        .collect();
    blocks.push((seg_var, d_seg.iter().map(|v| v * scale).collect()));
    ResidualRow { value, blocks }
}

/// Unit left normal of `p1 − p0` and its Jacobian with respect to `p1 − p0`.
fn normal_grad(seg: &Segment) -> (Vector2<f64>, Matrix2<f64>) {
    let d = seg.p1 - seg.p0;
    let len = d.norm();
    let dh = d / len;
    let perp = Matrix2::new(0.0, -1.0, 1.0, 0.0);
    let n = perp * dh;
    let dn = perp * (Matrix2::identity() - dh * dh.transpose()) / len;
    (n, dn)
}

fn sign(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// `R_p` for the factor's mode, with its gradient over both segments.
///
/// The sign of `n̂_b` is chosen so that the normals agree (or, for
/// perpendicularity, so the dot product is non-negative).
pub fn relation_row(
    h: &HumanCorrectionFactor,
    factor: usize,
    weights: &ResidualWeights,
) -> ResidualRow {
    let (na, dna) = normal_grad(&h.pa);
    let (nb, dnb) = normal_grad(&h.pb);
    let s = sign(na.dot(&nb));
    let dot = s * na.dot(&nb);
    // Gradients of the sign-corrected dot product.
    let d_dot_na = s * nb;
    let d_dot_nb = s * na;

    let mut value = 0.0;
    let mut g_cma = Vector2::zeros();
    let mut g_cmb = Vector2::zeros();
    let mut g_na = Vector2::zeros();
    let mut g_nb = Vector2::zeros();

    match h.mode {
        CorrectionMode::Perpendicularity => {
            value += weights.k2 * dot;
            g_na += weights.k2 * d_dot_na;
            g_nb += weights.k2 * d_dot_nb;
        }
        _ => {
            value += weights.k2 * (1.0 - dot);
            g_na -= weights.k2 * d_dot_na;
            g_nb -= weights.k2 * d_dot_nb;
        }
    }
    let delta = h.pb.cm() - h.pa.cm();
    match h.mode {
        CorrectionMode::Colocation => {
            let dist = delta.norm();
            value += weights.k1 * dist;
            if dist > 0.0 {
                g_cmb += weights.k1 * delta / dist;
                g_cma -= weights.k1 * delta / dist;
            }
        }
        CorrectionMode::Collinearity => {
            let off = delta.dot(&na);
            value += weights.k1 * off.abs();
            let sg = sign(off) * weights.k1;
            g_cmb += sg * na;
            g_cma -= sg * na;
            g_na += sg * delta;
        }
        _ => {}
    }

    // Chain through cm = (p0 + p1)/2 and n̂(p1 − p0).
    let ga_p1 = 0.5 * g_cma + dna.transpose() * g_na;
    let ga_p0 = 0.5 * g_cma - dna.transpose() * g_na;
    let gb_p1 = 0.5 * g_cmb + dnb.transpose() * g_nb;
    let gb_p0 = 0.5 * g_cmb - dnb.transpose() * g_nb;
    ResidualRow {
        value,
        blocks: vec![
            (
                Variable::Segment {
                    factor,
                    side: Side::A,
                },
                vec![ga_p0.x, ga_p0.y, ga_p1.x, ga_p1.y],
            ),
            (
                Variable::Segment {
                    factor,
                    side: Side::B,
                },
                vec![gb_p0.x, gb_p0.y, gb_p1.x, gb_p1.y],
            ),
        ],
    }
}

/// Soft barrier keeping a free segment from collapsing; zero above the floor.
pub fn barrier_row(seg: &Segment, var: Variable) -> ResidualRow {
    let d = seg.p1 - seg.p0;
    let len = d.norm();
    if len >= MIN_SEGMENT_LENGTH || len == 0.0 {
        return ResidualRow {
            value: (MIN_SEGMENT_LENGTH - len).max(0.0),
            blocks: vec![(var, vec![0.0; 4])],
        };
    }
    let dh = d / len;
    ResidualRow {
        value: MIN_SEGMENT_LENGTH - len,
        blocks: vec![(var, vec![dh.x, dh.y, -dh.x, -dh.y])],
    }
}

/// The three residuals of a human factor, before the overall human scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HumanResiduals {
    pub ra: f64,
    pub rb: f64,
    pub rp: f64,
}

pub fn residual_human(
    h: &HumanCorrectionFactor,
    graph: &FactorGraph,
    weights: &ResidualWeights,
) -> HumanResiduals {
    let va = Variable::Segment {
        factor: 0,
        side: Side::A,
    };
    let vb = Variable::Segment {
        factor: 0,
        side: Side::B,
    };
    HumanResiduals {
        ra: fit_row(graph, &h.sa, &h.pa, va).value,
        rb: fit_row(graph, &h.sb, &h.pb, vb).value,
        rp: relation_row(h, 0, weights).value,
    }
}

/// All rows of human factor `factor`, scaled by `weights.human`:
/// `R_a`, `R_b`, `R_p`, then the two length barriers.
pub fn human_rows(
    graph: &FactorGraph,
    factor: usize,
    weights: &ResidualWeights,
) -> Vec<ResidualRow> {
    let h = &graph.human_factors[factor];
    let va = Variable::Segment {
        factor,
        side: Side::A,
    };
    let vb = Variable::Segment {
        factor,
        side: Side::B,
    };
    [
        fit_row(graph, &h.sa, &h.pa, va),
        fit_row(graph, &h.sb, &h.pb, vb),
        relation_row(h, factor, weights),
        barrier_row(&h.pa, va),
        barrier_row(&h.pb, vb),
    ]
    .into_iter()
    .map(|r| r.scaled(weights.human))
    .collect()
}

/// Per-point split of a fit residual: one row per observation holding its
/// distance to the segment, scaled by `1/√n`, so the squares sum to `R²`.
///
/// Interior projections use the signed distance to the line, clamped ones the
/// distance to the nearer endpoint.
pub fn fit_point_rows(
    graph: &FactorGraph,
    selection: &[ObservationRef],
    seg: &Segment,
    seg_var: Variable,
) -> Vec<ResidualRow> {
    let scale = 1.0 / (selection.len().max(1) as f64).sqrt();
    let d = seg.p1 - seg.p0;
    let l2 = d.norm_squared();
    let (n, dn) = if l2 > 0.0 {
        normal_grad(seg)
    } else {
        (Vector2::zeros(), Matrix2::zeros())
    };
    selection
        .iter()
        .map(|obs| {
            let pose = &graph.poses[obs.pose];
            let q = pose.transform_point(&graph.scans[obs.pose].points[obs.index]);
            let u = if l2 > 0.0 {
                (q - seg.p0).dot(&d) / l2
            } else {
                0.0
            };
            let (value, d_q, d_p0, d_p1) = if u > 0.0 && u < 1.0 {
                let rel = q - seg.p0;
                let d_dir = dn.transpose() * rel;
                (n.dot(&rel), n, -n - d_dir, d_dir)
            } else {
                let end = if u <= 0.0 { seg.p0 } else { seg.p1 };
                let r = q - end;
                let len = r.norm();
                let g = if len > 0.0 { r / len } else { Vector2::zeros() };
                if u <= 0.0 {
                    (len, g, -g, Vector2::zeros())
                } else {
                    (len, g, Vector2::zeros(), -g)
                }
            };
            let lever = q - pose.position();
            let d_theta = d_q.x * -lever.y + d_q.y * lever.x;
            ResidualRow {
                value,
                blocks: vec![
                    (Variable::Pose(obs.pose), vec![d_q.x, d_q.y, d_theta]),
                    (seg_var, vec![d_p0.x, d_p0.y, d_p1.x, d_p1.y]),
                ],
            }
            .scaled(scale)
        })
        .collect()
}

/// Rows of human factor `factor` as the solver linearizes them, scaled by
/// `weights.human`: the per-point split of `R_a` and `R_b`, then `R_p` and the
/// two barriers. Their squares sum to the same cost as [`human_rows`].
pub fn human_solver_rows(
    graph: &FactorGraph,
    factor: usize,
    weights: &ResidualWeights,
) -> Vec<ResidualRow> {
    let h = &graph.human_factors[factor];
    let va = Variable::Segment {
        factor,
        side: Side::A,
    };
    let vb = Variable::Segment {
        factor,
        side: Side::B,
    };
    let mut rows = fit_point_rows(graph, &h.sa, &h.pa, va);
    rows.extend(fit_point_rows(graph, &h.sb, &h.pb, vb));
    rows.push(relation_row(h, factor, weights));
    rows.push(barrier_row(&h.pa, va));
    rows.push(barrier_row(&h.pb, vb));
    rows.into_iter().map(|r| r.scaled(weights.human)).collect()
}

/// The least-squares stack the optimizer works on: odometry rows, then the
/// solver rows of each human factor.
pub fn all_rows(graph: &FactorGraph, weights: &ResidualWeights) -> Vec<ResidualRow> {
    let mut rows = Vec::with_capacity(3 * graph.odometry.len() + 5 * graph.human_factors.len());
    for f in &graph.odometry {
        rows.extend(relative_rows(f, &graph.poses[f.i], &graph.poses[f.j]));
    }
    for k in 0..graph.human_factors.len() {
        rows.extend(human_solver_rows(graph, k, weights));
    }
    rows
}

/// Sum of squared residuals.
pub fn total_cost(graph: &FactorGraph, weights: &ResidualWeights) -> f64 {
    let mut cost = 0.0;
    for f in &graph.odometry {
        cost += residual_relative(f, &graph.poses[f.i], &graph.poses[f.j]).norm_squared();
    }
    for k in 0..graph.human_factors.len() {
        let h = &graph.human_factors[k];
        let r = residual_human(h, graph, weights);
        let ba = (MIN_SEGMENT_LENGTH - h.pa.length()).max(0.0);
        let bb = (MIN_SEGMENT_LENGTH - h.pb.length()).max(0.0);
        let w2 = weights.human * weights.human;
        cost += w2 * (r.ra * r.ra + r.rb * r.rb + r.rp * r.rp + ba * ba + bb * bb);
    }
    cost
}
