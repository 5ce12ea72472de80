//! Explicit application of a human correction and closed-form healing of the
//! resulting break in the pose chain.
//!
//! The correction transform `A` moves the poses of `X_b` and every later pose
//! as one rigid body. That leaves a gap between `x_c = min(X_b) − 1` and its
//! successor. The gap is closed by a world-frame transform `C` acting on `x_c`,
//! which is spread over the links between `max(X_a)` and `x_c` in proportion
//! to each link's translational uncertainty.

use thiserror::Error;

use crate::geometry::{normalize_angle, Point, Pose2D, Segment, Transform2D};
use crate::model::{CorrectionMode, FactorGraph, HumanCorrectionFactor};

use std::f64::consts::{FRAC_PI_2, PI};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorrectionError {
    #[error("correction segment is degenerate")]
    DegenerateSegment,
    #[error("no poses lie strictly between the two selections")]
    EmptyRange,
    #[error("pose range {first}..{last} is outside the graph")]
    OutOfRange { first: usize, last: usize },
}

/// The rigid correction and the first pose it moves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionPlan {
    /// World-frame action `p ↦ R·p + t`.
    pub transform: Transform2D,
    /// Center of mass of `P_b`, the rotation pivot.
    pub pivot: Point,
    /// Every pose with index `>= first_affected` moves.
    pub first_affected: usize,
}

/// Wraps an angle onto `(−π/2, π/2]`; segments carry no direction.
fn axial_angle(angle: f64) -> f64 {
    let mut a = normalize_angle(angle);
    if a > FRAC_PI_2 {
        a -= PI;
    } else if a <= -FRAC_PI_2 {
        a += PI;
    }
    a
}

/// Transform moving `P_b` into the relation with `P_a` that `mode` asks for.
///
/// The rotation is about `cm_b`. Only the motion the mode pins down is
/// applied: colocation moves `cm_b` onto `cm_a`, collinearity removes the
/// offset from `P_a`'s line, and the two orientation modes do not translate.
pub fn compute_transform(
    pa: &Segment,
    pb: &Segment,
    mode: CorrectionMode,
) -> Result<Transform2D, CorrectionError> {
    if !(pa.length() > 0.0 && pb.length() > 0.0) {
        return Err(CorrectionError::DegenerateSegment);
    }
    let target = match mode {
        CorrectionMode::Perpendicularity => {
            let n = pa.normal();
            n.y.atan2(n.x)
        }
        _ => pa.heading(),
    };
    let angle = axial_angle(target - pb.heading());
    let cm_a = pa.cm();
    let cm_b = pb.cm();
    let rotate = Transform2D::rotation_about(&cm_b, angle);
    let shift = match mode {
        CorrectionMode::Colocation => cm_a - cm_b,
        CorrectionMode::Collinearity => {
            let n = pa.normal();
            -n * (cm_b - cm_a).dot(&n)
        }
        CorrectionMode::Parallelism | CorrectionMode::Perpendicularity => Point::zeros(),
    };
    Ok(Transform2D::from_translation(shift).compose(&rotate))
}

pub fn plan(factor: &HumanCorrectionFactor) -> Result<CorrectionPlan, CorrectionError> {
    let transform = compute_transform(&factor.pa, &factor.pb, factor.mode)?;
    Ok(CorrectionPlan {
        transform,
        pivot: factor.pb.cm(),
        first_affected: *factor
            .xb
            .first()
            .ok_or(CorrectionError::DegenerateSegment)?,
    })
}

/// Moves every pose from `plan.first_affected` onwards by `plan.transform`.
pub fn apply_rigid(graph: &FactorGraph, plan: &CorrectionPlan) -> FactorGraph {
    let mut out = graph.clone();
    for pose in out.poses.iter_mut().skip(plan.first_affected) {
        *pose = plan.transform.apply_to_pose(pose);
    }
    out
}

/// World-frame transform taking `x_c` to where it must be so that the link to
/// the already moved `x_b0` again equals `a_cb`.
pub fn gap_correction(x_c: &Pose2D, x_b0: &Pose2D, a_cb: &Transform2D) -> Transform2D {
    let target = x_b0.to_transform().compose(&a_cb.inverse());
    target.compose(&x_c.to_transform().inverse())
}

/// How a correction was distributed along the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Backpropagation {
    /// Index of the last pose that stays put.
    pub anchor: usize,
    /// Fraction of the correction absorbed by each link `anchor+k → anchor+k+1`.
    pub fractions: Vec<f64>,
    /// Incremental world-frame updates; applied in order they compose to `C`.
    pub updates: Vec<Transform2D>,
}

impl Backpropagation {
    /// `U_n ∘ … ∘ U_1`.
    pub fn product(&self) -> Transform2D {
        self.updates
            .iter()
            .fold(Transform2D::identity(), |acc, u| u.compose(&acc))
    }
}

/// Trace of the translational block of a link's covariance.
fn translation_variance(graph: &FactorGraph, link: usize) -> f64 {
    let info = graph
        .odometry
        .iter()
        .find(|f| f.i == link)
        .map(|f| f.information);
    match info.and_then(|m| m.try_inverse()) {
        Some(cov) => (cov[(0, 0)] + cov[(1, 1)]).max(0.0),
        None => 0.0,
    }
}

/// Spreads `correction` (acting on pose `c_index` in the world frame) over the
/// links between `anchor` and `c_index`.
///
/// Pose `anchor + k` moves by `G_k`, the rotation by `β_k·φ` about the anchor
/// position followed by `β_k` of the remaining translation, with `β_k` the
/// cumulative link fraction. `G_n = C`, so the updates telescope exactly.
pub fn backpropagate(
    graph: &FactorGraph,
    anchor: usize,
    c_index: usize,
    correction: &Transform2D,
) -> Result<(FactorGraph, Backpropagation), CorrectionError> {
    if c_index >= graph.num_poses() {
        return Err(CorrectionError::OutOfRange {
            first: anchor,
            last: c_index,
        });
    }
    if c_index <= anchor {
        return Err(CorrectionError::EmptyRange);
    }
    let links = c_index - anchor;
    let mut weights: Vec<f64> = (anchor..c_index)
        .map(|l| translation_variance(graph, l))
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        weights = vec![1.0; links];
    }
    let total: f64 = weights.iter().sum();
    let fractions: Vec<f64> = weights.iter().map(|w| w / total).collect();

    let pivot = graph.poses[anchor].position();
    let phi = correction.rotation;
    let shift = correction.apply(&pivot) - pivot;
    let partial = |beta: f64| {
        Transform2D::from_translation(shift * beta)
            .compose(&Transform2D::rotation_about(&pivot, phi * beta))
    };

    let mut out = graph.clone();
    let mut updates = Vec::with_capacity(links);
    let mut previous = Transform2D::identity();
    let mut beta = 0.0;
    for k in 1..=links {
        beta += fractions[k - 1];
        let cumulative = if k == links {
            *correction
        } else {
            partial(beta)
        };
        updates.push(cumulative.compose(&previous.inverse()));
        let idx = anchor + k;
        out.poses[idx] = cumulative.apply_to_pose(&graph.poses[idx]);
        previous = cumulative;
    }
    Ok((
        out,
        Backpropagation {
            anchor,
            fractions,
            updates,
        },
    ))
}

/// Outcome of applying a factor's explicit correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AppliedCorrection {
    pub graph: FactorGraph,
    pub plan: CorrectionPlan,
    pub gap: Transform2D,
    /// `None` when the two selections are adjacent in the chain.
    pub backprop: Option<Backpropagation>,
}

/// Rigidly corrects `X_b` and its successors, then heals the chain break.
pub fn apply_correction(
    graph: &FactorGraph,
    factor: &HumanCorrectionFactor,
) -> Result<AppliedCorrection, CorrectionError> {
    let plan = plan(factor)?;
    let anchor = *factor.xa.last().ok_or(CorrectionError::DegenerateSegment)?;
    let b0 = plan.first_affected;
    if b0 >= graph.num_poses() || anchor >= b0 {
        return Err(CorrectionError::OutOfRange {
            first: anchor,
            last: b0,
        });
    }
    let moved = apply_rigid(graph, &plan);
    let c = b0 - 1;
    let a_cb = graph.poses[c].between(&graph.poses[b0]);
    let gap = gap_correction(&moved.poses[c], &moved.poses[b0], &a_cb);
    match backpropagate(&moved, anchor, c, &gap) {
        Ok((healed, bp)) => Ok(AppliedCorrection {
            graph: healed,
            plan,
            gap,
            backprop: Some(bp),
        }),
        Err(CorrectionError::EmptyRange) => Ok(AppliedCorrection {
            graph: moved,
            plan,
            gap,
            backprop: None,
        }),
        Err(e) => Err(e),
    }
}
