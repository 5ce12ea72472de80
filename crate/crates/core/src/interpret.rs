//! Snapping raw human strokes onto map features with expectation maximization.
//!
//! Each stroke seeds a segment estimate. The E-step scores nearby scan points
//! with a Gaussian-plus-uniform mixture over their squared distance to the
//! current segment; the M-step refits the segment by weighted total least
//! squares. Sides `a` and `b` are interpreted independently.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{fit_segment, point_segment_sq_dist, GeometryError, Point, Segment};
use crate::model::{
    CorrectionMode, FactorError, FactorGraph, HumanCorrectionFactor, ObservationRef, Side,
};

/// Strokes shorter than this are rejected as accidental clicks.
pub const MIN_STROKE_LENGTH: f64 = 1e-3;

/// Mixing weight of the uniform outlier component.
pub const OUTLIER_MIX: f64 = 0.1;

/// Responsibility at or above which a point joins the selection.
pub const HARD_ASSIGNMENT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InterpretError {
    #[error("stroke {0:?} is shorter than 1 mm or not finite")]
    DegenerateStroke(Side),
    #[error("stroke {0:?} selects no pose with enough supporting points")]
    InsufficientSelection(Side),
    #[error("the two strokes select interleaved pose ranges")]
    InterleavedSelection,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Raw stroke pair as drawn, in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawCorrection {
    pub pa0: Segment,
    pub pb0: Segment,
    pub mode: CorrectionMode,
}

impl RawCorrection {
    pub fn new(pa0: Segment, pb0: Segment, mode: CorrectionMode) -> Result<Self, InterpretError> {
        let raw = Self { pa0, pb0, mode };
        raw.check()?;
        Ok(raw)
    }

    pub fn check(&self) -> Result<(), InterpretError> {
        for (side, seg) in [(Side::A, &self.pa0), (Side::B, &self.pb0)] {
            let finite = seg.p0.iter().chain(seg.p1.iter()).all(|v| v.is_finite());
            if !finite || !(seg.length() > MIN_STROKE_LENGTH) {
                return Err(InterpretError::DegenerateStroke(side));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpretationParams {
    /// Standard deviation of the human's pointing accuracy, meters.
    pub sigma: f64,
    /// Half-width of the candidate window around a segment, meters.
    pub neighborhood: f64,
    /// Minimum selected points for a pose to join `X_a` / `X_b`.
    pub t_p: usize,
    pub max_iters: usize,
    /// Endpoint convergence threshold, meters.
    pub tol: f64,
}

impl Default for InterpretationParams {
    fn default() -> Self {
        let sigma = 0.05;
        Self {
            sigma,
            neighborhood: 4.0 * sigma,
            t_p: 5,
            max_iters: 20,
            tol: 1e-4,
        }
    }
}

impl InterpretationParams {
    /// Uses `sigma` and keeps the window at four standard deviations.
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            neighborhood: 4.0 * sigma,
            ..Self::default()
        }
    }
}

/// Per-candidate responsibilities of the feature component.
#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    pub weights: Vec<f64>,
}

impl Membership {
    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w >= HARD_ASSIGNMENT)
            .map(|(i, _)| i)
    }
}

/// A world-frame scan point near a stroke.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub obs: ObservationRef,
    pub point: Point,
}

/// All scan points whose squared distance to `seg` is at most `neighborhood²`,
/// in pose then point order.
pub fn candidate_points(graph: &FactorGraph, seg: &Segment, neighborhood: f64) -> Vec<Candidate> {
    let limit = neighborhood * neighborhood;
    let mut out = Vec::new();
    for (pose_id, (pose, scan)) in graph.poses.iter().zip(&graph.scans).enumerate() {
        for (index, p) in scan.points.iter().enumerate() {
            let w = pose.transform_point(p);
            if point_segment_sq_dist(&w, seg) <= limit {
                out.push(Candidate {
                    obs: ObservationRef::new(pose_id, index),
                    point: w,
                });
            }
        }
    }
    out
}

/// Gaussian feature component plus a uniform outlier floor over the window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureModel {
    pub sigma: f64,
    pub window: f64,
}

impl MixtureModel {
    pub fn new(params: &InterpretationParams) -> Self {
        Self {
            sigma: params.sigma,
            window: params.neighborhood,
        }
    }

    /// `exp(-δ / 2σ²)`, the unnormalized Gaussian factor.
    pub fn gaussian_factor(&self, sq_dist: f64) -> f64 {
        (-sq_dist / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Weighted feature density `(1 − π)·𝒩(d; 0, σ²)` as a function of `δ = d²`.
    pub fn feature_density(&self, sq_dist: f64) -> f64 {
        let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * self.sigma);
        (1.0 - OUTLIER_MIX) * norm * self.gaussian_factor(sq_dist)
    }

    /// Weighted outlier density `π / (2·window)`.
    pub fn outlier_density(&self) -> f64 {
        OUTLIER_MIX / (2.0 * self.window)
    }

    /// Ratio of outlier to feature density at zero distance.
    pub fn floor(&self) -> f64 {
        self.outlier_density() / self.feature_density(0.0)
    }

    pub fn responsibility(&self, sq_dist: f64) -> f64 {
        let g = self.feature_density(sq_dist);
        g / (g + self.outlier_density())
    }

    /// Expected complete-data log-likelihood of `seg` under fixed responsibilities.
    pub fn expected_log_likelihood(&self, points: &[Point], weights: &[f64], seg: &Segment) -> f64 {
        let log_u = self.outlier_density().ln();
        let norm = ((1.0 - OUTLIER_MIX) / ((2.0 * std::f64::consts::PI).sqrt() * self.sigma)).ln();
        points
            .iter()
            .zip(weights)
            .map(|(p, w)| {
                let log_g = norm - point_segment_sq_dist(p, seg) / (2.0 * self.sigma * self.sigma);
                w * log_g + (1.0 - w) * log_u
            })
            .sum()
    }

    /// Observed-data log-likelihood `Σ log(g + u)`.
    pub fn log_likelihood(&self, points: &[Point], seg: &Segment) -> f64 {
        let u = self.outlier_density();
        points
            .iter()
            .map(|p| (self.feature_density(point_segment_sq_dist(p, seg)) + u).ln())
            .sum()
    }
}

/// Responsibilities of the feature component for each point.
pub fn e_step(points: &[Point], seg: &Segment, params: &InterpretationParams) -> Membership {
    let model = MixtureModel::new(params);
    Membership {
        weights: points
            .iter()
            .map(|p| model.responsibility(point_segment_sq_dist(p, seg)))
            .collect(),
    }
}

/// Weighted refit. The line uses every weight; the endpoints span the points
/// whose responsibility reaches the hard-assignment threshold.
pub fn m_step(points: &[Point], membership: &Membership) -> Result<Segment, GeometryError> {
    if membership.mass() < 2.0 {
        return Err(GeometryError::DegenerateFit(
            "responsibility mass below two points",
        ));
    }
    let line = fit_segment(points, &membership.weights)?;
    let (origin, dir) = (line.cm(), line.direction());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in membership.selected() {
        let t = (points[i] - origin).dot(&dir);
        lo = lo.min(t);
        hi = hi.max(t);
    }
    if !(hi - lo > 1e-12) {
        return Err(GeometryError::DegenerateFit(
            "fewer than two selected points",
        ));
    }
    Segment::new(origin + dir * lo, origin + dir * hi)
}

/// One EM iteration's likelihoods, evaluated on that iteration's candidates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmIteration {
    pub candidates: usize,
    /// Expected complete-data log-likelihood at the incoming estimate.
    pub before: f64,
    /// The same quantity at the refitted estimate.
    pub after: f64,
    /// Largest endpoint displacement of this step, meters.
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmTrace {
    pub iterations: Vec<EmIteration>,
    pub converged: bool,
}

/// Result of interpreting one stroke.
#[derive(Debug, Clone, PartialEq)]
pub struct SideInterpretation {
    pub segment: Segment,
    pub selection: Vec<ObservationRef>,
    pub trace: EmTrace,
}

fn endpoint_shift(a: &Segment, b: &Segment) -> f64 {
    let same = (a.p0 - b.p0).norm().max((a.p1 - b.p1).norm());
    let swapped = (a.p0 - b.p1).norm().max((a.p1 - b.p0).norm());
    same.min(swapped)
}

/// Points whose projection onto the raw stroke falls outside the stroke's
/// extent grown by the window never join the selection.
struct ExtentLimit {
    origin: Point,
    dir: Point,
    lo: f64,
    hi: f64,
}

impl ExtentLimit {
    fn new(raw: &Segment, margin: f64) -> Self {
        Self {
            origin: raw.p0,
            dir: raw.direction(),
            lo: -margin,
            hi: raw.length() + margin,
        }
    }

    fn admits(&self, p: &Point) -> bool {
        let t = (p - self.origin).dot(&self.dir);
        t >= self.lo && t <= self.hi
    }
}

fn query(
    graph: &FactorGraph,
    seg: &Segment,
    params: &InterpretationParams,
    limit: &ExtentLimit,
) -> Vec<Candidate> {
    candidate_points(graph, seg, params.neighborhood)
        .into_iter()
        .filter(|c| limit.admits(&c.point))
        .collect()
}

/// Runs EM for a single stroke and returns the hard selection (before the
/// per-pose support filter).
pub fn interpret_side(
    graph: &FactorGraph,
    raw: &Segment,
    params: &InterpretationParams,
) -> Result<SideInterpretation, InterpretError> {
    let model = MixtureModel::new(params);
    let limit = ExtentLimit::new(raw, params.neighborhood);
    let mut theta = *raw;
    let mut trace = EmTrace::default();
    for _ in 0..params.max_iters {
        let cands = query(graph, &theta, params, &limit);
        let points: Vec<Point> = cands.iter().map(|c| c.point).collect();
        let membership = e_step(&points, &theta, params);
        let next = match m_step(&points, &membership) {
            Ok(seg) => seg,
            Err(_) if !trace.iterations.is_empty() => break,
            Err(e) => return Err(e.into()),
        };
        let before = model.expected_log_likelihood(&points, &membership.weights, &theta);
        let after = model.expected_log_likelihood(&points, &membership.weights, &next);
        if after < before {
            // The extent rule can undercut the least-squares step; keep the
            // better estimate and stop.
            break;
        }
        let shift = endpoint_shift(&theta, &next);
        trace.iterations.push(EmIteration {
            candidates: points.len(),
            before,
            after,
            shift,
        });
        theta = next;
        if shift < params.tol {
            trace.converged = true;
            break;
        }
    }

    let cands = query(graph, &theta, params, &limit);
    let points: Vec<Point> = cands.iter().map(|c| c.point).collect();
    let membership = e_step(&points, &theta, params);
    let selection = membership.selected().map(|i| cands[i].obs).collect();
    Ok(SideInterpretation {
        segment: theta,
        selection,
        trace,
    })
}

/// Keeps only observations from poses contributing at least `t_p` of them.
pub fn filter_by_support(selection: &[ObservationRef], t_p: usize) -> Vec<ObservationRef> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for o in selection {
        *counts.entry(o.pose).or_default() += 1;
    }
    selection
        .iter()
        .filter(|o| counts[&o.pose] >= t_p.max(1))
        .copied()
        .collect()
}

/// Interpretation plus the EM traces of both strokes.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpretation {
    pub factor: HumanCorrectionFactor,
    pub trace_a: EmTrace,
    pub trace_b: EmTrace,
}

pub fn interpret_with_trace(
    graph: &FactorGraph,
    raw: &RawCorrection,
    params: &InterpretationParams,
) -> Result<Interpretation, InterpretError> {
    raw.check()?;
    // A stroke with too few nearby points cannot be fitted at all.
    let side = |seg: &Segment, side: Side| {
        interpret_side(graph, seg, params).map_err(|e| match e {
            InterpretError::Geometry(_) => InterpretError::InsufficientSelection(side),
            other => other,
        })
    };
    let a = side(&raw.pa0, Side::A)?;
    let b = side(&raw.pb0, Side::B)?;

    // An observation claimed by both strokes belongs to neither.
    let in_b: std::collections::BTreeSet<_> = b.selection.iter().copied().collect();
    let shared: std::collections::BTreeSet<_> = a
        .selection
        .iter()
        .filter(|o| in_b.contains(o))
        .copied()
        .collect();
    let sa: Vec<_> = a
        .selection
        .iter()
        .filter(|o| !shared.contains(o))
        .copied()
        .collect();
    let sb: Vec<_> = b
        .selection
        .iter()
        .filter(|o| !shared.contains(o))
        .copied()
        .collect();

    let sa = filter_by_support(&sa, params.t_p);
    let sb = filter_by_support(&sb, params.t_p);
    if sa.is_empty() {
        return Err(InterpretError::InsufficientSelection(Side::A));
    }
    if sb.is_empty() {
        return Err(InterpretError::InsufficientSelection(Side::B));
    }
    let factor = HumanCorrectionFactor::ordered(a.segment, b.segment, sa, sb, raw.mode, params.t_p)
        .map_err(|e| match e {
            FactorError::EmptySelection(side) => InterpretError::InsufficientSelection(side),
            FactorError::Interleaved => InterpretError::InterleavedSelection,
        })?;
    let (trace_a, trace_b) = if factor.pa == a.segment {
        (a.trace, b.trace)
    } else {
        (b.trace, a.trace)
    };
    Ok(Interpretation {
        factor,
        trace_a,
        trace_b,
    })
}

/// Turns a raw stroke pair into a fully populated human correction factor.
pub fn interpret(
    graph: &FactorGraph,
    raw: &RawCorrection,
    params: &InterpretationParams,
) -> Result<HumanCorrectionFactor, InterpretError> {
    interpret_with_trace(graph, raw, params).map(|i| i.factor)
}
