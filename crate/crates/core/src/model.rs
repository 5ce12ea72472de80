//! The factor graph: poses, scans, odometry links and human correction factors.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point, Pose2D, Segment, Transform2D};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown pose {0}")]
    UnknownPose(usize),
    #[error("unknown observation {index} of pose {pose}")]
    UnknownObservation { pose: usize, index: usize },
}

/// Information used for odometry links whose file record omits it:
/// 0.1 m and 0.05 rad nominal standard deviations.
pub fn default_information() -> Matrix3<f64> {
    Matrix3::from_diagonal(&nalgebra::Vector3::new(100.0, 100.0, 400.0))
}

/// A 2D point cloud in the sensor frame of one pose.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scan {
    pub pose_id: usize,
    pub points: Vec<Point>,
}

/// Measured relative motion between consecutive poses `i` and `j = i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativePoseFactor {
    pub i: usize,
    pub j: usize,
    pub measurement: Transform2D,
    /// 3×3 information over `(dx, dy, dθ)`.
    pub information: Matrix3<f64>,
}

impl RelativePoseFactor {
    pub fn new(i: usize, j: usize, measurement: Transform2D, information: Matrix3<f64>) -> Self {
        Self {
            i,
            j,
            measurement,
            information,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    Colocation,
    Collinearity,
    Perpendicularity,
    Parallelism,
}

impl CorrectionMode {
    pub const ALL: [CorrectionMode; 4] = [
        CorrectionMode::Colocation,
        CorrectionMode::Collinearity,
        CorrectionMode::Perpendicularity,
        CorrectionMode::Parallelism,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CorrectionMode::Colocation => "colocation",
            CorrectionMode::Collinearity => "collinearity",
            CorrectionMode::Perpendicularity => "perpendicularity",
            CorrectionMode::Parallelism => "parallelism",
        }
    }
}

impl fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown correction mode `{0}`")]
pub struct UnknownMode(pub String);

impl FromStr for CorrectionMode {
    type Err = UnknownMode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| UnknownMode(s.to_string()))
    }
}

/// A single scan point, addressed by the pose that observed it.
///
/// Storing membership this way makes selected observations follow their pose
/// whenever the pose estimate changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObservationRef {
    pub pose: usize,
    pub index: usize,
}

impl ObservationRef {
    pub fn new(pose: usize, index: usize) -> Self {
        Self { pose, index }
    }
}

/// Which side of a human correction factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    A,
    B,
}

/// A human-asserted geometric relation between two observation sets.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanCorrectionFactor {
    pub pa: Segment,
    pub pb: Segment,
    pub sa: Vec<ObservationRef>,
    pub sb: Vec<ObservationRef>,
    /// Sorted pose indices contributing to `sa`.
    pub xa: Vec<usize>,
    /// Sorted pose indices contributing to `sb`; every entry exceeds `max(xa)`.
    pub xb: Vec<usize>,
    pub mode: CorrectionMode,
    /// The per-pose support threshold the selections were built with.
    pub min_points: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FactorError {
    #[error("side {0:?} selects no observations")]
    EmptySelection(Side),
    #[error("pose ranges of the two selections interleave")]
    Interleaved,
}

fn poses_of(sel: &[ObservationRef]) -> Vec<usize> {
    sel.iter()
        .map(|o| o.pose)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

impl HumanCorrectionFactor {
    /// Builds a factor, deriving `X_a`/`X_b` from the selections and swapping
    /// the sides when the user selected them in reverse temporal order.
    pub fn ordered(
        pa: Segment,
        pb: Segment,
        mut sa: Vec<ObservationRef>,
        mut sb: Vec<ObservationRef>,
        mode: CorrectionMode,
        min_points: usize,
    ) -> Result<Self, FactorError> {
        sa.sort();
        sa.dedup();
        sb.sort();
        sb.dedup();
        let xa = poses_of(&sa);
        let xb = poses_of(&sb);
        let (Some(&a_first), Some(&a_last)) = (xa.first(), xa.last()) else {
            return Err(FactorError::EmptySelection(Side::A));
        };
        let (Some(&b_first), Some(&b_last)) = (xb.first(), xb.last()) else {
            return Err(FactorError::EmptySelection(Side::B));
        };
        let factor = if a_last < b_first {
            Self {
                pa,
                pb,
                sa,
                sb,
                xa,
                xb,
                mode,
                min_points,
            }
        } else if b_last < a_first {
            Self {
                pa: pb,
                pb: pa,
                sa: sb,
                sb: sa,
                xa: xb,
                xb: xa,
                mode,
                min_points,
            }
        } else {
            return Err(FactorError::Interleaved);
        };
        Ok(factor)
    }

    pub fn segment(&self, side: Side) -> &Segment {
        match side {
            Side::A => &self.pa,
            Side::B => &self.pb,
        }
    }

    pub fn segment_mut(&mut self, side: Side) -> &mut Segment {
        match side {
            Side::A => &mut self.pa,
            Side::B => &mut self.pb,
        }
    }

    pub fn selection(&self, side: Side) -> &[ObservationRef] {
        match side {
            Side::A => &self.sa,
            Side::B => &self.sb,
        }
    }

    pub fn poses(&self, side: Side) -> &[usize] {
        match side {
            Side::A => &self.xa,
            Side::B => &self.xb,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphMetadata {
    /// Sensor maximum range in meters.
    pub max_range: f64,
    pub seed: Option<u64>,
}

impl Default for GraphMetadata {
    fn default() -> Self {
        Self {
            max_range: 30.0,
            seed: None,
        }
    }
}

/// `G = {X, F}` with `F = R ∪ H`.
///
/// `scans[k]` always belongs to pose `k` (possibly empty).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    pub poses: Vec<Pose2D>,
    pub scans: Vec<Scan>,
    pub odometry: Vec<RelativePoseFactor>,
    pub human_factors: Vec<HumanCorrectionFactor>,
    pub metadata: GraphMetadata,
}

impl FactorGraph {
    /// A chain whose odometry is read off consecutive poses, with empty scans.
    pub fn from_poses(poses: Vec<Pose2D>, information: Matrix3<f64>) -> Self {
        let odometry = poses
            .windows(2)
            .enumerate()
            .map(|(i, w)| RelativePoseFactor::new(i, i + 1, w[0].between(&w[1]), information))
            .collect();
        let scans = (0..poses.len())
            .map(|k| Scan {
                pose_id: k,
                points: Vec::new(),
            })
            .collect();
        Self {
            poses,
            scans,
            odometry,
            human_factors: Vec::new(),
            metadata: GraphMetadata::default(),
        }
    }

    pub fn num_poses(&self) -> usize {
        self.poses.len()
    }

    pub fn observation(&self, obs: ObservationRef) -> Result<Point, ModelError> {
        let pose = self
            .poses
            .get(obs.pose)
            .ok_or(ModelError::UnknownPose(obs.pose))?;
        let p = self
            .scans
            .get(obs.pose)
            .and_then(|s| s.points.get(obs.index))
            .ok_or(ModelError::UnknownObservation {
                pose: obs.pose,
                index: obs.index,
            })?;
        Ok(pose.transform_point(p))
    }

    /// World-frame positions of a selection. Panics on dangling references,
    /// which `validate` reports.
    pub fn selection_points(&self, sel: &[ObservationRef]) -> Vec<Point> {
        sel.iter()
            .map(|o| {
                self.observation(*o)
                    .expect("selection refers to a valid observation")
            })
            .collect()
    }

    pub fn total_points(&self) -> usize {
        self.scans.iter().map(|s| s.points.len()).sum()
    }
}

/// Scan points of `pose_id` expressed in the world frame.
pub fn world_points(graph: &FactorGraph, pose_id: usize) -> Result<Vec<Point>, ModelError> {
    let pose = graph
        .poses
        .get(pose_id)
        .ok_or(ModelError::UnknownPose(pose_id))?;
    Ok(graph
        .scans
        .get(pose_id)
        .map(|s| s.points.iter().map(|p| pose.transform_point(p)).collect())
        .unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    TooFewPoses(usize),
    NonFinitePose(usize),
    NonFinitePoint {
        pose: usize,
        index: usize,
    },
    ScanMisplaced {
        slot: usize,
        pose_id: usize,
    },
    ScanCount {
        scans: usize,
        poses: usize,
    },
    ChainBreak(usize, usize),
    UnknownPose {
        factor: usize,
        pose: usize,
    },
    MissingLink(usize),
    DuplicateLink(usize),
    BadInformation {
        i: usize,
        j: usize,
    },
    NonFiniteMeasurement {
        i: usize,
        j: usize,
    },
    EmptySelection {
        factor: usize,
    },
    DanglingObservation {
        factor: usize,
        pose: usize,
        index: usize,
    },
    OrderingViolation {
        factor: usize,
    },
    PoseSetMismatch {
        factor: usize,
    },
    InsufficientSupport {
        factor: usize,
        pose: usize,
        points: usize,
    },
    SharedObservation {
        factor: usize,
    },
    DegenerateFeature {
        factor: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewPoses(n) => write!(f, "graph has {n} poses, need at least 2"),
            Violation::NonFinitePose(k) => write!(f, "pose {k}: non-finite value"),
            Violation::NonFinitePoint { pose, index } => {
                write!(f, "scan of pose {pose}: point {index} is not finite")
            }
            Violation::ScanMisplaced { slot, pose_id } => {
                write!(f, "scan slot {slot} holds scan of pose {pose_id}")
            }
            Violation::ScanCount { scans, poses } => {
                write!(f, "{scans} scans for {poses} poses")
            }
            Violation::ChainBreak(i, j) => write!(f, "odometry {i}->{j}: j must equal i+1"),
            Violation::UnknownPose { factor, pose } => {
                write!(f, "odometry factor {factor}: unknown pose {pose}")
            }
            Violation::MissingLink(i) => write!(f, "no odometry link {i}->{}", i + 1),
            Violation::DuplicateLink(i) => write!(f, "odometry link {i}->{} repeated", i + 1),
            Violation::BadInformation { i, j } => {
                write!(
                    f,
                    "odometry {i}->{j}: information not symmetric positive definite"
                )
            }
            Violation::NonFiniteMeasurement { i, j } => {
                write!(f, "odometry {i}->{j}: non-finite measurement")
            }
            Violation::EmptySelection { factor } => {
                write!(f, "human factor {factor}: empty observation selection")
            }
            Violation::DanglingObservation {
                factor,
                pose,
                index,
            } => {
                write!(
                    f,
                    "human factor {factor}: observation {pose}:{index} does not exist"
                )
            }
            Violation::OrderingViolation { factor } => {
                write!(f, "human factor {factor}: max(X_a) must precede min(X_b)")
            }
            Violation::PoseSetMismatch { factor } => {
                write!(
                    f,
                    "human factor {factor}: pose sets disagree with selections"
                )
            }
            Violation::InsufficientSupport {
                factor,
                pose,
                points,
            } => write!(
                f,
                "human factor {factor}: pose {pose} supports only {points} selected points"
            ),
            Violation::SharedObservation { factor } => {
                write!(f, "human factor {factor}: S_a and S_b overlap")
            }
            Violation::DegenerateFeature { factor } => {
                write!(f, "human factor {factor}: degenerate segment")
            }
        }
    }
}

fn information_ok(info: &Matrix3<f64>) -> bool {
    if info.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let asym = (info - info.transpose()).abs().max();
    if asym > 1e-9 * info.abs().max().max(1.0) {
        return false;
    }
    info.cholesky().is_some()
}

/// Checks every structural invariant of the graph; an empty list means valid.
pub fn validate(graph: &FactorGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = graph.poses.len();
    if n < 2 {
        out.push(Violation::TooFewPoses(n));
    }
    for (k, p) in graph.poses.iter().enumerate() {
        if !p.is_finite() {
            out.push(Violation::NonFinitePose(k));
        }
    }
    if graph.scans.len() != n {
        out.push(Violation::ScanCount {
            scans: graph.scans.len(),
            poses: n,
        });
    }
    for (slot, scan) in graph.scans.iter().enumerate() {
        if scan.pose_id != slot {
            out.push(Violation::ScanMisplaced {
                slot,
                pose_id: scan.pose_id,
            });
        }
        for (index, p) in scan.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite()) {
                out.push(Violation::NonFinitePoint { pose: slot, index });
            }
        }
    }

    let mut covered = vec![0usize; n.saturating_sub(1)];
    for (f, odo) in graph.odometry.iter().enumerate() {
        if odo.i >= n || odo.j >= n {
            out.push(Violation::UnknownPose {
                factor: f,
                pose: odo.i.max(odo.j),
            });
            continue;
        }
        if odo.j != odo.i + 1 {
            out.push(Violation::ChainBreak(odo.i, odo.j));
            continue;
        }
        covered[odo.i] += 1;
        if !odo.measurement.is_finite() {
            out.push(Violation::NonFiniteMeasurement { i: odo.i, j: odo.j });
        }
        if !information_ok(&odo.information) {
            out.push(Violation::BadInformation { i: odo.i, j: odo.j });
        }
    }
    for (i, c) in covered.iter().enumerate() {
        match c {
            0 => out.push(Violation::MissingLink(i)),
            1 => {}
            _ => out.push(Violation::DuplicateLink(i)),
        }
    }

    for (fi, h) in graph.human_factors.iter().enumerate() {
        validate_human(graph, fi, h, &mut out);
    }
    out
}

fn validate_human(
    graph: &FactorGraph,
    factor: usize,
    h: &HumanCorrectionFactor,
    out: &mut Vec<Violation>,
) {
    if h.sa.is_empty() || h.sb.is_empty() {
        out.push(Violation::EmptySelection { factor });
        return;
    }
    for o in h.sa.iter().chain(&h.sb) {
        if graph.observation(*o).is_err() {
            out.push(Violation::DanglingObservation {
                factor,
                pose: o.pose,
                index: o.index,
            });
        }
    }
    if h.pa.length() <= 0.0 || h.pb.length() <= 0.0 {
        out.push(Violation::DegenerateFeature { factor });
    }
    if poses_of(&h.sa) != h.xa || poses_of(&h.sb) != h.xb {
        out.push(Violation::PoseSetMismatch { factor });
    }
    if let (Some(a_last), Some(b_first)) = (h.xa.iter().max(), h.xb.iter().min()) {
        if a_last >= b_first {
            out.push(Violation::OrderingViolation { factor });
        }
    }
    let a: BTreeSet<_> = h.sa.iter().collect();
    if h.sb.iter().any(|o| a.contains(o)) {
        out.push(Violation::SharedObservation { factor });
    }
    for (sel, poses) in [(&h.sa, &h.xa), (&h.sb, &h.xb)] {
        for &pose in poses {
            let points = sel.iter().filter(|o| o.pose == pose).count();
            if points < h.min_points.max(1) {
                out.push(Violation::InsufficientSupport {
                    factor,
                    pose,
                    points,
                });
            }
        }
    }
}
