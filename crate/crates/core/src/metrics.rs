//! Map quality: pairwise free/occupied inconsistency and ground-truth error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{fit_segment, line_angle_between, Point, Pose2D, Segment};
use crate::model::FactorGraph;

pub const DEFAULT_RESOLUTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("raster resolutions differ: {0} vs {1}")]
    ResolutionMismatch(f64, f64),
    #[error("feature `{0}` not found or has too few points")]
    FeatureNotFound(String),
}

pub type Cell = (i64, i64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellState {
    Unknown,
    Free,
    Occupied,
}

/// Free and occupied cells of one pose on the global lattice
/// `cell = floor(p / resolution)`. Every other cell is unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyRaster {
    pub resolution: f64,
    /// Sorted, disjoint from `occupied`.
    free: Vec<Cell>,
    /// Sorted.
    occupied: Vec<Cell>,
    bbox: Option<(Cell, Cell)>,
}

pub fn cell_of(p: &Point, resolution: f64) -> Cell {
    (
        (p.x / resolution).floor() as i64,
        (p.y / resolution).floor() as i64,
    )
}

/// Cells crossed by the segment `a → b`, in order, including both end cells.
fn traverse(a: &Point, b: &Point, resolution: f64, out: &mut Vec<Cell>) {
    let (mut cx, mut cy) = cell_of(a, resolution);
    let end = cell_of(b, resolution);
    out.push((cx, cy));
    let d = b - a;
    let step = |v: f64| {
        if v > 0.0 {
            1
        } else if v < 0.0 {
            -1
        } else {
            0
        }
    };
    let (sx, sy) = (step(d.x), step(d.y));
    let boundary = |c: i64, s: i64| (c + if s > 0 { 1 } else { 0 }) as f64 * resolution;
    let mut t_max_x = if sx != 0 {
        (boundary(cx, sx) - a.x) / d.x
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if sy != 0 {
        (boundary(cy, sy) - a.y) / d.y
    } else {
        f64::INFINITY
    };
    let t_dx = if sx != 0 {
        resolution / d.x.abs()
    } else {
        f64::INFINITY
    };
    let t_dy = if sy != 0 {
        resolution / d.y.abs()
    } else {
        f64::INFINITY
    };
    let limit = (end.0 - cx).abs() + (end.1 - cy).abs();
    for _ in 0..limit {
        if (cx, cy) == end {
            break;
        }
        if t_max_x < t_max_y {
            cx += sx;
            t_max_x += t_dx;
        } else {
            cy += sy;
            t_max_y += t_dy;
        }
        out.push((cx, cy));
    }
}

/// Rays from the pose to each world-frame endpoint. Traversed cells are free,
/// the cell just past the endpoint along the ray is occupied, and endpoints
/// beyond `max_range` only clear space up to the range limit.
pub fn rasterize_pose(
    points: &[Point],
    pose: &Pose2D,
    resolution: f64,
    max_range: f64,
) -> OccupancyRaster {
    assert!(resolution > 0.0, "resolution must be positive");
    let origin = pose.position();
    let mut free = Vec::new();
    let mut occupied = Vec::new();
    let mut ray = Vec::new();
    for p in points {
        let d = p - origin;
        let range = d.norm();
        if range == 0.0 || !range.is_finite() {
            continue;
        }
        let dir = d / range;
        ray.clear();
        if range > max_range {
            traverse(&origin, &(origin + dir * max_range), resolution, &mut ray);
            free.extend_from_slice(&ray);
            continue;
        }
        let hit = cell_of(&(p + dir * (1e-9 * resolution)), resolution);
        traverse(&origin, p, resolution, &mut ray);
        free.extend(ray.iter().copied().filter(|c| *c != hit));
        occupied.push(hit);
    }
    occupied.sort_unstable();
    occupied.dedup();
    free.sort_unstable();
    free.dedup();
    free.retain(|c| occupied.binary_search(c).is_err());
    let bbox = free
        .iter()
        .chain(&occupied)
        .fold(None, |acc: Option<(Cell, Cell)>, c| {
            Some(match acc {
                None => (*c, *c),
                Some((lo, hi)) => (
                    (lo.0.min(c.0), lo.1.min(c.1)),
                    (hi.0.max(c.0), hi.1.max(c.1)),
                ),
            })
        });
    OccupancyRaster {
        resolution,
        free,
        occupied,
        bbox,
    }
}

impl OccupancyRaster {
    pub fn state(&self, cell: Cell) -> CellState {
        if self.occupied.binary_search(&cell).is_ok() {
            CellState::Occupied
        } else if self.free.binary_search(&cell).is_ok() {
            CellState::Free
        } else {
            CellState::Unknown
        }
    }

    pub fn free_cells(&self) -> &[Cell] {
        &self.free
    }

    pub fn occupied_cells(&self) -> &[Cell] {
        &self.occupied
    }

    /// Inclusive cell bounds of all known cells.
    pub fn bounding_box(&self) -> Option<(Cell, Cell)> {
        self.bbox
    }

    fn overlaps(&self, other: &OccupancyRaster) -> bool {
        match (self.bbox, other.bbox) {
            (Some((alo, ahi)), Some((blo, bhi))) => {
                alo.0 <= bhi.0 && blo.0 <= ahi.0 && alo.1 <= bhi.1 && blo.1 <= ahi.1
            }
            _ => false,
        }
    }
}

fn count_common(a: &[Cell], b: &[Cell]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Area seen free from `r_i` and occupied from `r_j`, in m².
pub fn pairwise_inconsistency(
    ri: &OccupancyRaster,
    rj: &OccupancyRaster,
) -> Result<f64, MetricsError> {
    if ri.resolution != rj.resolution {
        return Err(MetricsError::ResolutionMismatch(
            ri.resolution,
            rj.resolution,
        ));
    }
    if !ri.overlaps(rj) {
        return Ok(0.0);
    }
    Ok(count_common(&ri.free, &rj.occupied) as f64 * ri.resolution * ri.resolution)
}

/// Raster of every pose at its current estimate.
pub fn rasterize_graph(graph: &FactorGraph, resolution: f64) -> Vec<OccupancyRaster> {
    (0..graph.num_poses())
        .into_par_iter()
        .map(|k| {
            let pose = &graph.poses[k];
            let pts: Vec<Point> = graph.scans[k]
                .points
                .iter()
                .map(|p| pose.transform_point(p))
                .collect();
            rasterize_pose(&pts, pose, resolution, graph.metadata.max_range)
        })
        .collect()
}

/// `Σ_{i<j} I_ij` in m²: area an earlier pose sees free and a later pose
/// sees occupied.
pub fn total_inconsistency(graph: &FactorGraph, resolution: f64) -> f64 {
    let rasters = rasterize_graph(graph, resolution);
    let per_row: Vec<f64> = (0..rasters.len())
        .into_par_iter()
        .map(|i| {
            rasters[i + 1..]
                .iter()
                .map(|rj| pairwise_inconsistency(&rasters[i], rj).expect("uniform resolution"))
                .sum()
        })
        .collect();
    per_row.iter().sum()
}

/// Contiguous scan points `start..end` of one pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointRange {
    pub pose: usize,
    pub start: usize,
    pub end: usize,
}

/// A named map feature fitted from designated scan regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub ranges: Vec<PointRange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureKind {
    /// Degrees between the two lines, in [0, 90].
    Angle,
    /// Meters between two (near-)parallel lines.
    Distance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMeasurement {
    pub kind: MeasureKind,
    pub a: String,
    pub b: String,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub kind: MeasureKind,
    pub a: String,
    pub b: String,
    pub measured: f64,
    pub truth: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthReport {
    pub rows: Vec<MeasurementRow>,
    /// Mean angular error in degrees, if any angle was measured.
    pub mean_angular: Option<f64>,
    /// Mean translational error in meters, if any distance was measured.
    pub mean_translational: Option<f64>,
}

impl GroundTruthReport {
    /// One line: `A <mean deg> T <mean m>`.
    pub fn summary_line(&self) -> String {
        let f = |v: Option<f64>, d: usize| v.map_or("-".to_string(), |v| format!("{v:.d$}"));
        format!(
            "A {} T {}",
            f(self.mean_angular, 2),
            f(self.mean_translational, 3)
        )
    }
}

pub fn fit_feature(graph: &FactorGraph, feature: &Feature) -> Result<Segment, MetricsError> {
    let not_found = || MetricsError::FeatureNotFound(feature.name.clone());
    let mut pts = Vec::new();
    for r in &feature.ranges {
        let pose = graph.poses.get(r.pose).ok_or_else(not_found)?;
        let scan = &graph.scans[r.pose].points;
        if r.start > r.end || r.end > scan.len() {
            return Err(not_found());
        }
        pts.extend(scan[r.start..r.end].iter().map(|p| pose.transform_point(p)));
    }
    if pts.len() < 2 {
        return Err(not_found());
    }
    let w = vec![1.0; pts.len()];
    fit_segment(&pts, &w).map_err(|_| not_found())
}

/// Distance between two lines: mean of each midpoint's offset from the other line.
pub fn line_distance(a: &Segment, b: &Segment) -> f64 {
    let da = (b.cm() - a.cm()).dot(&a.normal()).abs();
    let db = (a.cm() - b.cm()).dot(&b.normal()).abs();
    0.5 * (da + db)
}

pub fn ground_truth_report(
    graph: &FactorGraph,
    features: &[Feature],
    measurements: &[GroundTruthMeasurement],
) -> Result<GroundTruthReport, MetricsError> {
    let lookup = |name: &str| {
        features
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| MetricsError::FeatureNotFound(name.to_string()))
            .and_then(|f| fit_feature(graph, f))
    };
    let mut rows = Vec::new();
    for m in measurements {
        let a = lookup(&m.a)?;
        let b = lookup(&m.b)?;
        let measured = match m.kind {
            MeasureKind::Angle => line_angle_between(&a, &b).to_degrees(),
            MeasureKind::Distance => line_distance(&a, &b),
        };
        rows.push(MeasurementRow {
            kind: m.kind,
            a: m.a.clone(),
            b: m.b.clone(),
            measured,
            truth: m.truth,
            error: (measured - m.truth).abs(),
        });
    }
    let mean = |kind: MeasureKind| {
        let errs: Vec<f64> = rows
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.error)
            .collect();
        (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
    };
    Ok(GroundTruthReport {
        mean_angular: mean(MeasureKind::Angle),
        mean_translational: mean(MeasureKind::Distance),
        rows,
    })
}
