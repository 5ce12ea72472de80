//! Synthetic datasets: a room loop with stretches where the walls are out of
//! laser range, and a straight hallway with a heading error at one step.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::format::GroundTruth;
use crate::geometry::{Point, Pose2D, Transform2D};
use crate::metrics::{Feature, GroundTruthMeasurement, MeasureKind, PointRange};
use crate::model::{FactorGraph, GraphMetadata, RelativePoseFactor, Scan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LostPosesConfig {
    /// Room extent along x, m.
    pub room_width: f64,
    /// Room extent along y, m.
    pub room_length: f64,
    pub laser_range: f64,
    /// Angular spacing of the laser rays, degrees.
    pub angular_step_deg: f64,
    /// Distance of the left, right and top legs from their walls, m.
    pub inset: f64,
    /// Distance of the bottom leg from the bottom wall, m. Beyond the laser
    /// range, so the middle of this leg sees nothing.
    pub lost_inset: f64,
    pub step: f64,
    pub loops: usize,
    /// Odometry noise std-dev per step, m.
    pub trans_noise: f64,
    /// Odometry noise std-dev per step, rad.
    pub rot_noise: f64,
    /// Range noise std-dev per return, m.
    pub range_noise: f64,
    pub seed: u64,
}

impl Default for LostPosesConfig {
    fn default() -> Self {
        Self {
            room_width: 6.33,
            room_length: 8.0,
            laser_range: 1.5,
            angular_step_deg: 1.0,
            inset: 1.0,
            lost_inset: 2.0,
            step: 0.25,
            loops: 3,
            trans_noise: 0.01,
            rot_noise: 0.005,
            range_noise: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BentHallwayConfig {
    pub length: f64,
    pub width: f64,
    pub laser_range: f64,
    pub angular_step_deg: f64,
    pub step: f64,
    /// Heading error added to one odometry step, degrees.
    pub bias_deg: f64,
    /// Where along the run the heading error happens, as a fraction of steps.
    pub bias_at: f64,
    pub trans_noise: f64,
    pub rot_noise: f64,
    pub range_noise: f64,
    pub seed: u64,
}

impl Default for BentHallwayConfig {
    fn default() -> Self {
        Self {
            length: 20.0,
            width: 2.0,
            laser_range: 2.5,
            angular_step_deg: 0.4,
            step: 0.25,
            bias_deg: 30.0,
            bias_at: 0.5,
            trans_noise: 0.01,
            rot_noise: 0.005,
            range_noise: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub graph: FactorGraph,
    pub truth: GroundTruth,
    pub true_poses: Vec<Pose2D>,
}

#[derive(Debug, Clone, Copy)]
struct Wall {
    a: Point,
    b: Point,
    label: usize,
}

/// Nearest wall hit along a ray, as (distance, label).
fn cast(origin: &Point, dir: &Point, walls: &[Wall]) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for w in walls {
        let e = w.b - w.a;
        let denom = dir.x * e.y - dir.y * e.x;
        if denom.abs() < 1e-12 {
            continue;
        }
        let d = w.a - origin;
        let t = (d.x * e.y - d.y * e.x) / denom;
        let u = (d.x * dir.y - d.y * dir.x) / denom;
        if t > 1e-9 && (0.0..=1.0).contains(&u) && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, w.label));
        }
    }
    best
}

struct Simulator {
    rng: ChaCha8Rng,
    trans: Normal<f64>,
    rot: Normal<f64>,
    range: Normal<f64>,
    information: Matrix3<f64>,
}

impl Simulator {
    fn new(seed: u64, trans: f64, rot: f64, range: f64) -> Self {
        // Information of noise-free generators is capped at a 1e-4 std-dev.
        let (st, sr) = (trans.max(1e-4), rot.max(1e-4));
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            trans: Normal::new(0.0, trans).expect("finite noise"),
            rot: Normal::new(0.0, rot).expect("finite noise"),
            range: Normal::new(0.0, range).expect("finite noise"),
            information: Matrix3::from_diagonal(&nalgebra::Vector3::new(
                1.0 / (st * st),
                1.0 / (st * st),
                1.0 / (sr * sr),
            )),
        }
    }

    /// Scan in the robot frame, with the wall label of each return.
    fn scan(
        &mut self,
        pose: &Pose2D,
        walls: &[Wall],
        max_range: f64,
        step_deg: f64,
    ) -> (Vec<Point>, Vec<usize>) {
        let n = (360.0 / step_deg).round() as usize;
        let origin = pose.position();
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for k in 0..n {
            let bearing = -PI + k as f64 * 2.0 * PI / n as f64;
            let a = pose.theta + bearing;
            let dir = Vector2::new(a.cos(), a.sin());
            if let Some((t, label)) = cast(&origin, &dir, walls) {
                if t <= max_range {
                    let r = t + self.range.sample(&mut self.rng);
                    let local = Vector2::new(bearing.cos(), bearing.sin()) * r;
                    points.push(local);
                    labels.push(label);
                }
            }
        }
        (points, labels)
    }

    /// Odometry chain read from the true poses with per-step noise; `bias`
    /// adds a rotation error at one step.
    fn odometry(
        &mut self,
        truth: &[Pose2D],
        bias: Option<(usize, f64)>,
    ) -> Vec<RelativePoseFactor> {
        (0..truth.len().saturating_sub(1))
            .map(|i| {
                let rel = truth[i].between(&truth[i + 1]);
                let mut rot = rel.rotation + self.rot.sample(&mut self.rng);
                if let Some((at, b)) = bias {
                    if at == i {
                        rot += b;
                    }
                }
                let tx = rel.translation.x + self.trans.sample(&mut self.rng);
                let ty = rel.translation.y + self.trans.sample(&mut self.rng);
                RelativePoseFactor::new(i, i + 1, Transform2D::new(rot, tx, ty), self.information)
            })
            .collect()
    }
}

fn dead_reckon(start: Pose2D, odometry: &[RelativePoseFactor]) -> Vec<Pose2D> {
    let mut poses = vec![start];
    for f in odometry {
        let last = *poses.last().unwrap();
        poses.push(last.compose(&f.measurement));
    }
    poses
}

/// Contiguous runs of `label` in one scan.
fn runs(pose: usize, labels: &[usize], label: usize) -> Vec<PointRange> {
    let mut out = Vec::new();
    let mut start = None;
    for (k, l) in labels
        .iter()
        .chain(std::iter::once(&usize::MAX))
        .enumerate()
    {
        match (*l == label, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                out.push(PointRange {
                    pose,
                    start: s,
                    end: k,
                });
                start = None;
            }
            _ => {}
        }
    }
    out
}

fn feature(name: String, poses: &[usize], labels: &[Vec<usize>], label: usize) -> Feature {
    let ranges = poses
        .iter()
        .flat_map(|&k| runs(k, &labels[k], label))
        .collect();
    Feature { name, ranges }
}

fn assemble(
    truth: Vec<Pose2D>,
    walls: &[Wall],
    sim: &mut Simulator,
    max_range: f64,
    step_deg: f64,
    bias: Option<(usize, f64)>,
    seed: u64,
) -> (FactorGraph, Vec<Vec<usize>>) {
    let mut scans = Vec::with_capacity(truth.len());
    let mut labels = Vec::with_capacity(truth.len());
    for (k, p) in truth.iter().enumerate() {
        let (points, l) = sim.scan(p, walls, max_range, step_deg);
        scans.push(Scan { pose_id: k, points });
        labels.push(l);
    }
    let odometry = sim.odometry(&truth, bias);
    let poses = dead_reckon(truth[0], &odometry);
    let graph = FactorGraph {
        poses,
        scans,
        odometry,
        human_factors: Vec::new(),
        metadata: GraphMetadata {
            max_range,
            seed: Some(seed),
        },
    };
    (graph, labels)
}

/// Straight leg from `from` to `to`, excluding the start point.
fn leg(out: &mut Vec<Pose2D>, legs: &mut Vec<usize>, id: usize, to: Point, step: f64) {
    let from = *out.last().unwrap();
    let d = to - from.position();
    let n = (d.norm() / step).round().max(1.0) as usize;
    for k in 1..=n {
        let p = from.position() + d * (k as f64 / n as f64);
        out.push(Pose2D::new(p.x, p.y, from.theta));
        legs.push(id);
    }
}

fn turn(out: &mut Vec<Pose2D>, legs: &mut Vec<usize>, id: usize, angle: f64) {
    let last = *out.last().unwrap();
    out.push(Pose2D::new(
        last.x,
        last.y,
        crate::geometry::normalize_angle(last.theta + angle),
    ));
    legs.push(id);
}

const LEFT: usize = 0;
const TOP: usize = 1;
const RIGHT: usize = 2;
const BOTTOM: usize = 3;
const WALL_NAMES: [&str; 4] = ["left", "top", "right", "bottom"];

/// Clockwise loops around a rectangular room. The legs along the left, top and
/// right walls keep those walls in view; the middle of the bottom leg is out
/// of range of every wall, so those poses rely on odometry alone.
///
/// Features are named `<wall>.<loop>` (1-based) for the wall seen from the leg
/// that follows it, plus `<wall>` pooled over all loops.
pub fn generate_lost_poses(config: &LostPosesConfig) -> Generated {
    assert!(
        config.laser_range < config.room_width,
        "laser range must be shorter than the room width"
    );
    let (w, l) = (config.room_width, config.room_length);
    let walls = [
        Wall {
            a: Vector2::new(0.0, 0.0),
            b: Vector2::new(0.0, l),
            label: LEFT,
        },
        Wall {
            a: Vector2::new(0.0, l),
            b: Vector2::new(w, l),
            label: TOP,
        },
        Wall {
            a: Vector2::new(w, l),
            b: Vector2::new(w, 0.0),
            label: RIGHT,
        },
        Wall {
            a: Vector2::new(w, 0.0),
            b: Vector2::new(0.0, 0.0),
            label: BOTTOM,
        },
    ];
    let (i, lo) = (config.inset, config.lost_inset);
    let corners = [
        Vector2::new(i, l - i),
        Vector2::new(w - i, l - i),
        Vector2::new(w - i, lo),
        Vector2::new(i, lo),
    ];
    let mut truth = vec![Pose2D::new(i, lo, FRAC_PI_2)];
    // Leg id = 4 * loop + wall.
    let mut legs = vec![LEFT];
    for lp in 0..config.loops {
        for (k, c) in corners.iter().enumerate() {
            let id = 4 * lp + k;
            leg(&mut truth, &mut legs, id, *c, config.step);
            if lp + 1 < config.loops || k < 3 {
                turn(&mut truth, &mut legs, id + 1, -FRAC_PI_2);
            }
        }
    }
    let mut sim = Simulator::new(
        config.seed,
        config.trans_noise,
        config.rot_noise,
        config.range_noise,
    );
    let (graph, labels) = assemble(
        truth.clone(),
        &walls,
        &mut sim,
        config.laser_range,
        config.angular_step_deg,
        None,
        config.seed,
    );

    let mut features = Vec::new();
    for wall in [LEFT, TOP, RIGHT] {
        let mut pooled = Vec::new();
        for lp in 0..config.loops {
            let poses: Vec<usize> = (0..truth.len())
                .filter(|&k| legs[k] == 4 * lp + wall)
                .collect();
            let f = feature(
                format!("{}.{}", WALL_NAMES[wall], lp + 1),
                &poses,
                &labels,
                wall,
            );
            pooled.extend(f.ranges.iter().copied());
            features.push(f);
        }
        features.push(Feature {
            name: WALL_NAMES[wall].to_string(),
            ranges: pooled,
        });
    }
    let m = |kind, a: &str, b: &str, truth| GroundTruthMeasurement {
        kind,
        a: a.into(),
        b: b.into(),
        truth,
    };
    // First-loop walls against last-loop walls, so drift over the run shows.
    let last = config.loops;
    let measurements = vec![
        m(MeasureKind::Distance, "left.1", &format!("right.{last}"), w),
        m(MeasureKind::Angle, "left.1", &format!("right.{last}"), 0.0),
        m(MeasureKind::Angle, "left.1", "top.1", 90.0),
        m(
            MeasureKind::Angle,
            &format!("top.{last}"),
            &format!("right.{last}"),
            90.0,
        ),
    ];
    Generated {
        graph,
        truth: GroundTruth {
            features,
            measurements,
        },
        true_poses: truth,
    }
}

/// A straight run down the middle of a hallway along +x, with `bias_deg`
/// added to the measured rotation of one step. Downstream poses come out
/// rotated about the kink.
///
/// Features: `left.a`, `right.a` before the kink, `left.b`, `right.b` after.
pub fn generate_bent_hallway(config: &BentHallwayConfig) -> Generated {
    let h = config.width / 2.0;
    let margin = config.laser_range + 1.0;
    let walls = [
        Wall {
            a: Vector2::new(-margin, h),
            b: Vector2::new(config.length + margin, h),
            label: 0,
        },
        Wall {
            a: Vector2::new(-margin, -h),
            b: Vector2::new(config.length + margin, -h),
            label: 1,
        },
    ];
    let n = (config.length / config.step).round().max(1.0) as usize;
    let truth: Vec<Pose2D> = (0..=n)
        .map(|k| Pose2D::new(config.length * k as f64 / n as f64, 0.0, 0.0))
        .collect();
    let kink = ((config.bias_at * n as f64).round() as usize).min(n - 1);
    let mut sim = Simulator::new(
        config.seed,
        config.trans_noise,
        config.rot_noise,
        config.range_noise,
    );
    let (graph, labels) = assemble(
        truth.clone(),
        &walls,
        &mut sim,
        config.laser_range,
        config.angular_step_deg,
        Some((kink, config.bias_deg.to_radians())),
        config.seed,
    );
    let before: Vec<usize> = (0..=kink).collect();
    let after: Vec<usize> = (kink + 1..=n).collect();
    let features = vec![
        feature("left.a".into(), &before, &labels, 0),
        feature("right.a".into(), &before, &labels, 1),
        feature("left.b".into(), &after, &labels, 0),
        feature("right.b".into(), &after, &labels, 1),
    ];
    let m = |kind, a: &str, b: &str, truth| GroundTruthMeasurement {
        kind,
        a: a.into(),
        b: b.into(),
        truth,
    };
    let measurements = vec![
        m(MeasureKind::Angle, "left.a", "left.b", 0.0),
        m(MeasureKind::Angle, "right.a", "right.b", 0.0),
        m(MeasureKind::Distance, "left.a", "right.b", config.width),
        m(MeasureKind::Distance, "right.a", "left.b", config.width),
    ];
    Generated {
        graph,
        truth: GroundTruth {
            features,
            measurements,
        },
        true_poses: truth,
    }
}
