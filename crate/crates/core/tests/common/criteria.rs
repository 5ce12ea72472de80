//! Checks shared by the focused test targets and the acceptance report. Each
//! returns its worst observed figure and a one-line description.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use hitl_slam::correction::{backpropagate, gap_correction};
use hitl_slam::geometry::{line_angle_between, Point, Pose2D, Segment, Transform2D};
use hitl_slam::interpret::{interpret_side, InterpretationParams};
use hitl_slam::model::{
    CorrectionMode, FactorGraph, HumanCorrectionFactor, ObservationRef, RelativePoseFactor, Scan,
    Side,
};
use hitl_slam::optimizer::{information_matrix, FixedSet, Optimizer, SolverParams};
use hitl_slam::residuals::{
    fit_point_rows, fit_row, relation_row, relative_rows, residual_relative, ResidualWeights,
    Variable,
};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{
    fd_error, random_graph, random_information, random_pose, random_transform, rng, segment_var,
};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// Gradients

pub const GRADIENT_CONFIGS: usize = 100;
pub const GRADIENT_STEP: f64 = 1e-6;
pub const GRADIENT_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualKind {
    Relative,
    FitA,
    FitB,
    Relation(CorrectionMode),
    /// The per-point rows the solver uses for `R_a`.
    SolverPoints,
}

pub const ALL_KINDS: [ResidualKind; 8] = [
    ResidualKind::Relative,
    ResidualKind::FitA,
    ResidualKind::FitB,
    ResidualKind::Relation(CorrectionMode::Colocation),
    ResidualKind::Relation(CorrectionMode::Collinearity),
    ResidualKind::Relation(CorrectionMode::Parallelism),
    ResidualKind::Relation(CorrectionMode::Perpendicularity),
    ResidualKind::SolverPoints,
];

/// Away from the kinks of `|·|` and the normal-sign flip.
fn smooth_relation(g: &FactorGraph) -> bool {
    let h = &g.human_factors[0];
    let (na, nb) = (h.pa.normal(), h.pb.normal());
    let delta = h.pb.cm() - h.pa.cm();
    na.dot(&nb).abs() > 0.05 && delta.norm() > 0.05 && delta.dot(&na).abs() > 0.05
}

/// Every projection clear of the switch between line and endpoint distance.
fn clear_of_ends(g: &FactorGraph) -> bool {
    let h = &g.human_factors[0];
    [Side::A, Side::B].iter().all(|&side| {
        let seg = h.segment(side);
        let d = seg.p1 - seg.p0;
        g.selection_points(h.selection(side)).iter().all(|q| {
            let u = (q - seg.p0).dot(&d) / d.norm_squared();
            u.abs() > 1e-3 && (u - 1.0).abs() > 1e-3
        })
    })
}

fn kind_error(kind: ResidualKind, g: &FactorGraph) -> f64 {
    let weights = ResidualWeights::default();
    match kind {
        ResidualKind::Relative => (0..3)
            .map(|k| {
                fd_error(
                    g,
                    &[Variable::Pose(2), Variable::Pose(3)],
                    GRADIENT_STEP,
                    |gg| {
                        let f = &gg.odometry[2];
                        relative_rows(f, &gg.poses[f.i], &gg.poses[f.j])[k].clone()
                    },
                )
            })
            .fold(0.0, f64::max),
        ResidualKind::FitA | ResidualKind::FitB => {
            let side = if kind == ResidualKind::FitA {
                Side::A
            } else {
                Side::B
            };
            fd_error(g, &[], GRADIENT_STEP, |gg| {
                let h = &gg.human_factors[0];
                fit_row(gg, h.selection(side), h.segment(side), segment_var(side))
            })
        }
        ResidualKind::Relation(_) => fd_error(
            g,
            &[segment_var(Side::A), segment_var(Side::B)],
            GRADIENT_STEP,
            |gg| relation_row(&gg.human_factors[0], 0, &weights),
        ),
        ResidualKind::SolverPoints => (0..g.human_factors[0].sa.len())
            .map(|k| {
                fd_error(g, &[], GRADIENT_STEP, |gg| {
                    let h = &gg.human_factors[0];
                    fit_point_rows(gg, &h.sa, &h.pa, segment_var(Side::A))[k].clone()
                })
            })
            .fold(0.0, f64::max),
    }
}

/// Worst relative Jacobian error of `kind` over the random configurations.
pub fn gradient_worst(kind: ResidualKind, seed: u64) -> f64 {
    let mode = match kind {
        ResidualKind::Relation(m) => m,
        _ => CorrectionMode::Colocation,
    };
    let accept = |g: &FactorGraph| match kind {
        ResidualKind::Relation(_) => smooth_relation(g),
        ResidualKind::SolverPoints => clear_of_ends(g),
        _ => true,
    };
    let mut r = rng(seed);
    let mut done = 0;
    let mut worst = 0.0f64;
    while done < GRADIENT_CONFIGS {
        let g = random_graph(&mut r, mode);
        if accept(&g) {
            worst = worst.max(kind_error(kind, &g));
            done += 1;
        }
    }
    worst
}

pub fn gradient_suite() -> Outcome {
    let worst: Vec<(ResidualKind, f64)> = ALL_KINDS
        .iter()
        .enumerate()
        .map(|(i, k)| (*k, gradient_worst(*k, 100 + i as u64)))
        .collect();
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Outcome::new(
        max < GRADIENT_TOL,
        format!(
            "{} residual types x {GRADIENT_CONFIGS} configs, worst relative error {max:.1e} (tol {GRADIENT_TOL:.0e})",
            worst.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Back-propagation

fn random_chain(rng: &mut impl Rng, n: usize) -> FactorGraph {
    let mut poses = vec![random_pose(rng, 5.0)];
    for _ in 1..n {
        let step = random_transform(rng, 1.0, 0.5);
        poses.push(poses.last().unwrap().compose(&step));
    }
    let mut g = FactorGraph::from_poses(poses, Matrix3::identity());
    for f in &mut g.odometry {
        f.information = random_information(rng);
    }
    g
}

/// Worst `‖∏U_i − C‖` and worst break at the healed link over random chains.
pub fn backprop_errors(instances: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (mut product_err, mut link_err) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let n = r.random_range(4..40);
        let g = random_chain(&mut r, n);
        let anchor = r.random_range(0..n - 2);
        let c = r.random_range(anchor + 1..n - 1);
        let b0 = c + 1;
        // Rigidly move the tail, then heal the break at c → b0.
        let t = random_transform(&mut r, 2.0, PI);
        let mut moved = g.clone();
        for p in &mut moved.poses[b0..] {
            *p = t.apply_to_pose(p);
        }
        let a_cb = g.poses[c].between(&g.poses[b0]);
        let gap = gap_correction(&moved.poses[c], &moved.poses[b0], &a_cb);
        let (healed, bp) = backpropagate(&moved, anchor, c, &gap).unwrap();
        let prod = bp.product();
        let m = prod.to_matrix() - gap.to_matrix();
        product_err = product_err.max(m.abs().max());
        let link = healed.poses[c].between(&healed.poses[b0]);
        let d = link.to_matrix() - a_cb.to_matrix();
        link_err = link_err.max(d.abs().max());
        for k in 0..=anchor {
            assert_eq!(
                healed.poses[k], g.poses[k],
                "pose {k} at or before the anchor moved"
            );
        }
    }
    (product_err, link_err)
}

pub fn backprop_exactness() -> Outcome {
    let (p, l) = backprop_errors(1000, 7);
    Outcome::new(
        p <= 1e-9 && l <= 1e-9,
        format!("1000 chains, |prod U - C| {p:.1e}, healed link error {l:.1e} (tol 1e-9)"),
    )
}

// ---------------------------------------------------------------------------
// EM

pub struct WallCase {
    pub graph: FactorGraph,
    pub wall: Segment,
    pub stroke: Segment,
    pub inliers: BTreeSet<ObservationRef>,
}

/// A wall seen by five poses (40 returns each, σ = 1 cm) plus uniform clutter
/// within 0.5 m, and a stroke drawn up to 5 cm off and 2° askew.
pub fn wall_case(rng: &mut impl Rng) -> WallCase {
    let heading = rng.random_range(-PI..PI);
    let len = rng.random_range(2.0..4.0);
    let origin = Point::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
    let dir = Point::new(heading.cos(), heading.sin());
    let normal = Point::new(-dir.y, dir.x);
    let wall = Segment::new(origin, origin + dir * len).unwrap();
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut graph = FactorGraph::from_poses(
        (0..5)
            .map(|k| {
                let at = origin + dir * (len * (k as f64 + 0.5) / 5.0) + normal * 1.0;
                Pose2D::new(at.x, at.y, rng.random_range(-PI..PI))
            })
            .collect(),
        Matrix3::identity(),
    );
    let mut inliers = BTreeSet::new();
    for k in 0..5 {
        let pose = graph.poses[k];
        let mut pts = Vec::new();
        for i in 0..40 {
            let along = rng.random_range(0.0..len);
            let p = origin + dir * along + normal * noise.sample(rng);
            inliers.insert(ObservationRef::new(k, i));
            pts.push(pose.inverse_transform_point(&p));
        }
        for _ in 0..10 {
            let p = origin
                + dir * rng.random_range(-0.5..len + 0.5)
                + normal * rng.random_range(-0.5..0.5);
            pts.push(pose.inverse_transform_point(&p));
        }
        graph.scans[k] = Scan {
            pose_id: k,
            points: pts,
        };
    }
    let off = rng.random_range(-0.05..0.05);
    let tilt = rng.random_range(-2.0f64..2.0).to_radians();
    let rot = Transform2D::rotation_about(&wall.cm(), tilt);
    let shift = |p: Point, t: f64| rot.apply(&(p + normal * off + dir * t));
    let stroke = Segment::new(
        shift(wall.p0, rng.random_range(-0.05..0.05)),
        shift(wall.p1, rng.random_range(-0.05..0.05)),
    )
    .unwrap();
    WallCase {
        graph,
        wall,
        stroke,
        inliers,
    }
}

pub struct EmStats {
    pub worst_angle_deg: f64,
    pub worst_recall: f64,
    pub likelihood_decreases: usize,
}

pub fn em_stats(walls: usize, seed: u64) -> EmStats {
    let mut r = rng(seed);
    let params = InterpretationParams::default();
    let mut stats = EmStats {
        worst_angle_deg: 0.0,
        worst_recall: 1.0,
        likelihood_decreases: 0,
    };
    for _ in 0..walls {
        let case = wall_case(&mut r);
        let side = interpret_side(&case.graph, &case.stroke, &params).unwrap();
        let angle = line_angle_between(&side.segment, &case.wall).to_degrees();
        stats.worst_angle_deg = stats.worst_angle_deg.max(angle);
        let hit = side
            .selection
            .iter()
            .filter(|o| case.inliers.contains(o))
            .count();
        stats.worst_recall = stats
            .worst_recall
            .min(hit as f64 / case.inliers.len() as f64);
        stats.likelihood_decreases += side
            .trace
            .iterations
            .iter()
            .filter(|it| it.after < it.before - 1e-9 * it.before.abs().max(1.0))
            .count();
    }
    stats
}

pub fn em_oracle() -> Outcome {
    let s = em_stats(50, 11);
    Outcome::new(
        s.worst_angle_deg <= 1.0 && s.worst_recall >= 0.98 && s.likelihood_decreases == 0,
        format!(
            "50 walls, worst direction error {:.3} deg, worst inlier recall {:.3}, likelihood decreases {}",
            s.worst_angle_deg, s.worst_recall, s.likelihood_decreases
        ),
    )
}

// ---------------------------------------------------------------------------
// Optimizer

/// Three poses; pose 0 is the gauge and pose 2 is held fixed, so the free
/// parameters are exactly pose 1's `(x, y, θ)`. The two odometry links
/// disagree and carry correlated information.
pub fn toy_problem() -> FactorGraph {
    let poses = vec![
        Pose2D::new(0.0, 0.0, 0.0),
        Pose2D::new(1.0, 0.0, 0.0),
        Pose2D::new(2.2, 0.4, 0.6),
    ];
    let mut g = FactorGraph::from_poses(poses, Matrix3::identity());
    g.odometry = vec![
        RelativePoseFactor::new(
            0,
            1,
            Transform2D::new(0.1, 1.0, 0.05),
            Matrix3::new(40.0, 5.0, 2.0, 5.0, 30.0, -3.0, 2.0, -3.0, 60.0),
        ),
        RelativePoseFactor::new(
            1,
            2,
            Transform2D::new(0.3, 1.1, 0.1),
            Matrix3::new(25.0, -4.0, 1.0, -4.0, 50.0, 2.0, 1.0, 2.0, 80.0),
        ),
    ];
    g
}

fn toy_cost(g: &FactorGraph, x1: &Pose2D) -> f64 {
    let f = &g.odometry;
    residual_relative(&f[0], &g.poses[0], x1).norm_squared()
        + residual_relative(&f[1], x1, &g.poses[2]).norm_squared()
}

/// Exhaustive search over `center ± half` in steps of `step`.
fn grid_min(g: &FactorGraph, center: Vector3<f64>, half: f64, step: f64) -> Vector3<f64> {
    let n = (half / step).round() as i64;
    let mut best = (f64::INFINITY, center);
    for i in -n..=n {
        for j in -n..=n {
            for k in -n..=n {
                let p = center + Vector3::new(i as f64, j as f64, k as f64) * step;
                let c = toy_cost(g, &Pose2D::new(p.x, p.y, p.z));
                if c < best.0 {
                    best = (c, p);
                }
            }
        }
    }
    best.1
}

/// Largest coordinate difference between the optimizer and the grid optimum.
pub fn grid_oracle_error() -> (f64, Vector3<f64>, Vector3<f64>) {
    let g = toy_problem();
    let solved = Optimizer::new(ResidualWeights::default(), SolverParams::default())
        .with_fixed(FixedSet {
            poses: [2].into_iter().collect(),
            segments: false,
        })
        .run(&g);
    let p = solved.graph.poses[1];
    let opt = Vector3::new(p.x, p.y, p.theta);
    // Coarse pass over a wide box, then the 1e-3 grid around its winner.
    let coarse = grid_min(&g, Vector3::new(1.0, 0.0, 0.0), 1.0, 0.02);
    let fine = grid_min(&g, coarse, 0.03, 1e-3);
    ((opt - fine).abs().max(), opt, fine)
}

pub fn optimizer_oracle() -> Outcome {
    let (err, opt, grid) = grid_oracle_error();
    Outcome::new(
        err <= 2e-3,
        format!(
            "optimizer ({:.4}, {:.4}, {:.4}) vs grid ({:.4}, {:.4}, {:.4}), max diff {err:.1e} (tol 2e-3)",
            opt.x, opt.y, opt.z, grid.x, grid.y, grid.z
        ),
    )
}

// ---------------------------------------------------------------------------
// Information matrix

/// A straight chain of `n` poses, each seeing a wall 1 m to its left.
pub fn corridor(n: usize) -> FactorGraph {
    let poses: Vec<Pose2D> = (0..n)
        .map(|k| Pose2D::new(k as f64 * 0.5, 0.0, 0.0))
        .collect();
    let mut g = FactorGraph::from_poses(poses, Matrix3::from_diagonal_element(100.0));
    for k in 0..n {
        g.scans[k].points = (0..10)
            .map(|i| Point::new(-0.5 + 0.1 * i as f64, 1.0))
            .collect();
    }
    g
}

/// Pose pairs an oracle derives from the factor list alone: each odometry link
/// couples its two poses, each human factor couples every pose of `X_a ∪ X_b`.
pub fn pattern_oracle(g: &FactorGraph) -> BTreeSet<(usize, usize)> {
    let mut out: BTreeSet<(usize, usize)> = (0..g.num_poses()).map(|k| (k, k)).collect();
    for f in &g.odometry {
        out.extend([(f.i, f.j), (f.j, f.i)]);
    }
    for h in &g.human_factors {
        let all: Vec<usize> = h.xa.iter().chain(&h.xb).copied().collect();
        for &p in &all {
            for &q in &all {
                out.insert((p, q));
            }
        }
    }
    out
}

/// Variable-block pairs from the factor list: odometry couples its poses, each
/// side's selection couples its poses to that side's segment, and `R_p` couples
/// the two segments.
pub fn block_oracle(g: &FactorGraph) -> BTreeSet<(Variable, Variable)> {
    let mut out = BTreeSet::new();
    let mut link = |a: Variable, b: Variable| {
        out.extend([(a, a), (b, b), (a, b), (b, a)]);
    };
    for f in &g.odometry {
        link(Variable::Pose(f.i), Variable::Pose(f.j));
    }
    for (factor, h) in g.human_factors.iter().enumerate() {
        let va = Variable::Segment {
            factor,
            side: Side::A,
        };
        let vb = Variable::Segment {
            factor,
            side: Side::B,
        };
        for &p in &h.xa {
            link(Variable::Pose(p), va);
        }
        for &p in &h.xb {
            link(Variable::Pose(p), vb);
        }
        link(va, vb);
    }
    out
}

pub fn linked_corridor() -> FactorGraph {
    let mut g = corridor(12);
    let sel = |poses: std::ops::Range<usize>| -> Vec<ObservationRef> {
        poses
            .flat_map(|p| (0..10).map(move |i| ObservationRef::new(p, i)))
            .collect()
    };
    let h = HumanCorrectionFactor::ordered(
        Segment::from_coords(0.0, 1.0, 1.0, 1.0).unwrap(),
        Segment::from_coords(4.0, 1.0, 5.0, 1.0).unwrap(),
        sel(1..3),
        sel(8..10),
        CorrectionMode::Collinearity,
        5,
    )
    .unwrap();
    g.human_factors.push(h);
    g
}

pub fn information_structure() -> Outcome {
    let weights = ResidualWeights::default();
    let linked = linked_corridor();
    let info = information_matrix(&linked, &weights);
    let blocks: BTreeSet<(Variable, Variable)> = info
        .structural_entries()
        .into_iter()
        .map(|(r, c)| {
            (
                block_of(&info.layout.variables, r),
                block_of(&info.layout.variables, c),
            )
        })
        .collect();
    let linked_ok =
        blocks == block_oracle(&linked) && info.reduced_pose_pattern() == &pattern_oracle(&linked);

    let plain = corridor(12);
    let info = information_matrix(&plain, &weights);
    let tridiagonal = info
        .structural_entries()
        .iter()
        .all(|(r, c)| (r / 3).abs_diff(c / 3) <= 1)
        && info.reduced_pose_pattern() == &pattern_oracle(&plain)
        && (0..11).all(|k| info.reduced_pose_pattern().contains(&(k, k + 1)));
    Outcome::new(
        linked_ok && tridiagonal,
        format!("one factor linking poses 1-2 with 8-9: pattern matches oracle {linked_ok}; no factors: block-tridiagonal {tridiagonal}"),
    )
}

/// The variable owning scalar column `col`, given the layout order.
fn block_of(vars: &[Variable], col: usize) -> Variable {
    let mut start = 0;
    for v in vars {
        if col < start + v.dim() {
            return *v;
        }
        start += v.dim();
    }
    panic!("column {col} outside the layout")
}
