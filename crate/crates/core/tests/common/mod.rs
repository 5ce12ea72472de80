#![allow(dead_code)]

pub mod criteria;

use std::f64::consts::PI;

use hitl_slam::geometry::{Point, Pose2D, Segment, Transform2D};
use hitl_slam::model::{
    CorrectionMode, FactorGraph, HumanCorrectionFactor, ObservationRef, RelativePoseFactor, Scan,
    Side,
};
use hitl_slam::residuals::{ResidualRow, Variable};
use nalgebra::Matrix3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_pose(rng: &mut impl Rng, extent: f64) -> Pose2D {
    Pose2D::new(
        rng.random_range(-extent..extent),
        rng.random_range(-extent..extent),
        rng.random_range(-PI..PI),
    )
}

pub fn random_transform(rng: &mut impl Rng, extent: f64, max_angle: f64) -> Transform2D {
    Transform2D::new(
        rng.random_range(-max_angle..max_angle),
        rng.random_range(-extent..extent),
        rng.random_range(-extent..extent),
    )
}

/// Symmetric positive definite 3×3 with a random off-diagonal part.
pub fn random_information(rng: &mut impl Rng) -> Matrix3<f64> {
    let l = Matrix3::from_fn(|r, c| {
        if r >= c {
            rng.random_range(-1.0..1.0)
        } else {
            0.0
        }
    });
    l * l.transpose() + Matrix3::from_diagonal_element(rng.random_range(0.5..3.0))
}

pub fn random_segment(rng: &mut impl Rng, extent: f64) -> Segment {
    loop {
        let p0 = Point::new(
            rng.random_range(-extent..extent),
            rng.random_range(-extent..extent),
        );
        let p1 = Point::new(
            rng.random_range(-extent..extent),
            rng.random_range(-extent..extent),
        );
        if (p1 - p0).norm() > 0.5 {
            return Segment::new(p0, p1).unwrap();
        }
    }
}

/// Six poses at random, odometry that disagrees with them, eight random scan
/// points per pose and one human factor selecting poses 0–2 against 3–5.
pub fn random_graph(rng: &mut impl Rng, mode: CorrectionMode) -> FactorGraph {
    let poses: Vec<Pose2D> = (0..6).map(|_| random_pose(rng, 3.0)).collect();
    let mut g = FactorGraph::from_poses(poses.clone(), Matrix3::identity());
    g.odometry = (0..5)
        .map(|i| {
            let truth = poses[i].between(&poses[i + 1]);
            let noise = random_transform(rng, 0.3, 0.3);
            RelativePoseFactor::new(i, i + 1, truth.compose(&noise), random_information(rng))
        })
        .collect();
    g.scans = (0..6)
        .map(|k| Scan {
            pose_id: k,
            points: (0..8)
                .map(|_| Point::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
                .collect(),
        })
        .collect();
    let sel = |range: std::ops::Range<usize>| -> Vec<ObservationRef> {
        range
            .flat_map(|p| (0..8).map(move |i| ObservationRef::new(p, i)))
            .collect()
    };
    let h = HumanCorrectionFactor::ordered(
        random_segment(rng, 3.0),
        random_segment(rng, 3.0),
        sel(0..3),
        sel(3..6),
        mode,
        5,
    )
    .unwrap();
    g.human_factors.push(h);
    g
}

fn perturb(g: &mut FactorGraph, var: Variable, k: usize, h: f64) {
    match var {
        Variable::Pose(p) => match k {
            0 => g.poses[p].x += h,
            1 => g.poses[p].y += h,
            _ => g.poses[p].theta += h,
        },
        Variable::Segment { factor, side } => {
            let s = g.human_factors[factor].segment_mut(side);
            match k {
                0 => s.p0.x += h,
                1 => s.p0.y += h,
                2 => s.p1.x += h,
                _ => s.p1.y += h,
            }
        }
    }
}

/// Largest relative deviation of the analytic gradient of `row` from central
/// differences, over every variable the row declares plus `extra`. Relative to
/// the row's largest gradient entry (floored at 1e-2).
pub fn fd_error(
    graph: &FactorGraph,
    extra: &[Variable],
    step: f64,
    row: impl Fn(&FactorGraph) -> ResidualRow,
) -> f64 {
    let analytic = row(graph);
    let mut vars: Vec<Variable> = analytic.blocks.iter().map(|(v, _)| *v).collect();
    for v in extra {
        if !vars.contains(v) {
            vars.push(*v);
        }
    }
    let scale = analytic
        .blocks
        .iter()
        .flat_map(|(_, g)| g.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-2);
    let mut worst = 0.0f64;
    for var in vars {
        let grad: Vec<f64> = analytic.blocks.iter().filter(|(v, _)| *v == var).fold(
            vec![0.0; var.dim()],
            |mut acc, (_, g)| {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                acc
            },
        );
        for (k, a) in grad.iter().enumerate() {
            let mut plus = graph.clone();
            perturb(&mut plus, var, k, step);
            let mut minus = graph.clone();
            perturb(&mut minus, var, k, -step);
            let fd = (row(&plus).value - row(&minus).value) / (2.0 * step);
            worst = worst.max((a - fd).abs() / scale);
        }
    }
    worst
}

pub fn segment_var(side: Side) -> Variable {
    Variable::Segment { factor: 0, side }
}
