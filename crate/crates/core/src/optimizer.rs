//! Joint Levenberg–Marquardt over poses and human-factor segment endpoints.
//!
//! Pose 0 is the gauge and never moves. Further poses, or all segments, can be
//! held fixed through [`FixedSet`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::normalize_angle;
use crate::model::{FactorGraph, Side};
use crate::residuals::{all_rows, total_cost, ResidualRow, ResidualWeights, Variable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub function_tol: f64,
    /// Stop when the step norm falls below this, relative to the state norm.
    pub param_tol: f64,
    /// Initial damping, relative to the Marquardt diagonal.
    pub initial_damping: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            function_tol: 1e-10,
            param_tol: 1e-10,
            initial_damping: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizeError {
    #[error("optimizer did not converge after {iterations} iterations (cost {final_cost})")]
    NonConvergence { iterations: usize, final_cost: f64 },
}

/// Result of a solve. The graph is the best iterate even without convergence.
#[derive(Debug, Clone)]
pub struct Optimized {
    pub graph: FactorGraph,
    pub report: SolveReport,
}

impl Optimized {
    pub fn converged(&self) -> bool {
        self.report.status == SolveStatus::Converged
    }

    pub fn into_result(self) -> Result<FactorGraph, OptimizeError> {
        match self.report.status {
            SolveStatus::Converged => Ok(self.graph),
            SolveStatus::MaxIterations => Err(OptimizeError::NonConvergence {
                iterations: self.report.iterations,
                final_cost: self.report.final_cost,
            }),
        }
    }
}

/// Variables held constant in addition to the gauge pose.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixedSet {
    pub poses: BTreeSet<usize>,
    pub segments: bool,
}

/// Column layout of the free variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub variables: Vec<Variable>,
    offsets: BTreeMap<Variable, usize>,
    pub dim: usize,
}

impl Layout {
    fn build(variables: Vec<Variable>) -> Self {
        let mut offsets = BTreeMap::new();
        let mut dim = 0;
        for v in &variables {
            offsets.insert(*v, dim);
            dim += v.dim();
        }
        Self {
            variables,
            offsets,
            dim,
        }
    }

    /// Every pose followed by every segment.
    pub fn full(graph: &FactorGraph) -> Self {
        Self::build(all_variables(graph).collect())
    }

    pub fn free(graph: &FactorGraph, fixed: &FixedSet) -> Self {
        Self::build(
            all_variables(graph)
                .filter(|v| match v {
                    Variable::Pose(k) => *k != 0 && !fixed.poses.contains(k),
                    Variable::Segment { .. } => !fixed.segments,
                })
                .collect(),
        )
    }

    pub fn offset(&self, v: &Variable) -> Option<usize> {
        self.offsets.get(v).copied()
    }
}

fn all_variables(graph: &FactorGraph) -> impl Iterator<Item = Variable> + '_ {
    let poses = (0..graph.num_poses()).map(Variable::Pose);
    let segments = (0..graph.human_factors.len()).flat_map(|factor| {
        [Side::A, Side::B]
            .into_iter()
            .map(move |side| Variable::Segment { factor, side })
    });
    poses.chain(segments)
}

/// Free Jacobian entries `(column, value)` of one row.
fn row_entries(row: &ResidualRow, layout: &Layout) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for (var, g) in &row.blocks {
        if let Some(off) = layout.offset(var) {
            out.extend(g.iter().enumerate().map(|(k, v)| (off + k, *v)));
        }
    }
    out
}

struct NormalEquations {
    triplets: Vec<(usize, usize, f64)>,
    gradient: DVector<f64>,
    diagonal: Vec<f64>,
}

fn normal_equations(rows: &[ResidualRow], layout: &Layout) -> NormalEquations {
    let mut triplets = Vec::new();
    let mut gradient = DVector::zeros(layout.dim);
    let mut diagonal = vec![0.0; layout.dim];
    for row in rows {
        let e = row_entries(row, layout);
        for &(a, va) in &e {
            gradient[a] += va * row.value;
            for &(b, vb) in &e {
                triplets.push((a, b, va * vb));
                if a == b {
                    diagonal[a] += va * vb;
                }
            }
        }
    }
    NormalEquations {
        triplets,
        gradient,
        diagonal,
    }
}

/// Marquardt scaling that is invariant under a rigid motion of the world:
/// each xy pair is scaled by its mean diagonal.
fn damping_diagonal(diag: &[f64], layout: &Layout) -> Vec<f64> {
    let mut d = diag.to_vec();
    for v in &layout.variables {
        let off = layout.offset(v).unwrap();
        let pairs: &[usize] = match v {
            Variable::Pose(_) => &[0],
            Variable::Segment { .. } => &[0, 2],
        };
        for &p in pairs {
            let m = 0.5 * (diag[off + p] + diag[off + p + 1]);
            d[off + p] = m;
            d[off + p + 1] = m;
        }
    }
    let floor = 1e-9 * d.iter().cloned().fold(0.0, f64::max) + 1e-12;
    d.iter_mut().for_each(|v| *v = v.max(floor));
    d
}

fn solve_damped(
    ne: &NormalEquations,
    damp: &[f64],
    lambda: f64,
    dim: usize,
) -> Option<DVector<f64>> {
    let mut coo = CooMatrix::new(dim, dim);
    for &(a, b, v) in &ne.triplets {
        coo.push(a, b, v);
    }
    for (k, d) in damp.iter().enumerate() {
        coo.push(k, k, lambda * d);
    }
    let csc = CscMatrix::from(&coo);
    let chol = CscCholesky::factor(&csc).ok()?;
    let step = chol.solve(&(-&ne.gradient));
    let step = DVector::from_column_slice(step.as_slice());
    step.iter().all(|v| v.is_finite()).then_some(step)
}

fn state_norm(graph: &FactorGraph, layout: &Layout) -> f64 {
    let mut s = 0.0;
    for v in &layout.variables {
        match *v {
            Variable::Pose(k) => {
                let p = graph.poses[k];
                s += p.x * p.x + p.y * p.y + p.theta * p.theta;
            }
            Variable::Segment { factor, side } => {
                let seg = graph.human_factors[factor].segment(side);
                s += seg.p0.norm_squared() + seg.p1.norm_squared();
            }
        }
    }
    s.sqrt()
}

/// `x ⊕ Δ`: additive on coordinates, angle re-normalized.
pub fn retract(graph: &FactorGraph, layout: &Layout, step: &DVector<f64>) -> FactorGraph {
    let mut out = graph.clone();
    for v in &layout.variables {
        let o = layout.offset(v).unwrap();
        match *v {
            Variable::Pose(k) => {
                let p = &mut out.poses[k];
                p.x += step[o];
                p.y += step[o + 1];
                p.theta = normalize_angle(p.theta + step[o + 2]);
            }
            Variable::Segment { factor, side } => {
                let seg = out.human_factors[factor].segment_mut(side);
                seg.p0.x += step[o];
                seg.p0.y += step[o + 1];
                seg.p1.x += step[o + 2];
                seg.p1.y += step[o + 3];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct Optimizer {
    pub weights: ResidualWeights,
    pub params: SolverParams,
    pub fixed: FixedSet,
}

impl Optimizer {
    pub fn new(weights: ResidualWeights, params: SolverParams) -> Self {
        Self {
            weights,
            params,
            fixed: FixedSet::default(),
        }
    }

    pub fn with_fixed(mut self, fixed: FixedSet) -> Self {
        self.fixed = fixed;
        self
    }

    pub fn run(&self, graph: &FactorGraph) -> Optimized {
        let layout = Layout::free(graph, &self.fixed);
        let mut x = graph.clone();
        let mut cost = total_cost(&x, &self.weights);
        let mut report = SolveReport {
            status: SolveStatus::MaxIterations,
            iterations: 0,
            initial_cost: cost,
            final_cost: cost,
            cost_history: vec![cost],
        };
        if layout.dim == 0 || cost == 0.0 {
            report.status = SolveStatus::Converged;
            return Optimized { graph: x, report };
        }

        let mut lambda = self.params.initial_damping;
        'outer: for it in 0..self.params.max_iterations {
            report.iterations = it + 1;
            let rows = all_rows(&x, &self.weights);
            let ne = normal_equations(&rows, &layout);
            if ne.gradient.amax() <= f64::EPSILON * cost.max(f64::MIN_POSITIVE) {
                report.status = SolveStatus::Converged;
                break;
            }
            let damp = damping_diagonal(&ne.diagonal, &layout);
            let x_norm = state_norm(&x, &layout);
            loop {
                if lambda > 1e16 {
                    // No descent direction left at working precision.
                    report.status = SolveStatus::Converged;
                    break 'outer;
                }
                let Some(step) = solve_damped(&ne, &damp, lambda, layout.dim) else {
                    lambda *= 10.0;
                    continue;
                };
                if step.norm() <= self.params.param_tol * (x_norm + self.params.param_tol) {
                    report.status = SolveStatus::Converged;
                    break 'outer;
                }
                let candidate = retract(&x, &layout, &step);
                let new_cost = total_cost(&candidate, &self.weights);
                if new_cost.is_finite() && new_cost < cost {
                    let decrease = (cost - new_cost) / cost;
                    x = candidate;
                    cost = new_cost;
                    report.cost_history.push(cost);
                    lambda = (lambda / 3.0).max(1e-12);
                    if decrease < self.params.function_tol || cost == 0.0 {
                        report.status = SolveStatus::Converged;
                        break 'outer;
                    }
                    break;
                }
                lambda *= 4.0;
            }
        }
        report.final_cost = cost;
        Optimized { graph: x, report }
    }
}

/// Solve with only the gauge pose fixed.
pub fn optimize(
    graph: &FactorGraph,
    weights: &ResidualWeights,
    params: &SolverParams,
) -> Optimized {
    Optimizer::new(*weights, *params).run(graph)
}

/// `JᵀJ` over every pose and segment, with structural zeros kept explicit.
#[derive(Debug, Clone)]
pub struct InformationMatrix {
    pub layout: Layout,
    pub matrix: CscMatrix<f64>,
    num_poses: usize,
    /// Pose pairs coupled through a shared row, or through eliminated segments.
    reduced: BTreeSet<(usize, usize)>,
}

pub fn information_matrix(graph: &FactorGraph, weights: &ResidualWeights) -> InformationMatrix {
    let layout = Layout::full(graph);
    let rows = all_rows(graph, weights);
    let mut coo = CooMatrix::new(layout.dim, layout.dim);
    // Variables touching each segment component, for the reduced pattern.
    let mut seg_poses: BTreeMap<(usize, Side), BTreeSet<usize>> = BTreeMap::new();
    let mut seg_links: Vec<((usize, Side), (usize, Side))> = Vec::new();
    let mut reduced = BTreeSet::new();
    for row in &rows {
        let e = row_entries(row, &layout);
        for &(a, va) in &e {
            for &(b, vb) in &e {
                coo.push(a, b, va * vb);
            }
        }
        let poses: Vec<usize> = row
            .blocks
            .iter()
            .filter_map(|(v, _)| match v {
                Variable::Pose(k) => Some(*k),
                _ => None,
            })
            .collect();
        let segs: Vec<(usize, Side)> = row
            .blocks
            .iter()
            .filter_map(|(v, _)| match v {
                Variable::Segment { factor, side } => Some((*factor, *side)),
                _ => None,
            })
            .collect();
        for &p in &poses {
            for &q in &poses {
                reduced.insert((p, q));
            }
        }
        for s in &segs {
            seg_poses
                .entry(*s)
                .or_default()
                .extend(poses.iter().copied());
        }
        for w in segs.windows(2) {
            seg_links.push((w[0], w[1]));
        }
    }
    // Eliminating a connected group of segments couples all poses touching it.
    let keys: Vec<(usize, Side)> = seg_poses.keys().copied().collect();
    let index: BTreeMap<(usize, Side), usize> =
        keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut parent: Vec<usize> = (0..keys.len()).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        parent[i] = r;
        r
    }
    for (a, b) in &seg_links {
        if let (Some(&ia), Some(&ib)) = (index.get(a), index.get(b)) {
            let (ra, rb) = (find(&mut parent, ia), find(&mut parent, ib));
            parent[ra] = rb;
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        let r = find(&mut parent, i);
        groups
            .entry(r)
            .or_default()
            .extend(seg_poses[k].iter().copied());
    }
    for poses in groups.values() {
        for &p in poses {
            for &q in poses {
                reduced.insert((p, q));
            }
        }
    }
    InformationMatrix {
        matrix: CscMatrix::from(&coo),
        layout,
        num_poses: graph.num_poses(),
        reduced,
    }
}

impl InformationMatrix {
    pub fn num_poses(&self) -> usize {
        self.num_poses
    }

    /// Structural nonzero `(row, col)` entries.
    pub fn structural_entries(&self) -> BTreeSet<(usize, usize)> {
        self.matrix.triplet_iter().map(|(r, c, _)| (r, c)).collect()
    }

    /// Pose pairs with a structural nonzero in their block of `JᵀJ`.
    pub fn pose_pattern(&self) -> BTreeSet<(usize, usize)> {
        let pose_dims = 3 * self.num_poses;
        self.matrix
            .triplet_iter()
            .filter(|(r, c, _)| *r < pose_dims && *c < pose_dims)
            .map(|(r, c, _)| (r / 3, c / 3))
            .collect()
    }

    /// Pose pairs coupled once the segment variables are marginalized out.
    pub fn reduced_pose_pattern(&self) -> &BTreeSet<(usize, usize)> {
        &self.reduced
    }

    /// Binary PGM of the reduced pose pattern: white where coupled.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> io::Result<()> {
        let n = self.num_poses;
        write!(out, "P5\n{n} {n}\n255\n")?;
        let mut buf = vec![0u8; n * n];
        for &(r, c) in &self.reduced {
            buf[r * n + c] = 255;
        }
        out.write_all(&buf)
    }

    /// `row col value` per structural entry, preceded by the variable layout.
    pub fn write_triplets<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# dim {} nnz {}", self.layout.dim, self.matrix.nnz())?;
        for v in &self.layout.variables {
            let off = self.layout.offset(v).unwrap();
            match v {
                Variable::Pose(k) => writeln!(out, "# {off} pose {k}")?,
                Variable::Segment { factor, side } => {
                    writeln!(out, "# {off} segment {factor} {side:?}")?
                }
            }
        }
        for (r, c, v) in self.matrix.triplet_iter() {
            writeln!(out, "{r} {c} {v}")?;
        }
        Ok(())
    }
}
