//! The correction loop: interpret a stroke pair, apply its explicit
//! correction, re-optimize with every factor so far, and report metrics.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::{apply_correction, CorrectionError};
use crate::dataset::GroundTruth;
use crate::geometry::{fit_segment, Pose2D, Segment};
use crate::interpret::{interpret, InterpretError, InterpretationParams, RawCorrection};
use crate::metrics::{
    ground_truth_report, total_inconsistency, GroundTruthReport, MetricsError, DEFAULT_RESOLUTION,
};
use crate::model::{validate, CorrectionMode, FactorGraph, HumanCorrectionFactor};
use crate::optimizer::{optimize, SolveStatus, SolverParams};
use crate::residuals::{total_cost, ResidualWeights};

/// Upper bound on world points sent per update.
pub const MAX_DISPLAY_POINTS: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub interpretation: InterpretationParams,
    pub weights: ResidualWeights,
    pub solver: SolverParams,
    /// Raster resolution of the inconsistency metric, m.
    pub resolution: f64,
    pub max_display_points: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            interpretation: InterpretationParams::default(),
            weights: ResidualWeights::default(),
            solver: SolverParams::default(),
            resolution: DEFAULT_RESOLUTION,
            max_display_points: MAX_DISPLAY_POINTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    #[error("nothing to undo")]
    NothingToUndo,
    #[error("graph is invalid: {0}")]
    InvalidGraph(String),
}

/// One accepted correction, or the initial state at iteration 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mode: Option<CorrectionMode>,
    pub total_cost: f64,
    pub inconsistency: f64,
    pub solver_iterations: usize,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorView {
    pub mode: CorrectionMode,
    pub pa: Segment,
    pub pb: Segment,
}

/// State of the map after an iteration, for display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapUpdate {
    pub iteration: usize,
    pub poses: Vec<Pose2D>,
    /// World-frame points, uniformly subsampled per scan.
    pub points: Vec<[f64; 2]>,
    pub human_factors: Vec<FactorView>,
    pub total_cost: f64,
    pub total_inconsistency: f64,
    pub timing_ms: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct Session {
    graph: FactorGraph,
    config: SessionConfig,
    /// Graph before each accepted correction.
    snapshots: Vec<FactorGraph>,
    log: Vec<IterationRecord>,
    last_timing_ms: f64,
}

/// Re-fits every factor's segments to the current world points of its
/// selections, keeping each segment's direction.
pub fn refit_segments(graph: &mut FactorGraph) {
    let mut fitted = Vec::with_capacity(graph.human_factors.len());
    for h in &graph.human_factors {
        let fit = |sel: &[crate::model::ObservationRef], old: &Segment| {
            let pts = graph.selection_points(sel);
            let w = vec![1.0; pts.len()];
            match fit_segment(&pts, &w) {
                Ok(s) if s.direction().dot(&old.direction()) < 0.0 => {
                    Segment { p0: s.p1, p1: s.p0 }
                }
                Ok(s) => s,
                Err(_) => *old,
            }
        };
        fitted.push((fit(&h.sa, &h.pa), fit(&h.sb, &h.pb)));
    }
    for (h, (pa, pb)) in graph.human_factors.iter_mut().zip(fitted) {
        h.pa = pa;
        h.pb = pb;
    }
}

impl Session {
    pub fn new(graph: FactorGraph, config: SessionConfig) -> Result<Self, SessionError> {
        let violations = validate(&graph);
        if !violations.is_empty() {
            let msg: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(SessionError::InvalidGraph(msg.join("; ")));
        }
        let mut s = Self {
            graph,
            config,
            snapshots: Vec::new(),
            log: Vec::new(),
            last_timing_ms: 0.0,
        };
        let record = s.record(None, 0, SolveStatus::Converged);
        s.log.push(record);
        Ok(s)
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn log(&self) -> &[IterationRecord] {
        &self.log
    }

    pub fn iteration(&self) -> usize {
        self.snapshots.len()
    }

    fn record(
        &self,
        mode: Option<CorrectionMode>,
        solver_iterations: usize,
        status: SolveStatus,
    ) -> IterationRecord {
        IterationRecord {
            iteration: self.iteration(),
            mode,
            total_cost: total_cost(&self.graph, &self.config.weights),
            inconsistency: total_inconsistency(&self.graph, self.config.resolution),
            solver_iterations,
            status,
        }
    }

    /// Runs the full pipeline for one stroke pair. On error the graph is left
    /// untouched. Non-convergence is not an error: the best iterate is kept
    /// and the update reports `converged: false`.
    pub fn submit_correction(&mut self, raw: &RawCorrection) -> Result<MapUpdate, SessionError> {
        let start = Instant::now();
        let factor = interpret(&self.graph, raw, &self.config.interpretation)?;
        let next = self.solve_with(factor)?;
        let (graph, solver_iterations, status) = next;
        self.snapshots
            .push(std::mem::replace(&mut self.graph, graph));
        let record = self.record(Some(raw.mode), solver_iterations, status);
        self.log.push(record);
        self.last_timing_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(self.snapshot())
    }

    fn solve_with(
        &self,
        factor: HumanCorrectionFactor,
    ) -> Result<(FactorGraph, usize, SolveStatus), SessionError> {
        let applied = apply_correction(&self.graph, &factor)?;
        let mut g = applied.graph;
        g.human_factors.push(factor);
        refit_segments(&mut g);
        let out = optimize(&g, &self.config.weights, &self.config.solver);
        Ok((out.graph, out.report.iterations, out.report.status))
    }

    /// Restores the graph from before the last accepted correction.
    pub fn undo_last(&mut self) -> Result<MapUpdate, SessionError> {
        let prev = self.snapshots.pop().ok_or(SessionError::NothingToUndo)?;
        self.graph = prev;
        self.log.pop();
        self.last_timing_ms = 0.0;
        Ok(self.snapshot())
    }

    pub fn snapshot(&self) -> MapUpdate {
        let last = self.log.last().expect("initial record");
        MapUpdate {
            iteration: self.iteration(),
            poses: self.graph.poses.clone(),
            points: display_points(&self.graph, self.config.max_display_points),
            human_factors: self
                .graph
                .human_factors
                .iter()
                .map(|h| FactorView {
                    mode: h.mode,
                    pa: h.pa,
                    pb: h.pb,
                })
                .collect(),
            total_cost: last.total_cost,
            total_inconsistency: last.inconsistency,
            timing_ms: self.last_timing_ms,
            converged: last.status == SolveStatus::Converged,
        }
    }
}

/// World points with a per-scan stride chosen so the total stays within `max`.
pub fn display_points(graph: &FactorGraph, max: usize) -> Vec<[f64; 2]> {
    let total = graph.total_points();
    let stride = if max == 0 {
        usize::MAX
    } else {
        total.div_ceil(max).max(1)
    };
    let mut out = Vec::with_capacity(total.min(max));
    for (pose, scan) in graph.poses.iter().zip(&graph.scans) {
        for p in scan.points.iter().step_by(stride) {
            let w = pose.transform_point(p);
            out.push([w.x, w.y]);
        }
    }
    out.truncate(max);
    out
}

#[derive(Debug, Error)]
#[error("record {record}: {source}")]
pub struct ReplayError {
    pub record: usize,
    #[source]
    pub source: SessionError,
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub graph: FactorGraph,
    pub log: Vec<IterationRecord>,
}

/// Applies the script records in order.
pub fn replay(
    graph: FactorGraph,
    script: &[RawCorrection],
    config: SessionConfig,
) -> Result<Replay, ReplayError> {
    let mut session =
        Session::new(graph, config).map_err(|source| ReplayError { record: 0, source })?;
    for (record, raw) in script.iter().enumerate() {
        session
            .submit_correction(raw)
            .map_err(|source| ReplayError { record, source })?;
    }
    Ok(Replay {
        log: session.log.clone(),
        graph: session.graph,
    })
}

/// Text metrics file: one line per iteration, then ground-truth rows if given.
/// Contains no timings, so replays are byte-identical.
pub fn write_metrics(log: &[IterationRecord], report: Option<&GroundTruthReport>) -> String {
    let mut s = String::from("hitl-metrics v1\n");
    for r in log {
        let mode = r.mode.map_or("initial", |m| m.as_str());
        let status = match r.status {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIterations => "max_iterations",
        };
        let _ = writeln!(
            s,
            "iteration {} {} cost {} inconsistency {} solver_iterations {} {}",
            r.iteration, mode, r.total_cost, r.inconsistency, r.solver_iterations, status
        );
    }
    if let Some(rep) = report {
        for row in &rep.rows {
            let kind = match row.kind {
                crate::metrics::MeasureKind::Angle => "angle",
                crate::metrics::MeasureKind::Distance => "distance",
            };
            let _ = writeln!(
                s,
                "measure {kind} {} {} measured {} truth {} error {}",
                row.a, row.b, row.measured, row.truth, row.error
            );
        }
        let _ = writeln!(s, "summary {}", rep.summary_line());
    }
    s
}

/// Ground-truth report of a graph against a shipped truth file.
pub fn evaluate(
    graph: &FactorGraph,
    truth: &GroundTruth,
) -> Result<GroundTruthReport, MetricsError> {
    ground_truth_report(graph, &truth.features, &truth.measurements)
}
