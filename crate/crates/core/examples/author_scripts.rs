//! Regenerates the checked-in fixtures: graphs, ground truth and correction
//! scripts for both synthetic datasets.
//!
//! Each script stroke is drawn along the current fit of a named feature, and
//! the correction is applied before the next stroke is drawn, as a user
//! working through the map would.
//!
//! ```text
//! cargo run --release -p hitl-slam --example author_scripts -- fixtures
//! ```

use std::path::{Path, PathBuf};

use hitl_slam::dataset::{
    generate_bent_hallway, generate_lost_poses, save_graph, save_script, save_truth,
    BentHallwayConfig, Generated, GroundTruth, LostPosesConfig,
};
use hitl_slam::geometry::Segment;
use hitl_slam::interpret::RawCorrection;
use hitl_slam::metrics::fit_feature;
use hitl_slam::model::CorrectionMode;
use hitl_slam::session::{evaluate, Session, SessionConfig};

/// Part of a feature's current fit, as `name` or `name:from:to` with fractions
/// along the fit. A bare name keeps the middle 40%, clear of the corners.
fn stroke(session: &Session, truth: &GroundTruth, desc: &str) -> Segment {
    let mut parts = desc.split(':');
    let name = parts.next().unwrap();
    let from: f64 = parts.next().map_or(0.3, |v| v.parse().unwrap());
    let to: f64 = parts.next().map_or(0.7, |v| v.parse().unwrap());
    let f = truth
        .feature(name)
        .unwrap_or_else(|| panic!("no feature {name}"));
    let s = fit_feature(session.graph(), f).expect("feature fits");
    let d = s.p1 - s.p0;
    Segment::new(s.p0 + from * d, s.p0 + to * d).unwrap()
}

fn author(name: &str, data: Generated, plan: &[(CorrectionMode, &str, &str)], out: &Path) {
    let mut session = Session::new(data.graph.clone(), SessionConfig::default()).unwrap();
    let before = evaluate(session.graph(), &data.truth).unwrap();
    println!(
        "{name}: initial {} I={:.3}",
        before.summary_line(),
        session.log()[0].inconsistency
    );
    let mut script = Vec::new();
    for (mode, a, b) in plan {
        let raw = RawCorrection::new(
            stroke(&session, &data.truth, a),
            stroke(&session, &data.truth, b),
            *mode,
        )
        .unwrap();
        let up = session
            .submit_correction(&raw)
            .unwrap_or_else(|e| panic!("{mode} {a} {b}: {e}"));
        let rep = evaluate(session.graph(), &data.truth).unwrap();
        println!(
            "  {mode} {a} {b}: {} I={:.3} converged={} {:.0} ms",
            rep.summary_line(),
            up.total_inconsistency,
            up.converged,
            up.timing_ms
        );
        script.push(raw);
    }
    for row in &evaluate(session.graph(), &data.truth).unwrap().rows {
        println!(
            "    {:?} {} {}: {:.4} (truth {})",
            row.kind, row.a, row.b, row.measured, row.truth
        );
    }
    save_graph(&data.graph, out.join(format!("{name}.graph"))).unwrap();
    save_truth(&data.truth, out.join(format!("{name}.truth"))).unwrap();
    save_script(&script, out.join(format!("{name}.script"))).unwrap();
}

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    std::fs::create_dir_all(&out).unwrap();
    use CorrectionMode::*;
    // A perpendicularity stroke pair must select poses in temporal order, so
    // each one uses the wall ends away from the shared corner.
    author(
        "lost_poses",
        generate_lost_poses(&LostPosesConfig::default()),
        &[
            (Colocation, "right.1", "right.3"),
            (Perpendicularity, "top.1:0.1:0.5", "right.1:0.5:0.9"),
            (Collinearity, "left.1", "left.2"),
            (Perpendicularity, "left.3:0.9:0.5", "top.3:0.5:0.9"),
        ],
        &out,
    );
    author(
        "bent_hallway",
        generate_bent_hallway(&BentHallwayConfig::default()),
        &[(Collinearity, "left.a", "left.b")],
        &out,
    );
}
