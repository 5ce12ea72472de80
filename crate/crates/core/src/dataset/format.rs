//! Line-oriented text formats for graphs, correction scripts and ground truth.
//!
//! Every file starts with a `<kind> v<version>` header. Blank lines and lines
//! starting with `#` are ignored. Floats are written with Rust's shortest
//! round-trip formatting.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2};
use thiserror::Error;

use crate::geometry::{Pose2D, Segment, Transform2D};
use crate::interpret::RawCorrection;
use crate::metrics::{Feature, GroundTruthMeasurement, MeasureKind, PointRange};
use crate::model::{
    validate, CorrectionMode, FactorGraph, GraphMetadata, HumanCorrectionFactor, ObservationRef,
    RelativePoseFactor, Scan,
};

pub const GRAPH_HEADER: &str = "hitl-graph";
pub const SCRIPT_HEADER: &str = "hitl-script";
pub const TRUTH_HEADER: &str = "hitl-truth";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line} (byte {offset}): {message}")]
pub struct ParseError {
    pub line: usize,
    /// Byte offset of the offending field from the start of the file.
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("unsupported {kind} version {found} (expected {expected})")]
    VersionMismatch {
        kind: &'static str,
        found: String,
        expected: u32,
    },
    #[error("graph fails validation: {0}")]
    Invalid(String),
}

/// A whitespace-separated field with its absolute byte offset.
#[derive(Debug, Clone, Copy)]
struct Field<'a> {
    text: &'a str,
    offset: usize,
}

struct Line<'a> {
    number: usize,
    offset: usize,
    end: usize,
    fields: Vec<Field<'a>>,
}

impl<'a> Line<'a> {
    fn error(&self, offset: usize, message: impl Into<String>) -> ParseError {
        ParseError {
            line: self.number,
            offset,
            message: message.into(),
        }
    }

    fn keyword(&self) -> &'a str {
        self.fields[0].text
    }

    fn get(&self, k: usize, what: &str) -> Result<Field<'a>, ParseError> {
        self.fields
            .get(k)
            .copied()
            .ok_or_else(|| self.error(self.end, format!("missing field `{what}`")))
    }

    fn parse<T: FromStr>(&self, k: usize, what: &str) -> Result<T, ParseError> {
        let f = self.get(k, what)?;
        f.text
            .parse()
            .map_err(|_| self.error(f.offset, format!("invalid {what} `{}`", f.text)))
    }

    fn float(&self, k: usize, what: &str) -> Result<f64, ParseError> {
        let v: f64 = self.parse(k, what)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.error(self.fields[k].offset, format!("non-finite {what}")))
        }
    }

    fn expect_len(&self, n: usize) -> Result<(), ParseError> {
        match self.fields.get(n) {
            Some(f) => Err(self.error(f.offset, format!("unexpected field `{}`", f.text))),
            None => Ok(()),
        }
    }
}

fn split_fields(text: &str, base: usize) -> Vec<Field<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push(Field {
                    text: &text[s..i],
                    offset: base + s,
                });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Field {
            text: &text[s..],
            offset: base + s,
        });
    }
    out
}

/// Non-empty, non-comment lines of a document.
fn lines(text: &str) -> Vec<Line<'_>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (k, raw) in text.split_inclusive('\n').enumerate() {
        let body = raw.trim_end_matches(['\n', '\r']);
        let fields = split_fields(body, offset);
        if !fields.is_empty() && !fields[0].text.starts_with('#') {
            out.push(Line {
                number: k + 1,
                offset,
                end: offset + body.len(),
                fields,
            });
        }
        offset += raw.len();
    }
    out
}

fn eof_error(text: &str, message: &str) -> ParseError {
    ParseError {
        line: text.lines().count() + 1,
        offset: text.len(),
        message: message.to_string(),
    }
}

fn check_header(text: &str, lines: &[Line<'_>], kind: &'static str) -> Result<(), DatasetError> {
    let first = lines.first().ok_or_else(|| eof_error(text, "empty file"))?;
    if first.keyword() != kind {
        return Err(first
            .error(
                first.offset,
                format!("expected header `{kind} v{FORMAT_VERSION}`"),
            )
            .into());
    }
    let v = first.get(1, "version")?;
    if v.text != format!("v{FORMAT_VERSION}") {
        return Err(DatasetError::VersionMismatch {
            kind,
            found: v.text.to_string(),
            expected: FORMAT_VERSION,
        });
    }
    first.expect_len(2)?;
    Ok(())
}

fn segment_at(line: &Line<'_>, k: usize, what: &str) -> Result<Segment, ParseError> {
    let c = [
        line.float(k, what)?,
        line.float(k + 1, what)?,
        line.float(k + 2, what)?,
        line.float(k + 3, what)?,
    ];
    Segment::from_coords(c[0], c[1], c[2], c[3])
        .map_err(|_| line.error(line.fields[k].offset, format!("degenerate {what}")))
}

fn mode_at(line: &Line<'_>, k: usize) -> Result<CorrectionMode, ParseError> {
    let f = line.get(k, "mode")?;
    f.text
        .parse()
        .map_err(|_| line.error(f.offset, format!("unknown correction mode `{}`", f.text)))
}

pub fn write_graph(graph: &FactorGraph) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{GRAPH_HEADER} v{FORMAT_VERSION}");
    let seed = graph
        .metadata
        .seed
        .map_or("-".to_string(), |v| v.to_string());
    let _ = writeln!(s, "meta {} {}", graph.metadata.max_range, seed);
    for (k, p) in graph.poses.iter().enumerate() {
        let _ = writeln!(s, "pose {k} {} {} {}", p.x, p.y, p.theta);
    }
    for f in &graph.odometry {
        let z = &f.measurement;
        let m = &f.information;
        let _ = writeln!(
            s,
            "odom {} {} {} {} {} {} {} {} {} {} {}",
            f.i,
            f.j,
            z.translation.x,
            z.translation.y,
            z.rotation,
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 2)]
        );
    }
    for scan in &graph.scans {
        let _ = writeln!(s, "scan {} {}", scan.pose_id, scan.points.len());
        for p in &scan.points {
            let _ = writeln!(s, "pt {} {}", p.x, p.y);
        }
    }
    for h in &graph.human_factors {
        let _ = writeln!(
            s,
            "human {} {} {} {} {} {} {} {} {} {}",
            h.mode,
            h.min_points,
            h.pa.p0.x,
            h.pa.p0.y,
            h.pa.p1.x,
            h.pa.p1.y,
            h.pb.p0.x,
            h.pb.p0.y,
            h.pb.p1.x,
            h.pb.p1.y
        );
        for (tag, sel) in [("a", &h.sa), ("b", &h.sb)] {
            let _ = write!(s, "sel {tag}");
            for o in sel {
                let _ = write!(s, " {}:{}", o.pose, o.index);
            }
            s.push('\n');
        }
    }
    s
}

fn parse_observation(line: &Line<'_>, f: Field<'_>) -> Result<ObservationRef, ParseError> {
    let bad = || line.error(f.offset, format!("invalid observation `{}`", f.text));
    let (p, i) = f.text.split_once(':').ok_or_else(bad)?;
    Ok(ObservationRef::new(
        p.parse().map_err(|_| bad())?,
        i.parse().map_err(|_| bad())?,
    ))
}

fn parse_selection(line: &Line<'_>, tag: &str) -> Result<Vec<ObservationRef>, ParseError> {
    if line.keyword() != "sel" || line.get(1, "side")?.text != tag {
        return Err(line.error(line.offset, format!("expected `sel {tag}`")));
    }
    line.fields[2..]
        .iter()
        .map(|f| parse_observation(line, *f))
        .collect()
}

pub fn parse_graph(text: &str) -> Result<FactorGraph, DatasetError> {
    let lines = lines(text);
    check_header(text, &lines, GRAPH_HEADER)?;
    let mut metadata = GraphMetadata::default();
    let mut poses = Vec::new();
    let mut odometry = Vec::new();
    let mut scans = Vec::new();
    let mut human_factors = Vec::new();
    let mut it = lines[1..].iter().peekable();
    while let Some(line) = it.next() {
        match line.keyword() {
            "meta" => {
                metadata.max_range = line.float(1, "max_range")?;
                let seed = line.get(2, "seed")?;
                metadata.seed = if seed.text == "-" {
                    None
                } else {
                    Some(line.parse(2, "seed")?)
                };
                line.expect_len(3)?;
            }
            "pose" => {
                let id: usize = line.parse(1, "pose id")?;
                if id != poses.len() {
                    return Err(line
                        .error(
                            line.fields[1].offset,
                            format!("expected pose id {}", poses.len()),
                        )
                        .into());
                }
                poses.push(Pose2D::new(
                    line.float(2, "x")?,
                    line.float(3, "y")?,
                    line.float(4, "theta")?,
                ));
                line.expect_len(5)?;
            }
            "odom" => {
                let z = Transform2D::new(
                    line.float(5, "dtheta")?,
                    line.float(3, "dx")?,
                    line.float(4, "dy")?,
                );
                let information = if line.fields.len() > 6 {
                    let v: Vec<f64> = (6..12)
                        .map(|k| line.float(k, "information"))
                        .collect::<Result<_, _>>()?;
                    line.expect_len(12)?;
                    Matrix3::new(v[0], v[1], v[2], v[1], v[3], v[4], v[2], v[4], v[5])
                } else {
                    crate::model::default_information()
                };
                odometry.push(RelativePoseFactor::new(
                    line.parse(1, "i")?,
                    line.parse(2, "j")?,
                    z,
                    information,
                ));
            }
            "scan" => {
                let pose_id: usize = line.parse(1, "pose id")?;
                let n: usize = line.parse(2, "point count")?;
                line.expect_len(3)?;
                let mut points = Vec::with_capacity(n);
                for _ in 0..n {
                    let pt = it
                        .next()
                        .ok_or_else(|| eof_error(text, "truncated scan: missing `pt` lines"))?;
                    if pt.keyword() != "pt" {
                        return Err(pt.error(pt.offset, "expected `pt` line").into());
                    }
                    points.push(Vector2::new(pt.float(1, "x")?, pt.float(2, "y")?));
                    pt.expect_len(3)?;
                }
                scans.push(Scan { pose_id, points });
            }
            "human" => {
                let mode = mode_at(line, 1)?;
                let min_points = line.parse(2, "min_points")?;
                let pa = segment_at(line, 3, "segment a")?;
                let pb = segment_at(line, 7, "segment b")?;
                line.expect_len(11)?;
                let la = it
                    .next()
                    .ok_or_else(|| eof_error(text, "missing `sel a`"))?;
                let sa = parse_selection(la, "a")?;
                let lb = it
                    .next()
                    .ok_or_else(|| eof_error(text, "missing `sel b`"))?;
                let sb = parse_selection(lb, "b")?;
                let h = HumanCorrectionFactor::ordered(pa, pb, sa, sb, mode, min_points)
                    .map_err(|e| line.error(line.offset, e.to_string()))?;
                human_factors.push(h);
            }
            other => {
                return Err(line
                    .error(line.offset, format!("unknown record `{other}`"))
                    .into());
            }
        }
    }
    let graph = FactorGraph {
        poses,
        scans,
        odometry,
        human_factors,
        metadata,
    };
    let violations = validate(&graph);
    if !violations.is_empty() {
        let msg: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(DatasetError::Invalid(msg.join("; ")));
    }
    Ok(graph)
}

pub fn write_script(records: &[RawCorrection]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{SCRIPT_HEADER} v{FORMAT_VERSION}");
    for r in records {
        let (a, b) = (&r.pa0, &r.pb0);
        let _ = writeln!(
            s,
            "correction {} {} {} {} {} {} {} {} {}",
            r.mode, a.p0.x, a.p0.y, a.p1.x, a.p1.y, b.p0.x, b.p0.y, b.p1.x, b.p1.y
        );
    }
    s
}

pub fn parse_script(text: &str) -> Result<Vec<RawCorrection>, DatasetError> {
    let lines = lines(text);
    check_header(text, &lines, SCRIPT_HEADER)?;
    let mut out = Vec::new();
    for (record, line) in lines[1..].iter().enumerate() {
        let ctx = |e: ParseError| ParseError {
            message: format!("record {record}: {}", e.message),
            ..e
        };
        if line.keyword() != "correction" {
            return Err(ctx(
                line.error(line.offset, format!("unknown record `{}`", line.keyword()))
            )
            .into());
        }
        let mode = mode_at(line, 1).map_err(ctx)?;
        let pa0 = segment_at(line, 2, "stroke a").map_err(ctx)?;
        let pb0 = segment_at(line, 6, "stroke b").map_err(ctx)?;
        line.expect_len(10).map_err(ctx)?;
        let raw = RawCorrection::new(pa0, pb0, mode)
            .map_err(|e| ctx(line.error(line.offset, e.to_string())))?;
        out.push(raw);
    }
    Ok(out)
}

/// Named features and the measurements taken between them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub features: Vec<Feature>,
    pub measurements: Vec<GroundTruthMeasurement>,
}

impl GroundTruth {
    pub fn feature(&self, name: &str) -> Option<&Feature> {
        self.features.iter().find(|f| f.name == name)
    }
}

pub fn write_truth(truth: &GroundTruth) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{TRUTH_HEADER} v{FORMAT_VERSION}");
    for f in &truth.features {
        let _ = write!(s, "feature {}", f.name);
        for r in &f.ranges {
            let _ = write!(s, " {}:{}..{}", r.pose, r.start, r.end);
        }
        s.push('\n');
    }
    for m in &truth.measurements {
        let kind = match m.kind {
            MeasureKind::Angle => "angle",
            MeasureKind::Distance => "distance",
        };
        let _ = writeln!(s, "measure {kind} {} {} {}", m.a, m.b, m.truth);
    }
    s
}

pub fn parse_truth(text: &str) -> Result<GroundTruth, DatasetError> {
    let lines = lines(text);
    check_header(text, &lines, TRUTH_HEADER)?;
    let mut truth = GroundTruth::default();
    for line in &lines[1..] {
        match line.keyword() {
            "feature" => {
                let name = line.get(1, "name")?.text.to_string();
                let mut ranges = Vec::new();
                for f in &line.fields[2..] {
                    let bad = || line.error(f.offset, format!("invalid range `{}`", f.text));
                    let (pose, span) = f.text.split_once(':').ok_or_else(bad)?;
                    let (start, end) = span.split_once("..").ok_or_else(bad)?;
                    ranges.push(PointRange {
                        pose: pose.parse().map_err(|_| bad())?,
                        start: start.parse().map_err(|_| bad())?,
                        end: end.parse().map_err(|_| bad())?,
                    });
                }
                truth.features.push(Feature { name, ranges });
            }
            "measure" => {
                let k = line.get(1, "kind")?;
                let kind = match k.text {
                    "angle" => MeasureKind::Angle,
                    "distance" => MeasureKind::Distance,
                    other => {
                        return Err(line
                            .error(k.offset, format!("unknown measurement `{other}`"))
                            .into())
                    }
                };
                truth.measurements.push(GroundTruthMeasurement {
                    kind,
                    a: line.get(2, "feature a")?.text.to_string(),
                    b: line.get(3, "feature b")?.text.to_string(),
                    truth: line.float(4, "truth")?,
                });
                line.expect_len(5)?;
            }
            other => {
                return Err(line
                    .error(line.offset, format!("unknown record `{other}`"))
                    .into())
            }
        }
    }
    Ok(truth)
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<FactorGraph, DatasetError> {
    parse_graph(&std::fs::read_to_string(path)?)
}

pub fn save_graph(graph: &FactorGraph, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    Ok(std::fs::write(path, write_graph(graph))?)
}

pub fn load_script(path: impl AsRef<Path>) -> Result<Vec<RawCorrection>, DatasetError> {
    parse_script(&std::fs::read_to_string(path)?)
}

pub fn save_script(records: &[RawCorrection], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    Ok(std::fs::write(path, write_script(records))?)
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<GroundTruth, DatasetError> {
    parse_truth(&std::fs::read_to_string(path)?)
}

pub fn save_truth(truth: &GroundTruth, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    Ok(std::fs::write(path, write_truth(truth))?)
}
