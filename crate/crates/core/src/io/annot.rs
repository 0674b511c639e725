//! Line-based UTF-8 annotation (`HCPA`) and prediction (`HCPP`) files.
//!
//! Shared grammar, one record per concept:
//!
//! ```text
//! HCPA 1
//! frame 42
//! points 6
//! labels 20 20 1 1 20 0
//! instance 0 class 1 action 11 track 1 box 0 0.1 1.25 0.5 0.5 1.5 0
//! indices 2 3
//! end
//! ```
//!
//! Predictions replace the `track` field with `confidence` and omit the
//! instance id. Floats are written with Rust's shortest round-trip
//! formatting, so re-reading reproduces every f64 bit for bit. Point
//! indices are validated against the declared point count on read.

use std::fmt::Write as _;
use std::path::Path;

use super::FormatError;
use crate::types::{Box7, InstanceAnnotation, PointCloud, PredictedInstance, SceneFrame};

pub const ANNOT_MAGIC: &str = "HCPA";
pub const PRED_MAGIC: &str = "HCPP";
pub const TEXT_VERSION: u16 = 1;

/// Ground-truth labels for one frame, minus the point cloud itself.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnnotations {
    pub frame_id: u64,
    pub point_count: usize,
    pub point_labels: Vec<usize>,
    pub instances: Vec<InstanceAnnotation>,
}

impl FrameAnnotations {
    pub fn from_frame(frame: &SceneFrame) -> Self {
        FrameAnnotations {
            frame_id: frame.frame_id,
            point_count: frame.cloud.len(),
            point_labels: frame.point_labels.clone(),
            instances: frame.instances.clone(),
        }
    }

    /// Reattaches a point cloud read from the matching frame file.
    pub fn into_frame(self, cloud: PointCloud) -> SceneFrame {
        SceneFrame {
            frame_id: self.frame_id,
            cloud,
            instances: self.instances,
            point_labels: self.point_labels,
        }
    }
}

/// Model outputs for one frame in the same shape as annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePredictions {
    pub frame_id: u64,
    pub point_count: usize,
    pub point_labels: Vec<usize>,
    pub instances: Vec<PredictedInstance>,
}

fn push_box(line: &mut String, b: &Box7) {
    write!(line, " box {} {} {} {} {} {} {}", b.x, b.y, b.z, b.w, b.l, b.h, b.yaw).unwrap();
}

fn push_labels(out: &mut String, labels: &[usize]) {
    out.push_str("labels");
    for l in labels {
        write!(out, " {l}").unwrap();
    }
    out.push('\n');
}

pub fn annotations_to_string(annotations: &FrameAnnotations) -> String {
    let mut out = String::new();
    writeln!(out, "{ANNOT_MAGIC} {TEXT_VERSION}").unwrap();
    writeln!(out, "frame {}", annotations.frame_id).unwrap();
    writeln!(out, "points {}", annotations.point_count).unwrap();
    push_labels(&mut out, &annotations.point_labels);
    for inst in &annotations.instances {
        let mut line = format!("instance {} class {}", inst.id, inst.class);
        match inst.action {
            Some(a) => write!(line, " action {a}").unwrap(),
            None => line.push_str(" action -"),
        }
        match inst.track_id {
            Some(t) => write!(line, " track {t}").unwrap(),
            None => line.push_str(" track -"),
        }
        push_box(&mut line, &inst.bbox);
        out.push_str(&line);
        out.push('\n');
        out.push_str("indices");
        for i in &inst.point_indices {
            write!(out, " {i}").unwrap();
        }
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

pub fn predictions_to_string(predictions: &FramePredictions) -> String {
    let mut out = String::new();
    writeln!(out, "{PRED_MAGIC} {TEXT_VERSION}").unwrap();
    writeln!(out, "frame {}", predictions.frame_id).unwrap();
    writeln!(out, "points {}", predictions.point_count).unwrap();
    push_labels(&mut out, &predictions.point_labels);
    for inst in &predictions.instances {
        let mut line = format!("instance class {}", inst.class);
        match inst.action {
            Some(a) => write!(line, " action {a}").unwrap(),
            None => line.push_str(" action -"),
        }
        write!(line, " confidence {}", inst.confidence).unwrap();
        push_box(&mut line, &inst.bbox);
        out.push_str(&line);
        out.push('\n');
        out.push_str("indices");
        for i in &inst.point_indices {
            write!(out, " {i}").unwrap();
        }
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

/// Token cursor over one line; every accessor returns a typed error with
/// the line number on any mismatch.
struct LineParser<'a> {
    tokens: std::str::SplitAsciiWhitespace<'a>,
    line: usize,
}

impl<'a> LineParser<'a> {
    fn new(text: &'a str, line: usize) -> Self {
        LineParser { tokens: text.split_ascii_whitespace(), line }
    }

    fn fail(&self, message: impl Into<String>) -> FormatError {
        FormatError::Parse { line: self.line, message: message.into() }
    }

    fn next(&mut self, what: &str) -> Result<&'a str, FormatError> {
        self.tokens.next().ok_or_else(|| self.fail(format!("missing {what}")))
    }

    fn keyword(&mut self, expected: &str) -> Result<(), FormatError> {
        let got = self.next(expected)?;
        if got != expected {
            return Err(self.fail(format!("expected `{expected}`, found `{got}`")));
        }
        Ok(())
    }

    fn u64(&mut self, what: &str) -> Result<u64, FormatError> {
        let token = self.next(what)?;
        token.parse().map_err(|_| self.fail(format!("invalid {what} `{token}`")))
    }

    fn usize(&mut self, what: &str) -> Result<usize, FormatError> {
        let token = self.next(what)?;
        token.parse().map_err(|_| self.fail(format!("invalid {what} `{token}`")))
    }

    fn f64(&mut self, what: &str) -> Result<f64, FormatError> {
        let token = self.next(what)?;
        let v: f64 =
            token.parse().map_err(|_| self.fail(format!("invalid {what} `{token}`")))?;
        if !v.is_finite() {
            return Err(self.fail(format!("non-finite {what}")));
        }
        Ok(v)
    }

    fn optional_u64(&mut self, what: &str) -> Result<Option<u64>, FormatError> {
        let token = self.next(what)?;
        if token == "-" {
            return Ok(None);
        }
        token.parse().map(Some).map_err(|_| self.fail(format!("invalid {what} `{token}`")))
    }

    fn finish(&mut self) -> Result<(), FormatError> {
        match self.tokens.next() {
            Some(extra) => Err(self.fail(format!("unexpected token `{extra}`"))),
            None => Ok(()),
        }
    }

    fn bbox(&mut self) -> Result<Box7, FormatError> {
        self.keyword("box")?;
        let x = self.f64("box x")?;
        let y = self.f64("box y")?;
        let z = self.f64("box z")?;
        let w = self.f64("box w")?;
        let l = self.f64("box l")?;
        let h = self.f64("box h")?;
        let yaw = self.f64("box yaw")?;
        Ok(Box7 { x, y, z, w, l, h, yaw })
    }
}

struct Header {
    frame_id: u64,
    point_count: usize,
    point_labels: Vec<usize>,
}

/// Parses the shared prologue and returns the remaining instance lines.
fn parse_header<'a>(
    text: &'a str,
    magic: &'static str,
) -> Result<(Header, std::iter::Peekable<impl Iterator<Item = (usize, &'a str)>>), FormatError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();

    let (line_no, first) = lines.next().ok_or(FormatError::BadMagic { expected: magic })?;
    let mut p = LineParser::new(first, line_no);
    let got_magic = p.next("magic")?;
    if got_magic != magic {
        return Err(FormatError::BadMagic { expected: magic });
    }
    let version = p.u64("version")?;
    if version != u64::from(TEXT_VERSION) {
        return Err(FormatError::UnsupportedVersion {
            what: "annotation text",
            expected: TEXT_VERSION,
            found: version.min(u64::from(u16::MAX)) as u16,
        });
    }
    p.finish()?;

    let (line_no, frame_line) =
        lines.next().ok_or(FormatError::Truncated { context: "frame line" })?;
    let mut p = LineParser::new(frame_line, line_no);
    p.keyword("frame")?;
    let frame_id = p.u64("frame id")?;
    p.finish()?;

    let (line_no, points_line) =
        lines.next().ok_or(FormatError::Truncated { context: "points line" })?;
    let mut p = LineParser::new(points_line, line_no);
    p.keyword("points")?;
    let point_count = p.usize("point count")?;
    p.finish()?;

    let (line_no, labels_line) =
        lines.next().ok_or(FormatError::Truncated { context: "labels line" })?;
    let mut p = LineParser::new(labels_line, line_no);
    p.keyword("labels")?;
    let mut point_labels = Vec::new();
    while let Some(token) = p.tokens.next() {
        let label: usize =
            token.parse().map_err(|_| p.fail(format!("invalid label `{token}`")))?;
        point_labels.push(label);
        // labels can only be as numerous as the tokens on this line, so the
        // declared count never drives an allocation
        if point_labels.len() > point_count {
            return Err(p.fail("more labels than declared points"));
        }
    }
    if point_labels.len() != point_count {
        return Err(p.fail(format!(
            "expected {point_count} labels, found {}",
            point_labels.len()
        )));
    }

    Ok((Header { frame_id, point_count, point_labels }, lines))
}

fn parse_indices(
    line_no: usize,
    text: &str,
    point_count: usize,
) -> Result<Vec<usize>, FormatError> {
    let mut p = LineParser::new(text, line_no);
    p.keyword("indices")?;
    let mut out = Vec::new();
    while let Some(token) = p.tokens.next() {
        let index: usize =
            token.parse().map_err(|_| p.fail(format!("invalid index `{token}`")))?;
        if index >= point_count {
            return Err(FormatError::IndexOutOfRange { line: line_no, index, count: point_count });
        }
        out.push(index);
    }
    Ok(out)
}

fn expect_end_and_eof<'a>(
    lines: &mut std::iter::Peekable<impl Iterator<Item = (usize, &'a str)>>,
) -> Result<(), FormatError> {
    if lines.next().is_some() {
        return Err(FormatError::TrailingData);
    }
    Ok(())
}

pub fn annotations_from_str(text: &str) -> Result<FrameAnnotations, FormatError> {
    let (header, mut lines) = parse_header(text, ANNOT_MAGIC)?;
    let mut instances = Vec::new();
    loop {
        let (line_no, line) =
            lines.next().ok_or(FormatError::Truncated { context: "end terminator" })?;
        if line.trim() == "end" {
            break;
        }
        let mut p = LineParser::new(line, line_no);
        p.keyword("instance")?;
        let id = p.u64("instance id")?;
        let id = u32::try_from(id).map_err(|_| p.fail("instance id exceeds u32"))?;
        p.keyword("class")?;
        let class = p.usize("class")?;
        p.keyword("action")?;
        let action = p.optional_u64("action")?.map(|a| a as usize);
        p.keyword("track")?;
        let track_id = p.optional_u64("track id")?;
        let track_id = match track_id {
            Some(t) => Some(u32::try_from(t).map_err(|_| p.fail("track id exceeds u32"))?),
            None => None,
        };
        let bbox = p.bbox()?;
        p.finish()?;

        let (idx_line_no, idx_line) =
            lines.next().ok_or(FormatError::Truncated { context: "indices line" })?;
        let point_indices = parse_indices(idx_line_no, idx_line, header.point_count)?;
        instances.push(InstanceAnnotation { id, class, point_indices, bbox, action, track_id });
    }
    expect_end_and_eof(&mut lines)?;
    Ok(FrameAnnotations {
        frame_id: header.frame_id,
        point_count: header.point_count,
        point_labels: header.point_labels,
        instances,
    })
}

pub fn predictions_from_str(text: &str) -> Result<FramePredictions, FormatError> {
    let (header, mut lines) = parse_header(text, PRED_MAGIC)?;
    let mut instances = Vec::new();
    loop {
        let (line_no, line) =
            lines.next().ok_or(FormatError::Truncated { context: "end terminator" })?;
        if line.trim() == "end" {
            break;
        }
        let mut p = LineParser::new(line, line_no);
        p.keyword("instance")?;
        p.keyword("class")?;
        let class = p.usize("class")?;
        p.keyword("action")?;
        let action = p.optional_u64("action")?.map(|a| a as usize);
        p.keyword("confidence")?;
        let confidence = p.f64("confidence")?;
        let bbox = p.bbox()?;
        p.finish()?;

        let (idx_line_no, idx_line) =
            lines.next().ok_or(FormatError::Truncated { context: "indices line" })?;
        let point_indices = parse_indices(idx_line_no, idx_line, header.point_count)?;
        instances.push(PredictedInstance { class, point_indices, bbox, action, confidence });
    }
    expect_end_and_eof(&mut lines)?;
    Ok(FramePredictions {
        frame_id: header.frame_id,
        point_count: header.point_count,
        point_labels: header.point_labels,
        instances,
    })
}

fn read_text(path: &Path) -> Result<String, FormatError> {
    let bytes = std::fs::read(path)?;
    String::from_utf8(bytes).map_err(|_| FormatError::InvalidUtf8)
}

pub fn write_annotations(path: &Path, annotations: &FrameAnnotations) -> Result<(), FormatError> {
    Ok(std::fs::write(path, annotations_to_string(annotations))?)
}

pub fn read_annotations(path: &Path) -> Result<FrameAnnotations, FormatError> {
    annotations_from_str(&read_text(path)?)
}

pub fn write_predictions(path: &Path, predictions: &FramePredictions) -> Result<(), FormatError> {
    Ok(std::fs::write(path, predictions_to_string(predictions))?)
}

pub fn read_predictions(path: &Path) -> Result<FramePredictions, FormatError> {
    predictions_from_str(&read_text(path)?)
}
