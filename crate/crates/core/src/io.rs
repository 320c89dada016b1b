//! Line-delimited sequence files.
//!
//! Every file starts with a header line naming the format, version, tool and
//! the effective configuration. Each following line is one JSON object with
//! a `type` of `frame`, `gt`, `det` or `track`. A `frame` line opens a frame;
//! box lines belong to the most recent frame and repeat its index and
//! timestamp. Units are meters, seconds and radians; yaw is wrapped to
//! `[-pi, pi)` when written.
//!
//! ```text
//! {"format":"grutrack-sequence","version":1,"tool":"grutrack 0.1.0","content":"scenario",...}
//! {"type":"frame","frame":0,"timestamp":0.0}
//! {"type":"gt","frame":0,"timestamp":0.0,"class":0,"x":1.0,...,"id":3,"annotated":true}
//! {"type":"det","frame":0,"timestamp":0.0,"class":0,"x":1.1,...,"score":0.87}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box3D};
use crate::scene::{AnnotationBox, DetectionBox, Frame, Scenario, TrackBox, TrackFrame};

pub const SEQUENCE_FORMAT: &str = "grutrack-sequence";
pub const SEQUENCE_VERSION: u32 = 1;

pub fn tool_version() -> String {
    format!("grutrack {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Content {
    Scenario,
    Tracks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub tool: String,
    pub content: Content,
    pub seed: Option<u64>,
    /// Generator settings for scenarios.
    #[serde(default)]
    pub meta: Value,
    /// Effective run configuration.
    #[serde(default)]
    pub config: Value,
}

impl Header {
    pub fn new(content: Content, seed: Option<u64>, meta: Value, config: Value) -> Self {
        Header {
            format: SEQUENCE_FORMAT.to_string(),
            version: SEQUENCE_VERSION,
            tool: tool_version(),
            content,
            seed,
            meta,
            config,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameLine {
    #[serde(rename = "type")]
    kind: String,
    frame: usize,
    timestamp: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxLine {
    #[serde(rename = "type")]
    kind: String,
    frame: usize,
    timestamp: f64,
    class: u32,
    x: f64,
    y: f64,
    z: f64,
    w: f64,
    l: f64,
    h: f64,
    yaw: f64,
    vx: f64,
    vy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    annotated: Option<bool>,
}

impl BoxLine {
    fn new(kind: &str, frame: usize, timestamp: f64, class: u32, b: &Box3D, v: [f64; 2]) -> Self {
        BoxLine {
            kind: kind.to_string(),
            frame,
            timestamp,
            class,
            x: b.center[0],
            y: b.center[1],
            z: b.center[2],
            w: b.size[0],
            l: b.size[1],
            h: b.size[2],
            yaw: wrap_angle(b.yaw),
            vx: v[0],
            vy: v[1],
            score: None,
            id: None,
            annotated: None,
        }
    }
}

fn push_line<T: Serialize>(out: &mut String, value: &T) {
    out.push_str(&serde_json::to_string(value).expect("records serialize"));
    out.push('\n');
}

pub fn scenario_to_string(scenario: &Scenario, config: &Value) -> String {
    let header = Header::new(Content::Scenario, Some(scenario.seed), scenario.meta.clone(), config.clone());
    let mut out = String::new();
    push_line(&mut out, &header);
    for f in &scenario.frames {
        push_line(&mut out, &FrameLine { kind: "frame".into(), frame: f.index, timestamp: f.timestamp });
        for g in &f.ground_truth {
            let mut line = BoxLine::new("gt", f.index, f.timestamp, g.class_id, &g.bbox, g.velocity);
            line.id = Some(g.instance_id);
            line.annotated = Some(g.annotated);
            push_line(&mut out, &line);
        }
        for d in &f.detections {
            let mut line = BoxLine::new("det", f.index, f.timestamp, d.class_id, &d.bbox, d.velocity);
            line.score = Some(d.score);
            push_line(&mut out, &line);
        }
    }
    out
}

pub fn tracks_to_string(frames: &[TrackFrame], config: &Value) -> String {
    let header = Header::new(Content::Tracks, None, Value::Null, config.clone());
    let mut out = String::new();
    push_line(&mut out, &header);
    for f in frames {
        push_line(&mut out, &FrameLine { kind: "frame".into(), frame: f.index, timestamp: f.timestamp });
        for t in &f.tracks {
            let mut line = BoxLine::new("track", f.index, f.timestamp, t.class_id, &t.bbox, t.velocity);
            line.score = Some(t.score);
            line.id = Some(t.track_id);
            push_line(&mut out, &line);
        }
    }
    out
}

enum Parsed {
    Frame(FrameLine),
    Box(BoxLine),
}

struct LineContext<'a> {
    source: &'a str,
    line: usize,
}

impl LineContext<'_> {
    fn err(&self, field: &str, reason: impl Into<String>) -> Error {
        Error::Schema {
            path: self.source.to_string(),
            line: self.line,
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    fn from_serde(&self, e: serde_json::Error) -> Error {
        // serde names the offending field in backticks
        let msg = e.to_string();
        let field = msg.split('`').nth(1).unwrap_or("record").to_string();
        self.err(&field, msg)
    }
}

fn parse_record(ctx: &LineContext, text: &str) -> Result<Parsed> {
    let value: Value = serde_json::from_str(text).map_err(|e| ctx.err("record", e.to_string()))?;
    let kind = value
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| ctx.err("type", "missing or not a string"))?
        .to_string();
    match kind.as_str() {
        "frame" => Ok(Parsed::Frame(serde_json::from_value(value).map_err(|e| ctx.from_serde(e))?)),
        "gt" | "det" | "track" => {
            let line: BoxLine = serde_json::from_value(value).map_err(|e| ctx.from_serde(e))?;
            for (name, v) in [("w", line.w), ("l", line.l), ("h", line.h)] {
                if v <= 0.0 {
                    return Err(ctx.err(name, format!("size must be positive, got {v}")));
                }
            }
            let needs = |present: bool, field: &str, want: bool| -> Result<()> {
                match (present, want) {
                    (false, true) => Err(ctx.err(field, format!("required on `{kind}` records"))),
                    (true, false) => Err(ctx.err(field, format!("not allowed on `{kind}` records"))),
                    _ => Ok(()),
                }
            };
            needs(line.score.is_some(), "score", kind != "gt")?;
            needs(line.id.is_some(), "id", kind != "det")?;
            needs(line.annotated.is_some(), "annotated", kind == "gt")?;
            if let Some(s) = line.score {
                if !(0.0..=1.0).contains(&s) {
                    return Err(ctx.err("score", format!("must lie in [0, 1], got {s}")));
                }
            }
            Ok(Parsed::Box(line))
        }
        other => Err(ctx.err("type", format!("unknown record type `{other}`"))),
    }
}

struct RawSequence {
    header: Header,
    frames: Vec<(FrameLine, Vec<BoxLine>)>,
}

fn parse_sequence(source: &str, reader: impl BufRead, expected: Content) -> Result<RawSequence> {
    let mut lines = reader.lines().enumerate();
    let io_err = |e| Error::io(source, e);
    let Some((_, first)) = lines.next() else {
        return Err(LineContext { source, line: 1 }.err("header", "empty file"));
    };
    let ctx = LineContext { source, line: 1 };
    let header: Header = serde_json::from_str(&first.map_err(io_err)?).map_err(|e| ctx.from_serde(e))?;
    if header.format != SEQUENCE_FORMAT {
        return Err(ctx.err("format", format!("expected `{SEQUENCE_FORMAT}`, got `{}`", header.format)));
    }
    if header.version != SEQUENCE_VERSION {
        return Err(ctx.err("version", format!("unsupported version {}", header.version)));
    }
    if header.content != expected {
        return Err(ctx.err("content", format!("expected {expected:?} file, got {:?}", header.content)));
    }

    let mut frames: Vec<(FrameLine, Vec<BoxLine>)> = vec![];
    for (i, text) in lines {
        let text = text.map_err(io_err)?;
        let ctx = LineContext { source, line: i + 1 };
        if text.trim().is_empty() {
            continue;
        }
        match parse_record(&ctx, &text)? {
            Parsed::Frame(f) => {
                if let Some((prev, _)) = frames.last() {
                    if f.frame <= prev.frame {
                        return Err(ctx.err("frame", format!("frame {} does not follow frame {}", f.frame, prev.frame)));
                    }
                    if f.timestamp < prev.timestamp {
                        return Err(ctx.err("timestamp", "timestamps must not decrease"));
                    }
                }
                frames.push((f, vec![]));
            }
            Parsed::Box(b) => {
                let Some((f, boxes)) = frames.last_mut() else {
                    return Err(ctx.err("frame", "box record before any frame record"));
                };
                if b.frame != f.frame {
                    return Err(ctx.err("frame", format!("record says frame {}, open frame is {}", b.frame, f.frame)));
                }
                if b.timestamp != f.timestamp {
                    return Err(ctx.err("timestamp", "differs from the frame record"));
                }
                let allowed = match expected {
                    Content::Scenario => b.kind != "track",
                    Content::Tracks => b.kind == "track",
                };
                if !allowed {
                    return Err(ctx.err("type", format!("`{}` records are not allowed in {expected:?} files", b.kind)));
                }
                boxes.push(b);
            }
        }
    }
    Ok(RawSequence { header, frames })
}

fn to_box(b: &BoxLine) -> Result<Box3D> {
    Box3D::from_parts(b.x, b.y, b.z, b.w, b.l, b.h, b.yaw)
}

pub fn read_scenario_from(source: &str, reader: impl BufRead) -> Result<(Header, Scenario)> {
    let raw = parse_sequence(source, reader, Content::Scenario)?;
    let mut frames = vec![];
    for (f, boxes) in &raw.frames {
        let mut frame = Frame {
            index: f.frame,
            timestamp: f.timestamp,
            ..Default::default()
        };
        for b in boxes {
            if b.kind == "gt" {
                frame.ground_truth.push(AnnotationBox {
                    bbox: to_box(b)?,
                    velocity: [b.vx, b.vy],
                    instance_id: b.id.unwrap_or_default(),
                    class_id: b.class,
                    frame_index: f.frame,
                    annotated: b.annotated.unwrap_or(true),
                });
            } else {
                frame.detections.push(DetectionBox {
                    bbox: to_box(b)?,
                    velocity: [b.vx, b.vy],
                    score: b.score.unwrap_or_default(),
                    class_id: b.class,
                    frame_index: f.frame,
                    timestamp: f.timestamp,
                });
            }
        }
        frames.push(frame);
    }
    let scenario = Scenario {
        frames,
        seed: raw.header.seed.unwrap_or_default(),
        meta: raw.header.meta.clone(),
    };
    Ok((raw.header, scenario))
}

pub fn read_tracks_from(source: &str, reader: impl BufRead) -> Result<(Header, Vec<TrackFrame>)> {
    let raw = parse_sequence(source, reader, Content::Tracks)?;
    let mut frames = vec![];
    for (f, boxes) in &raw.frames {
        let mut tracks = vec![];
        for b in boxes {
            tracks.push(TrackBox {
                bbox: to_box(b)?,
                velocity: [b.vx, b.vy],
                score: b.score.unwrap_or_default(),
                class_id: b.class,
                track_id: b.id.unwrap_or_default(),
                frame_index: f.frame,
                timestamp: f.timestamp,
            });
        }
        frames.push(TrackFrame {
            index: f.frame,
            timestamp: f.timestamp,
            tracks,
        });
    }
    Ok((raw.header, frames))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn read_scenario(path: &Path) -> Result<(Header, Scenario)> {
    read_scenario_from(&path.display().to_string(), open(path)?)
}

pub fn read_tracks(path: &Path) -> Result<(Header, Vec<TrackFrame>)> {
    read_tracks_from(&path.display().to_string(), open(path)?)
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_scenario(path: &Path, scenario: &Scenario, config: &Value) -> Result<()> {
    write_text(path, &scenario_to_string(scenario, config))
}

pub fn write_tracks(path: &Path, frames: &[TrackFrame], config: &Value) -> Result<()> {
    write_text(path, &tracks_to_string(frames, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_scenario, SimConfig};
    use serde_json::json;

    fn read_s(text: &str) -> Result<(Header, Scenario)> {
        read_scenario_from("mem", text.as_bytes())
    }

    #[test]
    fn empty_scenario_is_header_only() {
        let text = scenario_to_string(&Scenario::default(), &json!({}));
        assert_eq!(text.lines().count(), 1);
        let (h, s) = read_s(&text).unwrap();
        assert_eq!(h.content, Content::Scenario);
        assert!(s.frames.is_empty());
    }

    #[test]
    fn scenario_round_trip() {
        let s = generate_scenario(&SimConfig { frames: 8, ..Default::default() }, 4).unwrap();
        let text = scenario_to_string(&s, &json!({"seed": 4}));
        let (h, back) = read_s(&text).unwrap();
        assert_eq!(h.config, json!({"seed": 4}));
        assert_eq!(back, s);
        assert_eq!(scenario_to_string(&back, &h.config), text);
    }

    #[test]
    fn tracks_round_trip_wraps_yaw() {
        let b = Box3D::from_parts(1.0, 2.0, 0.5, 2.0, 4.0, 1.5, 3.5).unwrap();
        let frames = vec![
            TrackFrame {
                index: 0,
                timestamp: 0.0,
                tracks: vec![TrackBox {
                    bbox: b,
                    velocity: [1.0, -0.5],
                    score: 0.7,
                    class_id: 1,
                    track_id: 9,
                    frame_index: 0,
                    timestamp: 0.0,
                }],
            },
            TrackFrame {
                index: 1,
                timestamp: 0.5,
                tracks: vec![],
            },
        ];
        let text = tracks_to_string(&frames, &Value::Null);
        let (_, back) = read_tracks_from("mem", text.as_bytes()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].tracks[0].bbox.yaw, wrap_angle(3.5));
        assert_eq!(back[0].tracks[0].track_id, 9);
        assert_eq!(tracks_to_string(&back, &Value::Null), text);
    }

    fn header_line() -> String {
        serde_json::to_string(&Header::new(Content::Scenario, Some(0), Value::Null, Value::Null)).unwrap()
    }

    fn det_line(w: f64) -> String {
        format!(
            r#"{{"type":"det","frame":0,"timestamp":0.0,"class":0,"x":0,"y":0,"z":0,"w":{w},"l":4,"h":1.5,"yaw":0,"vx":0,"vy":0,"score":0.5}}"#
        )
    }

    fn schema_error(text: &str) -> (usize, String) {
        match read_s(text) {
            Err(Error::Schema { line, field, .. }) => (line, field),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn negative_size_names_the_line() {
        let frame = r#"{"type":"frame","frame":0,"timestamp":0.0}"#;
        let text = format!("{}\n{frame}\n{}\n{}\n", header_line(), det_line(2.0), det_line(-1.0));
        assert_eq!(schema_error(&text), (4, "w".to_string()));
    }

    #[test]
    fn schema_violations() {
        let frame = r#"{"type":"frame","frame":0,"timestamp":0.0}"#;
        let h = header_line();
        // missing field
        let text = format!("{h}\n{frame}\n{}\n", det_line(2.0).replace(r#""x":0,"#, ""));
        assert_eq!(schema_error(&text), (3, "x".to_string()));
        // unknown field
        let text = format!("{h}\n{frame}\n{}\n", det_line(2.0).replace(r#""vy":0"#, r#""vy":0,"speed":1"#));
        assert_eq!(schema_error(&text), (3, "speed".to_string()));
        // detections carry no id
        let text = format!("{h}\n{frame}\n{}\n", det_line(2.0).replace(r#""score":0.5"#, r#""score":0.5,"id":1"#));
        assert_eq!(schema_error(&text), (3, "id".to_string()));
        // box before any frame
        let text = format!("{h}\n{}\n", det_line(2.0));
        assert_eq!(schema_error(&text), (2, "frame".to_string()));
        // frames must increase
        let text = format!("{h}\n{frame}\n{frame}\n");
        assert_eq!(schema_error(&text), (3, "frame".to_string()));
        // wrong content kind
        let tracks = tracks_to_string(&[], &Value::Null);
        assert_eq!(schema_error(&tracks), (1, "content".to_string()));
        // not json
        assert_eq!(schema_error(&format!("{h}\nnot json\n")), (2, "record".to_string()));
    }
}
