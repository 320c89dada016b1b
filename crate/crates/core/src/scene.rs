//! Boxes and sequences exchanged between the simulator, the tracker, the
//! trainer and the metrics.

use crate::geometry::Box3D;

/// A detector output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionBox {
    pub bbox: Box3D,
    /// Ground-plane velocity, m/s.
    pub velocity: [f64; 2],
    pub score: f64,
    pub class_id: u32,
    pub frame_index: usize,
    pub timestamp: f64,
}

/// A ground-truth box. `annotated` is false when the label is withheld from
/// training.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationBox {
    pub bbox: Box3D,
    pub velocity: [f64; 2],
    pub instance_id: u64,
    pub class_id: u32,
    pub frame_index: usize,
    pub annotated: bool,
}

/// A tracker output box. `score` is the track confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackBox {
    pub bbox: Box3D,
    pub velocity: [f64; 2],
    pub score: f64,
    pub class_id: u32,
    pub track_id: u64,
    pub frame_index: usize,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub ground_truth: Vec<AnnotationBox>,
    pub detections: Vec<DetectionBox>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scenario {
    pub frames: Vec<Frame>,
    pub seed: u64,
    /// Generator settings, echoed into file headers.
    pub meta: serde_json::Value,
}

impl Scenario {
    /// Fraction of ground-truth boxes visible to training.
    pub fn annotation_coverage(&self) -> f64 {
        let (mut seen, mut total) = (0usize, 0usize);
        for gt in self.frames.iter().flat_map(|f| &f.ground_truth) {
            total += 1;
            seen += gt.annotated as usize;
        }
        if total == 0 {
            1.0
        } else {
            seen as f64 / total as f64
        }
    }
}

/// Per-frame tracker output.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackFrame {
    pub index: usize,
    pub timestamp: f64,
    pub tracks: Vec<TrackBox>,
}
