//! Frame-by-frame tracking: preprocessing, prediction, two-stage association,
//! update and the confidence lifecycle.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::assign::{two_stage, AssociationResult, Solver};
use crate::error::{Error, Result};
use crate::filter::{ekf_predict, ekf_update, FilterState, PriorState};
use crate::geometry::{giou3d, giou_bev, nms, Box3D};
use crate::gkf::{gkf_step_on_tape, hidden_from_tape, hidden_to_tape, GainNetwork, StepOptions, TrackHidden};
use crate::motion::{box_to_obs, ModelKind, MotionModel, StateSpace};
use crate::neural::{NodeId, Tape};
use crate::scene::{DetectionBox, Frame, TrackBox, TrackFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MotionMode {
    #[default]
    Ekf,
    Gru,
}

impl std::fmt::Display for MotionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MotionMode::Ekf => "ekf",
            MotionMode::Gru => "gru",
        })
    }
}

/// Overrides of the EKF noise. Explicit diagonals replace the model defaults;
/// the scales multiply whichever diagonal is in effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub process: Option<Vec<f64>>,
    pub measurement: Option<Vec<f64>>,
    pub initial: Option<Vec<f64>>,
    pub process_scale: f64,
    pub measurement_scale: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            process: None,
            measurement: None,
            initial: None,
            process_scale: 1.0,
            measurement_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Minimum 3D GIoU for a first-stage match.
    pub stage1_threshold: f64,
    /// Minimum BEV GIoU for a second-stage match.
    pub stage2_threshold: f64,
    pub birth_threshold: f64,
    /// Per-frame confidence decay rate of unmatched tracks.
    pub decay: f64,
    pub delete_threshold: f64,
    pub max_coast: u32,
    pub hit_min: u32,
    pub flip_heading: bool,
    pub solver: Solver,
    pub model: ModelKind,
    pub noise: NoiseConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            score_threshold: 0.2,
            nms_threshold: 0.08,
            stage1_threshold: 0.3,
            stage2_threshold: 0.0,
            birth_threshold: 0.3,
            decay: 0.25,
            delete_threshold: 0.05,
            max_coast: 5,
            hit_min: 2,
            flip_heading: true,
            solver: Solver::Hungarian,
            model: ModelKind::Ctra,
            noise: NoiseConfig::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("tracker.{name}"), "must lie in [0, 1]"))
            }
        };
        unit("score_threshold", self.score_threshold)?;
        unit("birth_threshold", self.birth_threshold)?;
        unit("delete_threshold", self.delete_threshold)?;
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return Err(Error::config("tracker.nms_threshold", "must lie in (0, 1]"));
        }
        for (name, v) in [("stage1_threshold", self.stage1_threshold), ("stage2_threshold", self.stage2_threshold)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::config(format!("tracker.{name}"), "must lie in [-1, 1]"));
            }
        }
        if self.stage2_threshold > self.stage1_threshold {
            return Err(Error::config("tracker.stage2_threshold", "must not exceed stage1_threshold"));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::config("tracker.decay", "must be a finite non-negative rate"));
        }
        if self.hit_min == 0 {
            return Err(Error::config("tracker.hit_min", "must be at least 1"));
        }
        let model = MotionModel::new(self.model);
        let n = &self.noise;
        for (name, diag, len) in [
            ("process", &n.process, model.dim()),
            ("measurement", &n.measurement, model.obs_dim()),
            ("initial", &n.initial, model.dim()),
        ] {
            if let Some(d) = diag {
                if d.len() != len || d.iter().any(|v| v.is_nan() || *v <= 0.0) {
                    return Err(Error::config(
                        format!("tracker.noise.{name}"),
                        format!("needs {len} positive entries"),
                    ));
                }
            }
        }
        for (name, s) in [("process_scale", n.process_scale), ("measurement_scale", n.measurement_scale)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config(format!("tracker.noise.{name}"), "must be positive"));
            }
        }
        Ok(())
    }

    fn initial_filter(&self, model: &MotionModel, x: DVector<f64>) -> FilterState {
        let n = &self.noise;
        let pick = |o: &Option<Vec<f64>>, d: DVector<f64>| o.as_ref().map(|v| DVector::from_vec(v.clone())).unwrap_or(d);
        let p = pick(&n.initial, model.default_initial_covariance());
        let q = pick(&n.process, model.default_process_noise()) * n.process_scale;
        let r = pick(&n.measurement, model.default_measurement_noise()) * n.measurement_scale;
        FilterState::diagonal(x, &p, &q, &r)
    }
}

/// Drops low-score detections, then suppresses duplicates within each class.
/// Survivors keep their input order.
pub fn preprocess(raw: &[DetectionBox], score_threshold: f64, nms_threshold: f64) -> Vec<DetectionBox> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, d) in raw.iter().enumerate() {
        if d.score >= score_threshold {
            by_class.entry(d.class_id).or_default().push(i);
        }
    }
    let mut keep = vec![];
    for idx in by_class.values() {
        let boxes: Vec<(Box3D, f64)> = idx.iter().map(|&i| (raw[i].bbox.clone(), raw[i].score)).collect();
        keep.extend(nms(&boxes, nms_threshold).into_iter().map(|k| idx[k]));
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| raw[i].clone()).collect()
}

/// Two-stage class-gated association of predicted track boxes with
/// detections.
pub fn associate(
    tracks: &[(Box3D, u32)],
    detections: &[DetectionBox],
    config: &TrackerConfig,
) -> AssociationResult {
    let sim = |f: fn(&Box3D, &Box3D) -> f64| -> Vec<Vec<f64>> {
        tracks
            .iter()
            .map(|(b, c)| {
                detections
                    .iter()
                    .map(|d| if d.class_id == *c { f(b, &d.bbox) } else { f64::NEG_INFINITY })
                    .collect()
            })
            .collect()
    };
    let (s1, s2) = (sim(giou3d), sim(giou_bev));
    two_stage(
        &s1,
        &s2,
        detections.len(),
        (config.stage1_threshold, config.stage2_threshold),
        config.solver,
    )
    .0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Tentative,
    Active,
    Dead,
}

#[derive(Debug, Clone)]
pub enum MotionState {
    Ekf(FilterState),
    /// Posterior and recurrent memory as nodes of the tracker's tape.
    Gru {
        posterior: NodeId,
        hidden: TrackHidden<NodeId>,
    },
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub id: u64,
    pub class_id: u32,
    pub motion: MotionState,
    pub confidence: f64,
    pub age: u32,
    pub hits: u32,
    pub time_since_update: u32,
    pub status: TrackStatus,
    /// Whether the last frame brought a matched detection.
    pub updated: bool,
    pub history: Vec<TrackBox>,
}

/// Confidence and status bookkeeping for one track in one frame.
/// `matched_score` is the score of the associated detection, if any.
pub fn lifecycle_update(track: &mut Trajectory, matched_score: Option<f64>, config: &TrackerConfig) {
    let decayed = track.confidence * (-config.decay).exp();
    track.age += 1;
    match matched_score {
        Some(score) => {
            track.confidence = score.max(decayed);
            track.time_since_update = 0;
            track.hits += 1;
            track.updated = true;
            if track.status == TrackStatus::Tentative && track.hits >= config.hit_min {
                track.status = TrackStatus::Active;
            }
        }
        None => {
            track.confidence = decayed;
            track.time_since_update += 1;
            track.updated = false;
            if track.status == TrackStatus::Tentative
                || track.confidence < config.delete_threshold
                || track.time_since_update > config.max_coast
            {
                track.status = TrackStatus::Dead;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackHistory {
    pub id: u64,
    pub class_id: u32,
    pub boxes: Vec<TrackBox>,
}

impl TrackHistory {
    fn of(t: &Trajectory) -> Self {
        TrackHistory {
            id: t.id,
            class_id: t.class_id,
            boxes: t.history.clone(),
        }
    }
}

pub struct Tracker<'n> {
    pub config: TrackerConfig,
    pub model: MotionModel,
    net: Option<&'n GainNetwork>,
    tape: Tape,
    keep_graph: bool,
    tracks: Vec<Trajectory>,
    finished: Vec<TrackHistory>,
    next_id: u64,
    last_timestamp: Option<f64>,
}

enum Predicted {
    Ekf(PriorState),
    Gru(DVector<f64>),
}

impl<'n> Tracker<'n> {
    pub fn new_ekf(config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Tracker {
            model: MotionModel::new(config.model),
            config,
            net: None,
            tape: Tape::new(),
            keep_graph: false,
            tracks: vec![],
            finished: vec![],
            next_id: 1,
            last_timestamp: None,
        })
    }

    /// Tracker with the learned gain. With `keep_graph` every step stays on
    /// the tape for backpropagation.
    pub fn new_gru(config: TrackerConfig, net: &'n GainNetwork, keep_graph: bool) -> Result<Self> {
        let mut t = Self::new_ekf(config)?;
        if net.arch.state_dim != t.model.dim() || net.arch.obs_dim != t.model.obs_dim() {
            return Err(Error::Checkpoint(format!(
                "network expects state/obs dims {}/{}, motion model `{}` has {}/{}",
                net.arch.state_dim,
                net.arch.obs_dim,
                t.config.model,
                t.model.dim(),
                t.model.obs_dim()
            )));
        }
        t.net = Some(net);
        t.keep_graph = keep_graph;
        Ok(t)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Hands over the recorded graph, ending the sequence.
    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn tracks(&self) -> &[Trajectory] {
        &self.tracks
    }

    /// Output histories of every trajectory seen so far, ordered by id.
    pub fn histories(&self) -> Vec<TrackHistory> {
        let mut all: Vec<TrackHistory> = self.finished.clone();
        all.extend(self.tracks.iter().map(TrackHistory::of));
        all.sort_by_key(|t| t.id);
        all
    }

    /// Current posterior mean of a track.
    pub fn posterior(&self, track: &Trajectory) -> DVector<f64> {
        match &track.motion {
            MotionState::Ekf(fs) => fs.mean.clone(),
            MotionState::Gru { posterior, .. } => self.tape.value(*posterior).clone(),
        }
    }

    fn output_box(&self, track: &Trajectory, frame_index: usize, timestamp: f64) -> TrackBox {
        let x = self.posterior(track);
        TrackBox {
            bbox: self.model.state_to_box(&x),
            velocity: self.model.velocity(&x),
            score: track.confidence,
            class_id: track.class_id,
            track_id: track.id,
            frame_index,
            timestamp,
        }
    }

    /// Processes one frame and returns the boxes of active tracks.
    pub fn step(&mut self, frame_index: usize, timestamp: f64, raw: &[DetectionBox]) -> Result<Vec<TrackBox>> {
        let dt = match self.last_timestamp {
            Some(prev) if timestamp < prev => {
                return Err(Error::Schema {
                    path: "sequence".into(),
                    line: frame_index,
                    field: "timestamp".into(),
                    reason: format!("{timestamp} precedes previous frame at {prev}"),
                })
            }
            Some(prev) => timestamp - prev,
            None => 0.0,
        };
        self.last_timestamp = Some(timestamp);
        let cfg = self.config.clone();
        let dets = preprocess(raw, cfg.score_threshold, cfg.nms_threshold);

        let predicted: Vec<Predicted> = self
            .tracks
            .iter()
            .map(|t| match &t.motion {
                MotionState::Ekf(fs) => Predicted::Ekf(ekf_predict(fs, &self.model, dt)),
                MotionState::Gru { posterior, .. } => {
                    Predicted::Gru(self.model.predict(self.tape.value(*posterior), dt))
                }
            })
            .collect();
        let boxes: Vec<(Box3D, u32)> = predicted
            .iter()
            .zip(&self.tracks)
            .map(|(p, t)| {
                let mean = match p {
                    Predicted::Ekf(prior) => &prior.mean,
                    Predicted::Gru(x) => x,
                };
                (self.model.state_to_box(mean), t.class_id)
            })
            .collect();
        let assoc = associate(&boxes, &dets, &cfg);
        let mut det_for_track: Vec<Option<usize>> = vec![None; self.tracks.len()];
        for &(i, j) in &assoc.matches {
            det_for_track[i] = Some(j);
        }

        let opts = StepOptions {
            flip_heading: cfg.flip_heading,
        };
        let mut tracks = std::mem::take(&mut self.tracks);
        for ((track, pred), det) in tracks.iter_mut().zip(predicted).zip(&det_for_track) {
            let y = det.map(|j| box_to_obs(&dets[j].bbox));
            track.motion = match (pred, &track.motion) {
                (Predicted::Ekf(prior), _) => MotionState::Ekf(match &y {
                    Some(y) => ekf_update(&prior, y, &self.model, cfg.flip_heading),
                    None => prior.into_posterior(),
                }),
                (Predicted::Gru(_), MotionState::Gru { posterior, hidden }) => {
                    let net = self.net.expect("learned-gain tracks need a network");
                    let (posterior, hidden) =
                        gkf_step_on_tape(net, &mut self.tape, *posterior, hidden, y.as_ref(), &self.model, dt, opts)?;
                    MotionState::Gru { posterior, hidden }
                }
                (Predicted::Gru(_), MotionState::Ekf(_)) => unreachable!("prediction follows the motion state"),
            };
            lifecycle_update(track, det.map(|j| dets[j].score), &cfg);
        }

        for &j in &assoc.unmatched_detections {
            let d = &dets[j];
            if d.score < cfg.birth_threshold {
                continue;
            }
            let x = self.model.state_from_box(&d.bbox, d.velocity);
            let motion = match self.net {
                Some(net) => MotionState::Gru {
                    posterior: self.tape.leaf(x),
                    hidden: hidden_to_tape(&mut self.tape, &net.initial_hidden()),
                },
                None => MotionState::Ekf(cfg.initial_filter(&self.model, x)),
            };
            let status = if cfg.hit_min <= 1 {
                TrackStatus::Active
            } else {
                TrackStatus::Tentative
            };
            tracks.push(Trajectory {
                id: self.next_id,
                class_id: d.class_id,
                motion,
                confidence: d.score,
                age: 0,
                hits: 1,
                time_since_update: 0,
                status,
                updated: true,
                history: vec![],
            });
            self.next_id += 1;
        }

        let (alive, dead): (Vec<_>, Vec<_>) = tracks.into_iter().partition(|t| t.status != TrackStatus::Dead);
        self.tracks = alive;
        self.finished.extend(dead.iter().map(TrackHistory::of));

        let mut out = vec![];
        for k in 0..self.tracks.len() {
            if self.tracks[k].status == TrackStatus::Active {
                let b = self.output_box(&self.tracks[k], frame_index, timestamp);
                self.tracks[k].history.push(b.clone());
                out.push(b);
            }
        }
        if !self.keep_graph {
            self.compact();
        }
        Ok(out)
    }

    /// Moves live recurrent state onto a fresh tape, dropping the history.
    fn compact(&mut self) {
        if self.net.is_none() {
            return;
        }
        let old = std::mem::take(&mut self.tape);
        for t in &mut self.tracks {
            if let MotionState::Gru { posterior, hidden } = &mut t.motion {
                *posterior = self.tape.leaf(old.value(*posterior).clone());
                *hidden = hidden_to_tape(&mut self.tape, &hidden_from_tape(&old, hidden));
            }
        }
    }
}

/// Runs the tracker over a sequence. The learned-gain mode needs a network.
pub fn track_sequence(
    frames: &[Frame],
    mode: MotionMode,
    config: &TrackerConfig,
    net: Option<&GainNetwork>,
) -> Result<Vec<TrackFrame>> {
    let mut tracker = match mode {
        MotionMode::Ekf => Tracker::new_ekf(config.clone())?,
        MotionMode::Gru => {
            let net = net.ok_or_else(|| Error::Checkpoint("learned-gain tracking needs a checkpoint".into()))?;
            Tracker::new_gru(config.clone(), net, false)?
        }
    };
    frames
        .iter()
        .map(|f| {
            Ok(TrackFrame {
                index: f.index,
                timestamp: f.timestamp,
                tracks: tracker.step(f.index, f.timestamp, &f.detections)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gkf::{GainArch, GainNetConfig};
    use crate::motion::ctra;

    fn det(x: f64, y: f64, score: f64, class_id: u32) -> DetectionBox {
        DetectionBox {
            bbox: Box3D::from_parts(x, y, 0.0, 2.0, 4.0, 1.5, 0.0).unwrap(),
            velocity: [0.0, 0.0],
            score,
            class_id,
            frame_index: 0,
            timestamp: 0.0,
        }
    }

    fn fresh_track(confidence: f64) -> Trajectory {
        Trajectory {
            id: 1,
            class_id: 0,
            motion: MotionState::Ekf(FilterState::diagonal(
                DVector::zeros(1),
                &DVector::from_element(1, 1.0),
                &DVector::from_element(1, 1.0),
                &DVector::from_element(1, 1.0),
            )),
            confidence,
            age: 3,
            hits: 3,
            time_since_update: 0,
            status: TrackStatus::Active,
            updated: true,
            history: vec![],
        }
    }

    #[test]
    fn preprocess_rules() {
        let cfg = TrackerConfig::default();
        let low = vec![det(0.0, 0.0, 0.1, 0), det(5.0, 0.0, 0.15, 0)];
        assert!(preprocess(&low, cfg.score_threshold, cfg.nms_threshold).is_empty());
        let dup = vec![det(0.0, 0.0, 0.6, 0), det(0.0, 0.1, 0.9, 0)];
        let out = preprocess(&dup, cfg.score_threshold, cfg.nms_threshold);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        let mixed = vec![det(0.0, 0.0, 0.6, 0), det(0.0, 0.1, 0.9, 1)];
        assert_eq!(preprocess(&mixed, cfg.score_threshold, cfg.nms_threshold).len(), 2);
    }

    #[test]
    fn first_stage_match() {
        let cfg = TrackerConfig::default();
        let track = det(0.3, 0.0, 0.9, 0).bbox;
        let d = det(0.0, 0.0, 0.9, 0);
        assert!(giou3d(&track, &d.bbox) > 0.8);
        let r = associate(&[(track, 0)], &[d], &cfg);
        assert_eq!(r.matches, vec![(0, 0)]);
    }

    #[test]
    fn second_stage_recovers_vertical_offset() {
        let cfg = TrackerConfig::default();
        let track = Box3D::from_parts(0.0, 0.0, 1.4, 2.0, 4.0, 1.5, 0.0).unwrap();
        let d = det(0.0, 0.0, 0.9, 0);
        assert!(giou3d(&track, &d.bbox) < cfg.stage1_threshold);
        assert!(giou_bev(&track, &d.bbox) > cfg.stage2_threshold);
        let r = associate(&[(track, 0)], &[d], &cfg);
        assert_eq!(r.matches, vec![(0, 0)]);
    }

    #[test]
    fn association_is_class_gated() {
        let cfg = TrackerConfig::default();
        let d = det(0.0, 0.0, 0.9, 1);
        let r = associate(&[(d.bbox.clone(), 0)], &[d], &cfg);
        assert!(r.matches.is_empty());
        assert_eq!((r.unmatched_tracks, r.unmatched_detections), (vec![0], vec![0]));
    }

    #[test]
    fn confidence_decay() {
        let cfg = TrackerConfig::default();
        let mut t = fresh_track(0.8);
        lifecycle_update(&mut t, None, &cfg);
        assert!((t.confidence - 0.8 * (-0.25f64).exp()).abs() < 1e-15);
        assert!((t.confidence - 0.623).abs() < 1e-3);
        assert_eq!(t.status, TrackStatus::Active);
        lifecycle_update(&mut t, Some(0.5), &cfg);
        assert_eq!(t.confidence, 0.5f64.max(0.8 * (-0.5f64).exp()));
        assert_eq!(t.time_since_update, 0);
    }

    #[test]
    fn low_confidence_dies() {
        let cfg = TrackerConfig::default();
        let mut t = fresh_track(0.06);
        lifecycle_update(&mut t, None, &cfg);
        assert_eq!(t.status, TrackStatus::Dead);
        let mut t = fresh_track(1.0);
        for _ in 0..6 {
            lifecycle_update(&mut t, None, &TrackerConfig { decay: 0.0, ..cfg.clone() });
        }
        assert_eq!(t.status, TrackStatus::Dead);
    }

    #[test]
    fn birth_and_confirmation() {
        let mut tracker = Tracker::new_ekf(TrackerConfig::default()).unwrap();
        let out = tracker.step(0, 0.0, &[det(0.0, 0.0, 0.9, 0)]).unwrap();
        assert!(out.is_empty());
        assert_eq!(tracker.tracks().len(), 1);
        assert_eq!(tracker.tracks()[0].status, TrackStatus::Tentative);
        assert_eq!(tracker.tracks()[0].confidence, 0.9);
        let out = tracker.step(1, 0.5, &[det(0.0, 0.0, 0.8, 0)]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].frame_index, 1);
    }

    #[test]
    fn empty_sequence() {
        let out = track_sequence(&[], MotionMode::Ekf, &TrackerConfig::default(), None).unwrap();
        assert!(out.is_empty());
    }

    fn moving_frames(n: usize, omega: f64) -> Vec<Frame> {
        let model = MotionModel::new(ModelKind::Ctra);
        let mut x = model.state_from_box(&Box3D::from_parts(0.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.3).unwrap(), [0.0, 0.0]);
        x[ctra::V] = 5.0;
        x[ctra::OMEGA] = omega;
        (0..n)
            .map(|k| {
                let frame = Frame {
                    index: k,
                    timestamp: k as f64 * 0.5,
                    ground_truth: vec![],
                    detections: vec![DetectionBox {
                        bbox: model.state_to_box(&x),
                        velocity: model.velocity(&x),
                        score: 0.9,
                        class_id: 0,
                        frame_index: k,
                        timestamp: k as f64 * 0.5,
                    }],
                };
                x = model.predict(&x, 0.5);
                frame
            })
            .collect()
    }

    #[test]
    fn noiseless_single_object() {
        let frames = moving_frames(30, 0.1);
        let out = track_sequence(&frames, MotionMode::Ekf, &TrackerConfig::default(), None).unwrap();
        assert!(out[0].tracks.is_empty());
        for (f, o) in frames.iter().zip(&out).skip(1) {
            assert_eq!(o.tracks.len(), 1);
            assert_eq!(o.tracks[0].track_id, 1);
            let err = (o.tracks[0].bbox.center - f.detections[0].bbox.center).norm();
            if f.index > 20 {
                assert!(err < 1e-3, "frame {} error {err}", f.index);
            }
        }
    }

    #[test]
    fn zero_gain_network_coasts() {
        let mut frames = moving_frames(8, 0.0);
        // jitter that an updating filter would follow
        for f in frames.iter_mut().skip(1) {
            let b = &mut f.detections[0].bbox;
            b.center[1] += if f.index % 2 == 0 { 0.2 } else { -0.2 };
        }
        let cfg = TrackerConfig::default();
        let arch = GainArch::new(10, 7, &GainNetConfig { hidden_cap: 8, ..Default::default() });
        let net = GainNetwork::zeroed(arch).unwrap();
        let out = track_sequence(&frames, MotionMode::Gru, &cfg, Some(&net)).unwrap();
        let model = MotionModel::new(cfg.model);
        let d0 = &frames[0].detections[0];
        let mut x = model.state_from_box(&d0.bbox, d0.velocity);
        for o in out.iter().skip(1) {
            x = model.predict(&x, 0.5);
            assert_eq!(o.tracks.len(), 1);
            assert_eq!(o.tracks[0].bbox, model.state_to_box(&x));
        }
    }

    #[test]
    fn gru_mode_requires_matching_network() {
        let frames = moving_frames(2, 0.0);
        let cfg = TrackerConfig::default();
        assert!(matches!(
            track_sequence(&frames, MotionMode::Gru, &cfg, None),
            Err(Error::Checkpoint(_))
        ));
        let net = GainNetwork::zeroed(GainArch::new(11, 7, &GainNetConfig { hidden_cap: 4, ..Default::default() })).unwrap();
        assert!(matches!(
            track_sequence(&frames, MotionMode::Gru, &cfg, Some(&net)),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn timestamps_must_not_decrease() {
        let mut tracker = Tracker::new_ekf(TrackerConfig::default()).unwrap();
        tracker.step(0, 1.0, &[]).unwrap();
        assert!(tracker.step(1, 0.5, &[]).is_err());
    }
}
