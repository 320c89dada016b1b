//! Synthetic scenarios: ground truth integrated with the motion models, noisy
//! detections, false positives and partial annotations.
//!
//! All randomness comes from one `ChaCha8Rng` seeded with the scenario seed
//! (rand_chacha's portable ChaCha stream with 8 rounds), so a `(config, seed)`
//! pair always yields the same scenario.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box3D};
use crate::motion::{ctra, cv, ModelKind, MotionModel, StateSpace};
use crate::scene::{AnnotationBox, DetectionBox, Frame, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Gaussian,
    StudentT,
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    /// Standard deviation of x, y and z, meters.
    pub position_scale: f64,
    /// Standard deviation of w, l and h, meters.
    pub size_scale: f64,
    /// Standard deviation of the heading, radians.
    pub yaw_scale: f64,
    /// Standard deviation of the reported velocity, m/s.
    pub velocity_scale: f64,
    /// Degrees of freedom in `student_t` mode.
    pub dof: f64,
    /// Outlier probability in `mixture` mode.
    pub outlier_prob: f64,
    /// Outlier standard deviation as a multiple of the nominal one.
    pub outlier_scale: f64,
    pub drop_prob: f64,
    /// Mean number of false positives per frame.
    pub false_positive_rate: f64,
    /// Largest relative score reduction from multiplicative jitter.
    pub score_jitter: f64,
    /// False-positive scores are uniform on `[0.05, fp_score_max]`.
    pub fp_score_max: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            mode: NoiseMode::Gaussian,
            position_scale: 0.3,
            size_scale: 0.1,
            yaw_scale: 0.05,
            velocity_scale: 0.5,
            dof: 3.0,
            outlier_prob: 0.1,
            outlier_scale: 10.0,
            drop_prob: 0.1,
            false_positive_rate: 0.5,
            score_jitter: 0.1,
            fp_score_max: 0.4,
        }
    }
}

impl NoiseSpec {
    /// No noise, no drops, no false positives.
    pub fn noiseless() -> Self {
        NoiseSpec {
            position_scale: 0.0,
            size_scale: 0.0,
            yaw_scale: 0.0,
            velocity_scale: 0.0,
            drop_prob: 0.0,
            false_positive_rate: 0.0,
            score_jitter: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("position_scale", self.position_scale),
            ("size_scale", self.size_scale),
            ("yaw_scale", self.yaw_scale),
            ("velocity_scale", self.velocity_scale),
            ("outlier_scale", self.outlier_scale),
            ("false_positive_rate", self.false_positive_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("noise.{name}"), "must be finite and non-negative"));
            }
        }
        for (name, p) in [
            ("outlier_prob", self.outlier_prob),
            ("drop_prob", self.drop_prob),
            ("score_jitter", self.score_jitter),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("noise.{name}"), "must lie in [0, 1]"));
            }
        }
        if !(self.fp_score_max >= 0.05 && self.fp_score_max <= 1.0) {
            return Err(Error::config("noise.fp_score_max", "must lie in [0.05, 1]"));
        }
        if !(self.dof > 2.0 && self.dof.is_finite()) {
            return Err(Error::config("noise.dof", "must be finite and greater than 2"));
        }
        Ok(())
    }

    fn sigma(&self) -> [f64; 7] {
        let (p, s) = (self.position_scale, self.size_scale);
        [p, p, p, s, s, s, self.yaw_scale]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Independent objects with random poses and turn rates.
    Random,
    /// Two streams crossing at the origin at mid-sequence.
    Crossing,
    /// Two close parallel lanes of evenly spaced objects.
    Convoy,
    /// Objects circling the origin at constant turn rate.
    Roundabout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub id: u32,
    /// Mean `(w, l, h)`, meters.
    pub size: [f64; 3],
    /// Speed range, m/s.
    pub speed: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub frames: usize,
    pub dt: f64,
    pub objects: usize,
    pub layout: Layout,
    /// Motion model of each object, drawn uniformly from this list.
    pub motion_kinds: Vec<ModelKind>,
    pub classes: Vec<ClassSpec>,
    /// Half side of the square the objects start in, meters.
    pub arena: f64,
    pub turn_rate_max: f64,
    pub accel_max: f64,
    /// Let objects enter and leave at random frames instead of spanning the
    /// whole sequence.
    pub staggered: bool,
    /// Fraction of ground-truth boxes visible to training.
    pub annotation_coverage: f64,
    pub noise: NoiseSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            frames: 40,
            dt: 0.5,
            objects: 6,
            layout: Layout::Random,
            motion_kinds: vec![ModelKind::Ctra],
            classes: vec![
                ClassSpec {
                    id: 0,
                    size: [1.9, 4.6, 1.7],
                    speed: [3.0, 10.0],
                },
                ClassSpec {
                    id: 1,
                    size: [0.7, 0.8, 1.7],
                    speed: [0.5, 1.8],
                },
            ],
            arena: 40.0,
            turn_rate_max: 0.2,
            accel_max: 0.5,
            staggered: true,
            annotation_coverage: 1.0,
            noise: NoiseSpec::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("simulate.dt", "must be positive"));
        }
        if self.motion_kinds.is_empty() {
            return Err(Error::config("simulate.motion_kinds", "needs at least one model"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("simulate.classes", "needs at least one class"));
        }
        for c in &self.classes {
            if c.size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::config("simulate.classes.size", "sizes must be positive"));
            }
            if !(c.speed[0] >= 0.0 && c.speed[0] <= c.speed[1] && c.speed[1].is_finite()) {
                return Err(Error::config("simulate.classes.speed", "needs 0 <= min <= max"));
            }
        }
        for (name, v) in [
            ("arena", self.arena),
            ("turn_rate_max", self.turn_rate_max),
            ("accel_max", self.accel_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("simulate.{name}"), "must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.annotation_coverage) {
            return Err(Error::config("simulate.annotation_coverage", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One simulated object: its model and state at each frame it exists.
#[derive(Debug, Clone, PartialEq)]
pub struct SimObject {
    pub instance_id: u64,
    pub class_id: u32,
    pub model: MotionModel,
    pub first_frame: usize,
    pub states: Vec<DVector<f64>>,
}

fn initial_state(
    model: &MotionModel,
    bbox: &Box3D,
    speed: f64,
    omega: f64,
    accel: f64,
) -> DVector<f64> {
    let (s, c) = bbox.yaw.sin_cos();
    let mut x = model.state_from_box(bbox, [speed * c, speed * s]);
    match model.kind {
        ModelKind::Ctra | ModelKind::Bicycle => {
            x[ctra::A] = accel;
            x[ctra::OMEGA] = omega;
        }
        ModelKind::Ca => {
            x[cv::AX] = accel * c;
            x[cv::AY] = accel * s;
        }
        ModelKind::Cv => {}
    }
    x
}

/// Ground-truth objects of a scenario.
pub fn spawn_objects(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<SimObject> {
    let n = cfg.objects;
    let horizon = cfg.frames.saturating_sub(1) as f64 * cfg.dt;
    (0..n)
        .map(|i| {
            let class = &cfg.classes[rng.random_range(0..cfg.classes.len())];
            let mut kind = cfg.motion_kinds[rng.random_range(0..cfg.motion_kinds.len())];
            let jitter = |rng: &mut ChaCha8Rng, v: f64| v * (1.0 + 0.1 * (rng.random::<f64>() - 0.5));
            let size = [jitter(rng, class.size[0]), jitter(rng, class.size[1]), jitter(rng, class.size[2])];
            let mut speed = rng.random_range(class.speed[0]..=class.speed[1]);
            let mut omega = rng.random_range(-cfg.turn_rate_max..=cfg.turn_rate_max);
            let mut accel = rng.random_range(-cfg.accel_max..=cfg.accel_max);
            let (first, last) = if cfg.staggered && cfg.frames > 3 {
                let third = cfg.frames / 3;
                (rng.random_range(0..third.max(1)), rng.random_range(2 * third..cfg.frames))
            } else {
                (0, cfg.frames.saturating_sub(1))
            };
            let (pos, yaw) = match cfg.layout {
                Layout::Random => {
                    let p = [
                        rng.random_range(-cfg.arena..=cfg.arena),
                        rng.random_range(-cfg.arena..=cfg.arena),
                    ];
                    (p, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
                }
                Layout::Crossing => {
                    // half head east, half head north; all reach the origin
                    // area halfway through the sequence
                    omega = 0.0;
                    accel = 0.0;
                    let yaw = if i % 2 == 0 { 0.0 } else { std::f64::consts::FRAC_PI_2 };
                    let lane = (i / 2) as f64 * 4.0 - (n / 2) as f64 * 2.0;
                    let back = speed * horizon / 2.0;
                    let p = if i % 2 == 0 { [-back, lane] } else { [lane, -back] };
                    (p, yaw)
                }
                Layout::Convoy => {
                    omega = 0.0;
                    accel = 0.0;
                    speed = class.speed[1];
                    let lane = (i % 2) as f64 * 3.5;
                    let slot = (i / 2) as f64 * 12.0 + rng.random_range(0.0..3.0);
                    ([-slot, lane], 0.0)
                }
                Layout::Roundabout => {
                    if !matches!(kind, ModelKind::Ctra | ModelKind::Bicycle) {
                        kind = ModelKind::Ctra;
                    }
                    accel = 0.0;
                    let radius = 12.0 + 4.0 * (i % 2) as f64;
                    let phase = i as f64 * std::f64::consts::TAU / n as f64;
                    omega = speed / radius;
                    let p = [radius * phase.cos(), radius * phase.sin()];
                    (p, phase + std::f64::consts::FRAC_PI_2)
                }
            };
            // keep the speed from crossing zero within the sequence
            if speed + accel * horizon < 0.3 * speed {
                accel = 0.0;
            }
            let model = MotionModel::new(kind);
            let z = size[2] / 2.0;
            let bbox = Box3D::from_parts(pos[0], pos[1], z, size[0], size[1], size[2], yaw).expect("positive sizes");
            let mut x = initial_state(&model, &bbox, speed, omega, accel);
            for _ in 0..first {
                x = model.predict(&x, cfg.dt);
            }
            let mut states = vec![x.clone()];
            for _ in first..last {
                x = model.predict(&x, cfg.dt);
                states.push(x.clone());
            }
            SimObject {
                instance_id: i as u64 + 1,
                class_id: class.id,
                model,
                first_frame: first,
                states,
            }
        })
        .collect()
}

/// A noisy detection of a ground-truth box.
///
/// The score reflects the Gaussian part of the draw only: heavy-tail and
/// outlier multipliers are invisible to it, as they would be to a detector.
pub fn perturb_detection(gt: &AnnotationBox, timestamp: f64, spec: &NoiseSpec, rng: &mut impl Rng) -> DetectionBox {
    let sigma = spec.sigma();
    let base: [f64; 7] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let tail = match spec.mode {
        NoiseMode::Gaussian => 1.0,
        NoiseMode::StudentT => {
            let w: f64 = ChiSquared::new(spec.dof).expect("dof validated").sample(rng);
            // unit-variance t: z / sqrt(w / dof) * sqrt((dof - 2) / dof)
            ((spec.dof - 2.0) / w).sqrt()
        }
        NoiseMode::Mixture => {
            if rng.random::<f64>() < spec.outlier_prob {
                spec.outlier_scale
            } else {
                1.0
            }
        }
    };
    let b = &gt.bbox;
    let raw = [b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw];
    let noisy: [f64; 7] = std::array::from_fn(|k| raw[k] + sigma[k] * base[k] * tail);
    let size = |v: f64| v.max(0.05);
    let bbox = Box3D::from_parts(
        noisy[0],
        noisy[1],
        noisy[2],
        size(noisy[3]),
        size(noisy[4]),
        size(noisy[5]),
        wrap_angle(noisy[6]),
    )
    .expect("floored sizes");

    let weighted = sigma.iter().zip(&base).map(|(s, z)| (s * z).powi(2)).sum::<f64>().sqrt();
    let norm = sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
    let quality = if norm > 0.0 {
        (1.0 - weighted / (3.0 * norm)).clamp(0.05, 1.0)
    } else {
        1.0
    };
    let score = quality * (1.0 - spec.score_jitter * rng.random::<f64>());

    let vz: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
    DetectionBox {
        bbox,
        velocity: [
            gt.velocity[0] + spec.velocity_scale * vz[0],
            gt.velocity[1] + spec.velocity_scale * vz[1],
        ],
        score,
        class_id: gt.class_id,
        frame_index: gt.frame_index,
        timestamp,
    }
}

fn false_positive(cfg: &SimConfig, frame: usize, timestamp: f64, rng: &mut ChaCha8Rng) -> DetectionBox {
    let class = &cfg.classes[rng.random_range(0..cfg.classes.len())];
    let extent = cfg.arena.max(1.0) * 1.5;
    let bbox = Box3D::from_parts(
        rng.random_range(-extent..=extent),
        rng.random_range(-extent..=extent),
        class.size[2] / 2.0,
        class.size[0],
        class.size[1],
        class.size[2],
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .expect("class sizes validated");
    DetectionBox {
        bbox,
        velocity: [0.0, 0.0],
        score: rng.random_range(0.05..=cfg.noise.fp_score_max),
        class_id: class.id,
        frame_index: frame,
        timestamp,
    }
}

/// Scenario plus the underlying object states.
pub fn generate_with_objects(cfg: &SimConfig, seed: u64) -> Result<(Scenario, Vec<SimObject>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = spawn_objects(cfg, &mut rng);
    let mut frames = Vec::with_capacity(cfg.frames);
    for k in 0..cfg.frames {
        let timestamp = k as f64 * cfg.dt;
        let mut frame = Frame {
            index: k,
            timestamp,
            ..Default::default()
        };
        for obj in &objects {
            if k < obj.first_frame || k >= obj.first_frame + obj.states.len() {
                continue;
            }
            let x = &obj.states[k - obj.first_frame];
            let gt = AnnotationBox {
                bbox: obj.model.state_to_box(x),
                velocity: obj.model.velocity(x),
                instance_id: obj.instance_id,
                class_id: obj.class_id,
                frame_index: k,
                annotated: rng.random::<f64>() < cfg.annotation_coverage,
            };
            if rng.random::<f64>() >= cfg.noise.drop_prob {
                frame.detections.push(perturb_detection(&gt, timestamp, &cfg.noise, &mut rng));
            }
            frame.ground_truth.push(gt);
        }
        if cfg.noise.false_positive_rate > 0.0 {
            let count = Poisson::new(cfg.noise.false_positive_rate).expect("validated rate").sample(&mut rng) as usize;
            for _ in 0..count {
                frame.detections.push(false_positive(cfg, k, timestamp, &mut rng));
            }
        }
        frames.push(frame);
    }
    let meta = serde_json::to_value(cfg).expect("config serializes");
    Ok((Scenario { frames, seed, meta }, objects))
}

pub fn generate_scenario(cfg: &SimConfig, seed: u64) -> Result<Scenario> {
    generate_with_objects(cfg, seed).map(|(s, _)| s)
}
