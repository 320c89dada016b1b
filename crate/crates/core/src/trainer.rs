//! Training of the gain network.
//!
//! Each sequence runs the full tracker in learned-gain mode on one tape.
//! Active tracks are matched per frame to the visible annotations; matched
//! frames are supervised by the annotation box. In semi-supervised mode the
//! remaining frames are supervised by an EKF tracker run independently on the
//! same detections (pseudo-labels). The loss is backpropagated once at the
//! end of the sequence, followed by one AdamW step on a cosine schedule.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box3D};
use crate::gkf::{gkf_step_on_tape, hidden_to_tape, GainArch, GainNetConfig, GainNetwork, StepOptions};
use crate::metrics::{evaluate, EvalConfig};
use crate::motion::{box_to_obs, MotionModel, StateSpace};
use crate::neural::{cosine_lr, AdamWConfig, NodeId, OptimizerState, Tape};
use crate::scene::{Scenario, TrackBox};
use crate::tracker::{track_sequence, MotionMode, TrackStatus, Tracker, TrackerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Supervised,
    #[default]
    Semi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Squared,
    Huber,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub kind: LossKind,
    pub huber_delta: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            kind: LossKind::Squared,
            huber_delta: 1.0,
        }
    }
}

impl LossSpec {
    fn value(&self, residual: &DVector<f64>) -> f64 {
        match self.kind {
            LossKind::Squared => residual.norm_squared(),
            LossKind::Huber => residual
                .iter()
                .map(|r| {
                    let a = r.abs();
                    if a <= self.huber_delta {
                        0.5 * r * r
                    } else {
                        self.huber_delta * (a - 0.5 * self.huber_delta)
                    }
                })
                .sum(),
        }
    }

    fn node(&self, tape: &mut Tape, x: NodeId, target: DVector<f64>, wrap: Option<usize>) -> NodeId {
        match self.kind {
            LossKind::Squared => tape.squared_error(x, target, wrap),
            LossKind::Huber => tape.huber(x, target, wrap, self.huber_delta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    /// Length of the cosine schedule; defaults to `epochs * sequences`.
    pub total_steps: Option<u64>,
    pub optimizer: AdamWConfig,
    pub clip_norm: f64,
    pub loss: LossSpec,
    pub pseudo_weight: f64,
    /// Center-distance gate for annotation and pseudo-label matching, meters.
    pub annotation_gate: f64,
    /// Divide the sequence loss by its number of terms.
    pub normalize_loss: bool,
    /// Validation period in optimizer steps; 0 validates only at the end.
    pub validate_every: u64,
    pub max_restores: u32,
    pub shuffle: bool,
    pub seed: u64,
    pub gain: GainNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Semi,
            epochs: 3,
            max_lr: 1e-5,
            min_lr: 0.0,
            total_steps: None,
            optimizer: AdamWConfig::default(),
            clip_norm: 10.0,
            loss: LossSpec::default(),
            pseudo_weight: 1.0,
            annotation_gate: 2.0,
            normalize_loss: true,
            validate_every: 0,
            max_restores: 3,
            shuffle: true,
            seed: 0,
            gain: GainNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::config("train.max_lr", "must be positive"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.max_lr) {
            return Err(Error::config("train.min_lr", "must lie in [0, max_lr]"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm", "must be positive"));
        }
        if !(self.pseudo_weight >= 0.0 && self.pseudo_weight.is_finite()) {
            return Err(Error::config("train.pseudo_weight", "must be non-negative"));
        }
        if !(self.annotation_gate > 0.0) {
            return Err(Error::config("train.annotation_gate", "must be positive"));
        }
        if !(self.loss.huber_delta > 0.0) {
            return Err(Error::config("train.loss.huber_delta", "must be positive"));
        }
        if self.total_steps == Some(0) {
            return Err(Error::config("train.total_steps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionSource {
    Annotation,
    PseudoLabel,
}

/// Target of one (trajectory, frame) pair, in observation space.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionRecord {
    pub track_id: u64,
    pub frame_index: usize,
    pub target: DVector<f64>,
    pub source: SupervisionSource,
}

/// Greedy nearest-center matching within class, gated on BEV center
/// distance. Returns the matched annotation index per track.
pub fn associate_annotations(tracks: &[(Box3D, u32)], annotations: &[(Box3D, u32)], gate: f64) -> Vec<Option<usize>> {
    let mut pairs = vec![];
    for (i, (t, tc)) in tracks.iter().enumerate() {
        for (j, (a, ac)) in annotations.iter().enumerate() {
            if tc != ac {
                continue;
            }
            let d = (t.bev_center() - a.bev_center()).norm();
            if d <= gate {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; tracks.len()];
    let mut used = vec![false; annotations.len()];
    for (_, i, j) in pairs {
        if out[i].is_none() && !used[j] {
            out[i] = Some(j);
            used[j] = true;
        }
    }
    out
}

fn residual(est: &DVector<f64>, target: &DVector<f64>, heading: Option<usize>) -> DVector<f64> {
    let mut r = est - target;
    if let Some(i) = heading {
        r[i] = wrap_angle(r[i]);
    }
    r
}

/// Summed loss between aligned estimates and targets, both in the space of
/// supervised components (position, size, heading at index `heading`).
pub fn supervised_loss(
    estimates: &[DVector<f64>],
    targets: &[DVector<f64>],
    heading: Option<usize>,
    loss: &LossSpec,
) -> f64 {
    assert_eq!(estimates.len(), targets.len(), "estimates and targets must align");
    estimates
        .iter()
        .zip(targets)
        .map(|(e, t)| loss.value(&residual(e, t, heading)))
        .sum()
}

/// `d/dK ||K dy - dx||^2 = 2 (K dy - dx) dy^T`.
pub fn gain_gradient_closed_form(k: &DMatrix<f64>, dy: &DVector<f64>, dx: &DVector<f64>) -> DMatrix<f64> {
    (k * dy - dx) * dy.transpose() * 2.0
}

/// Annotation term plus `pseudo_weight` times the pseudo-label term.
pub fn semi_supervised_loss(
    records: &[SupervisionRecord],
    estimates: &[DVector<f64>],
    heading: Option<usize>,
    loss: &LossSpec,
    pseudo_weight: f64,
) -> f64 {
    assert_eq!(records.len(), estimates.len(), "one estimate per record");
    let term = |src: SupervisionSource| -> f64 {
        records
            .iter()
            .zip(estimates)
            .filter(|(r, _)| r.source == src)
            .map(|(r, e)| loss.value(&residual(e, &r.target, heading)))
            .sum()
    };
    term(SupervisionSource::Annotation) + pseudo_weight * term(SupervisionSource::PseudoLabel)
}

/// Loss bookkeeping of one sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceStats {
    pub annotation_loss: f64,
    pub pseudo_loss: f64,
    pub annotation_terms: usize,
    pub pseudo_terms: usize,
    /// Active-track frames with neither an annotation nor a pseudo-label.
    pub unsupervised: usize,
}

impl SequenceStats {
    pub fn coverage(&self) -> f64 {
        let n = self.annotation_terms + self.pseudo_terms;
        if n == 0 {
            0.0
        } else {
            self.annotation_terms as f64 / n as f64
        }
    }
}

/// Runs the learned-gain tracker over a scenario on a tape and assembles the
/// loss. Returns the tape, the loss node (absent when nothing was
/// supervised), and statistics.
pub fn sequence_loss(
    net: &GainNetwork,
    scenario: &Scenario,
    tracker_cfg: &TrackerConfig,
    cfg: &TrainConfig,
) -> Result<(Tape, Option<NodeId>, SequenceStats)> {
    let teacher = match cfg.mode {
        TrainMode::Semi => Some(track_sequence(&scenario.frames, MotionMode::Ekf, tracker_cfg, None)?),
        TrainMode::Supervised => None,
    };
    let mut tracker = Tracker::new_gru(tracker_cfg.clone(), net, true)?;
    let model = tracker.model;
    let heading = model.obs_heading();
    let mut stats = SequenceStats::default();
    let mut annotation_terms = vec![];
    let mut pseudo_terms = vec![];
    // estimate nodes are created after the step, so collect them first
    let mut pending: Vec<(NodeId, DVector<f64>, SupervisionSource)> = vec![];

    for (k, frame) in scenario.frames.iter().enumerate() {
        tracker.step(frame.index, frame.timestamp, &frame.detections)?;
        let active: Vec<(NodeId, Box3D, u32)> = tracker
            .tracks()
            .iter()
            .filter(|t| t.status == TrackStatus::Active)
            .map(|t| {
                let node = match &t.motion {
                    crate::tracker::MotionState::Gru { posterior, .. } => *posterior,
                    crate::tracker::MotionState::Ekf(_) => unreachable!("learned-gain tracker"),
                };
                (node, model.state_to_box(&tracker.posterior(t)), t.class_id)
            })
            .collect();
        let annots: Vec<(Box3D, u32)> = frame
            .ground_truth
            .iter()
            .filter(|g| g.annotated)
            .map(|g| (g.bbox.clone(), g.class_id))
            .collect();
        let boxes: Vec<(Box3D, u32)> = active.iter().map(|a| (a.1.clone(), a.2)).collect();
        let matched = associate_annotations(&boxes, &annots, cfg.annotation_gate);

        let leftover: Vec<usize> = (0..active.len()).filter(|&i| matched[i].is_none()).collect();
        let mut pseudo: Vec<Option<DVector<f64>>> = vec![None; active.len()];
        if let Some(teacher) = &teacher {
            let teacher_boxes: Vec<(Box3D, u32)> =
                teacher[k].tracks.iter().map(|t: &TrackBox| (t.bbox.clone(), t.class_id)).collect();
            let rest: Vec<(Box3D, u32)> = leftover.iter().map(|&i| boxes[i].clone()).collect();
            for (slot, m) in associate_annotations(&rest, &teacher_boxes, cfg.annotation_gate).into_iter().enumerate() {
                if let Some(j) = m {
                    pseudo[leftover[slot]] = Some(box_to_obs(&teacher_boxes[j].0));
                }
            }
        }
        for (i, (node, _, _)) in active.iter().enumerate() {
            if let Some(a) = matched[i] {
                pending.push((*node, box_to_obs(&annots[a].0), SupervisionSource::Annotation));
            } else if let Some(target) = pseudo[i].take() {
                pending.push((*node, target, SupervisionSource::PseudoLabel));
            } else {
                stats.unsupervised += 1;
            }
        }
    }

    let mut tape = tracker.into_tape();
    for (node, target, source) in pending {
        let x = tape.value(node).clone();
        let est = tape.linearized(node, model.observe(&x), model.jacobian_h(&x));
        let term = cfg.loss.node(&mut tape, est, target, heading);
        match source {
            SupervisionSource::Annotation => {
                stats.annotation_loss += tape.scalar(term);
                annotation_terms.push(term);
            }
            SupervisionSource::PseudoLabel => {
                stats.pseudo_loss += tape.scalar(term);
                pseudo_terms.push(term);
            }
        }
    }
    stats.annotation_terms = annotation_terms.len();
    stats.pseudo_terms = pseudo_terms.len();
    let n = annotation_terms.len() + pseudo_terms.len();
    if n == 0 {
        return Ok((tape, None, stats));
    }
    let mut parts = vec![];
    if !annotation_terms.is_empty() {
        parts.push(tape.sum(&annotation_terms));
    }
    if !pseudo_terms.is_empty() {
        let s = tape.sum(&pseudo_terms);
        parts.push(tape.scale(s, cfg.pseudo_weight));
    }
    let mut loss = tape.sum(&parts);
    if cfg.normalize_loss {
        loss = tape.scale(loss, 1.0 / n as f64);
    }
    Ok((tape, Some(loss), stats))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub sequence: usize,
    pub lr: f64,
    pub loss: f64,
    pub annotation_loss: f64,
    pub pseudo_loss: f64,
    pub annotation_terms: usize,
    pub pseudo_terms: usize,
    pub unsupervised: usize,
    pub coverage: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    /// Set when this sequence diverged and the last good state was restored.
    pub restored: bool,
    pub val_amota: Option<f64>,
}

pub struct TrainOutcome {
    pub net: GainNetwork,
    pub optimizer: OptimizerState,
    pub log: Vec<StepLog>,
}

/// Mean AMOTA of the learned-gain tracker over validation scenarios.
pub fn validation_amota(net: &GainNetwork, scenarios: &[Scenario], tracker_cfg: &TrackerConfig) -> Result<f64> {
    if scenarios.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in scenarios {
        let out = track_sequence(&s.frames, MotionMode::Gru, tracker_cfg, Some(net))?;
        total += evaluate(&out, &s.frames, &EvalConfig::default())?.amota;
    }
    Ok(total / scenarios.len() as f64)
}

/// Trains a gain network. Starts from `init` when given, otherwise from a
/// fresh network seeded with `cfg.seed`.
pub fn train(
    train_set: &[Scenario],
    val_set: &[Scenario],
    tracker_cfg: &TrackerConfig,
    cfg: &TrainConfig,
    init: Option<(GainNetwork, Option<OptimizerState>)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tracker_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("train.scenarios", "needs at least one training sequence"));
    }
    let model = MotionModel::new(tracker_cfg.model);
    let (mut net, opt) = match init {
        Some(x) => x,
        None => (GainNetwork::new(GainArch::new(model.dim(), model.obs_dim(), &cfg.gain), cfg.seed)?, None),
    };
    let mut opt = opt.unwrap_or_else(|| OptimizerState::new(&net.params, cfg.optimizer));
    let total = cfg.total_steps.unwrap_or(((cfg.epochs * train_set.len()) as u64).max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = vec![];
    let mut lr_scale = 1.0;
    let mut restores = 0;
    let mut step = 0u64;
    let mut good = (net.params.clone(), opt.clone());

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        for si in order {
            if step >= total {
                break 'epochs;
            }
            let lr = cosine_lr(step, total, cfg.max_lr, cfg.min_lr) * lr_scale;
            let outcome = match sequence_loss(&net, &train_set[si], tracker_cfg, cfg) {
                Ok(x) => Some(x),
                Err(Error::NonFinite { .. }) => None,
                Err(e) => return Err(e),
            };
            let mut record = StepLog {
                step,
                epoch,
                sequence: si,
                lr,
                loss: f64::NAN,
                annotation_loss: 0.0,
                pseudo_loss: 0.0,
                annotation_terms: 0,
                pseudo_terms: 0,
                unsupervised: 0,
                coverage: 0.0,
                grad_norm: 0.0,
                clipped: false,
                restored: false,
                val_amota: None,
            };
            let mut diverged = outcome.is_none();
            if let Some((tape, loss, stats)) = outcome {
                record.annotation_loss = stats.annotation_loss;
                record.pseudo_loss = stats.pseudo_loss;
                record.annotation_terms = stats.annotation_terms;
                record.pseudo_terms = stats.pseudo_terms;
                record.unsupervised = stats.unsupervised;
                record.coverage = stats.coverage();
                let Some(loss) = loss else {
                    // nothing supervised in this sequence
                    continue;
                };
                record.loss = tape.scalar(loss);
                let mut grads = net.params.zeros_like();
                tape.backward(&[(loss, DVector::from_element(1, 1.0))], &net.params, &mut grads);
                record.grad_norm = grads.global_norm();
                diverged = !record.loss.is_finite() || !grads.all_finite();
                if !diverged {
                    record.clipped = grads.clip_global_norm(cfg.clip_norm);
                    diverged = !opt.step(&mut net.params, &grads, lr) || !net.params.all_finite();
                }
            }
            if diverged {
                net.params = good.0.clone();
                opt = good.1.clone();
                lr_scale *= 0.5;
                restores += 1;
                record.restored = true;
                log.push(record);
                if restores > cfg.max_restores {
                    return Err(Error::Diverged(format!(
                        "non-finite loss or gradient after {} restores (step {step})",
                        cfg.max_restores
                    )));
                }
                continue;
            }
            step += 1;
            good = (net.params.clone(), opt.clone());
            if cfg.validate_every > 0 && step % cfg.validate_every == 0 && !val_set.is_empty() {
                record.val_amota = Some(validation_amota(&net, val_set, tracker_cfg)?);
            }
            log.push(record);
        }
    }
    if !val_set.is_empty() && log.last().is_some_and(|r| r.val_amota.is_none()) {
        let v = validation_amota(&net, val_set, tracker_cfg)?;
        if let Some(last) = log.last_mut() {
            last.val_amota = Some(v);
        }
    }
    Ok(TrainOutcome { net, optimizer: opt, log })
}

/// First optimizer step at which validation AMOTA reached `target`.
pub fn steps_to_target(log: &[StepLog], target: f64) -> Option<u64> {
    log.iter()
        .find(|r| r.val_amota.is_some_and(|v| v >= target))
        .map(|r| r.step + 1)
}

/// A sequence with known true states, for fitting the filter directly.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    /// Estimate the filter starts from.
    pub initial: DVector<f64>,
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub epochs: usize,
    /// Sequences whose gradients are summed per optimizer step.
    pub batch: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    pub clip_norm: f64,
    pub optimizer: AdamWConfig,
    pub flip_heading: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 20,
            batch: 4,
            max_lr: 1e-2,
            min_lr: 1e-4,
            clip_norm: 10.0,
            optimizer: AdamWConfig::default(),
            flip_heading: false,
        }
    }
}

/// Records the learned filter over a labeled sequence and returns the mean
/// per-step squared state error node.
fn labeled_loss<S: StateSpace + ?Sized>(
    net: &GainNetwork,
    model: &S,
    seq: &LabeledSequence,
    opts: StepOptions,
) -> Result<(Tape, NodeId)> {
    let mut tape = Tape::new();
    let mut post = tape.leaf(seq.initial.clone());
    let mut hidden = hidden_to_tape(&mut tape, &net.initial_hidden());
    let mut terms = vec![];
    for (x, y) in seq.states.iter().zip(&seq.observations) {
        let (p, h) = gkf_step_on_tape(net, &mut tape, post, &hidden, Some(y), model, seq.dt, opts)?;
        terms.push(tape.squared_error(p, x.clone(), model.state_heading()));
        post = p;
        hidden = h;
    }
    let sum = tape.sum(&terms);
    let loss = tape.scale(sum, 1.0 / terms.len().max(1) as f64);
    Ok((tape, loss))
}

/// Fits a gain network on sequences with known states, minimizing the mean
/// squared state error. Returns the mean training loss per epoch.
pub fn fit_filter<S: StateSpace + ?Sized>(
    net: &mut GainNetwork,
    model: &S,
    sequences: &[LabeledSequence],
    cfg: &FitConfig,
) -> Result<Vec<f64>> {
    let batch = cfg.batch.max(1);
    let steps_per_epoch = sequences.len().div_ceil(batch);
    let total = ((cfg.epochs * steps_per_epoch) as u64).max(1);
    let mut opt = OptimizerState::new(&net.params, cfg.optimizer);
    let opts = StepOptions {
        flip_heading: cfg.flip_heading,
    };
    let mut history = vec![];
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for chunk in sequences.chunks(batch) {
            let mut grads = net.params.zeros_like();
            for seq in chunk {
                let (tape, loss) = labeled_loss(net, model, seq, opts)?;
                epoch_loss += tape.scalar(loss);
                tape.backward(&[(loss, DVector::from_element(1, 1.0 / chunk.len() as f64))], &net.params, &mut grads);
            }
            grads.clip_global_norm(cfg.clip_norm);
            let lr = cosine_lr(step, total, cfg.max_lr, cfg.min_lr);
            if !opt.step(&mut net.params, &grads, lr) {
                return Err(Error::Diverged(format!("non-finite gradient at step {step}")));
            }
            step += 1;
        }
        history.push(epoch_loss / sequences.len().max(1) as f64);
    }
    Ok(history)
}

/// Posterior means of the learned filter over a sequence.
pub fn run_filter<S: StateSpace + ?Sized>(
    net: &GainNetwork,
    model: &S,
    seq: &LabeledSequence,
    flip_heading: bool,
) -> Result<Vec<DVector<f64>>> {
    let opts = StepOptions { flip_heading };
    let mut post = seq.initial.clone();
    let mut hidden = net.initial_hidden();
    let mut out = vec![];
    for y in &seq.observations {
        let (p, h) = crate::gkf::gkf_step(net, &post, &hidden, Some(y), model, seq.dt, opts)?;
        out.push(p.clone());
        post = p;
        hidden = h;
    }
    Ok(out)
}
