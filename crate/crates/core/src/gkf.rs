//! Learned Kalman gain.
//!
//! Three GRUs carry recurrent stand-ins for the process noise, the state
//! covariance and the innovation covariance. They are driven by differences
//! of states and observations, and a two-layer head turns the latter two
//! hidden states into an `m x d` gain. The state transition `f` and the
//! observation `h` stay model-based; only the gain is learned.
//!
//! Every step is recorded on a [`Tape`] so that training can backpropagate
//! through whole sequences, including through the transition and through the
//! feature differences. Inference runs the same code on a throwaway tape.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::innovation;
use crate::geometry::wrap_angle;
use crate::motion::StateSpace;
use crate::neural::{Activation, Checkpoint, DenseLayer, GruCell, NodeId, OptimizerState, ParamStore, Tape};

/// Network sizes. Recorded in checkpoints and validated on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainArch {
    pub state_dim: usize,
    pub obs_dim: usize,
    pub q_hidden: usize,
    pub p_hidden: usize,
    pub s_hidden: usize,
    pub head_hidden: usize,
    /// Per-component divisors applied to the state-difference features.
    pub state_scale: Option<Vec<f64>>,
    /// Per-component divisors applied to the observation-difference features.
    pub obs_scale: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainNetConfig {
    /// Upper bound on every recurrent hidden size.
    pub hidden_cap: usize,
    /// Multiplier on `m^2` (and `d^2`) for the hidden sizes.
    pub hidden_factor: usize,
    pub state_scale: Option<Vec<f64>>,
    pub obs_scale: Option<Vec<f64>>,
    pub init_seed: u64,
}

impl Default for GainNetConfig {
    fn default() -> Self {
        GainNetConfig {
            hidden_cap: 200,
            hidden_factor: 2,
            state_scale: None,
            obs_scale: None,
            init_seed: 0,
        }
    }
}

impl GainArch {
    pub fn new(state_dim: usize, obs_dim: usize, cfg: &GainNetConfig) -> Self {
        let sized = |n: usize| (cfg.hidden_factor * n * n).clamp(1, cfg.hidden_cap.max(1));
        GainArch {
            state_dim,
            obs_dim,
            q_hidden: sized(state_dim),
            p_hidden: sized(state_dim),
            s_hidden: sized(obs_dim),
            head_hidden: 2 * state_dim * obs_dim,
            state_scale: cfg.state_scale.clone(),
            obs_scale: cfg.obs_scale.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.state_scale {
            if s.len() != self.state_dim || s.iter().any(|&v| v.is_nan() || v <= 0.0) {
                return Err(Error::config("gain.state_scale", "needs one positive divisor per state component"));
            }
        }
        if let Some(s) = &self.obs_scale {
            if s.len() != self.obs_dim || s.iter().any(|&v| v.is_nan() || v <= 0.0) {
                return Err(Error::config("gain.obs_scale", "needs one positive divisor per observation component"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainNetwork {
    pub arch: GainArch,
    pub params: ParamStore,
    pub embed_q: DenseLayer,
    pub embed_p: DenseLayer,
    pub embed_s: DenseLayer,
    pub gru_q: GruCell,
    pub gru_p: GruCell,
    pub gru_s: GruCell,
    pub bridge_ps: DenseLayer,
    pub head_hidden: DenseLayer,
    pub head_out: DenseLayer,
}

/// Recurrent memory of one track, generic over plain values and tape nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackHidden<T = DVector<f64>> {
    pub h_q: T,
    pub h_p: T,
    pub h_s: T,
    /// Posterior of the most recent step.
    pub last_posterior: Option<T>,
    /// Prior of the most recent step.
    pub last_prior: Option<T>,
    /// Posterior the most recent step started from.
    pub prev_posterior: Option<T>,
    pub last_observation: Option<DVector<f64>>,
}

/// The four difference features of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GkfFeatures<T = DVector<f64>> {
    pub dx_update: T,
    pub dx_evolution: T,
    pub dy_obs: T,
    pub dy_innovation: T,
}

impl GainNetwork {
    pub fn new(arch: GainArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (m, d) = (arch.state_dim, arch.obs_dim);
        let embed_q = DenseLayer::new(&mut params, "embed_q", 2 * m, arch.q_hidden, Activation::Relu, &mut rng);
        let gru_q = GruCell::new(&mut params, "gru_q", arch.q_hidden, arch.q_hidden, &mut rng);
        let embed_p = DenseLayer::new(
            &mut params,
            "embed_p",
            arch.q_hidden + m,
            arch.p_hidden,
            Activation::Relu,
            &mut rng,
        );
        let gru_p = GruCell::new(&mut params, "gru_p", arch.p_hidden, arch.p_hidden, &mut rng);
        let bridge_ps = DenseLayer::new(&mut params, "bridge_ps", arch.p_hidden, arch.s_hidden, Activation::Relu, &mut rng);
        let embed_s = DenseLayer::new(
            &mut params,
            "embed_s",
            arch.s_hidden + 2 * d,
            arch.s_hidden,
            Activation::Relu,
            &mut rng,
        );
        let gru_s = GruCell::new(&mut params, "gru_s", arch.s_hidden, arch.s_hidden, &mut rng);
        let head_hidden = DenseLayer::new(
            &mut params,
            "head.0",
            arch.p_hidden + arch.s_hidden,
            arch.head_hidden,
            Activation::Relu,
            &mut rng,
        );
        let head_out = DenseLayer::new(&mut params, "head.1", arch.head_hidden, m * d, Activation::Identity, &mut rng);
        Ok(GainNetwork {
            arch,
            params,
            embed_q,
            embed_p,
            embed_s,
            gru_q,
            gru_p,
            gru_s,
            bridge_ps,
            head_hidden,
            head_out,
        })
    }

    /// Network whose parameters are all zero; it emits `K = 0`.
    pub fn zeroed(arch: GainArch) -> Result<Self> {
        let mut net = Self::new(arch, 0)?;
        for p in net.params.iter_mut() {
            p.value.fill(0.0);
        }
        Ok(net)
    }

    pub fn initial_hidden(&self) -> TrackHidden {
        TrackHidden {
            h_q: DVector::zeros(self.arch.q_hidden),
            h_p: DVector::zeros(self.arch.p_hidden),
            h_s: DVector::zeros(self.arch.s_hidden),
            last_posterior: None,
            last_prior: None,
            prev_posterior: None,
            last_observation: None,
        }
    }

    fn checkpoint_header(&self, model: &str) -> serde_json::Value {
        serde_json::json!({ "arch": self.arch, "model": model })
    }

    pub fn to_checkpoint(&self, model: &str, optimizer: Option<&OptimizerState>) -> Checkpoint {
        Checkpoint::new(self.checkpoint_header(model), &self.params, optimizer)
    }

    /// Rebuilds a network from a checkpoint, checking that it was written for
    /// `expected_arch` and the `model` backbone.
    pub fn from_checkpoint(ck: &Checkpoint, expected_arch: &GainArch, model: &str) -> Result<Self> {
        let arch: GainArch = serde_json::from_value(ck.header["arch"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad architecture header: {e}")))?;
        if &arch != expected_arch {
            return Err(Error::Checkpoint(format!(
                "architecture {arch:?} does not match configured {expected_arch:?}"
            )));
        }
        let stored_model = ck.header["model"].as_str().unwrap_or_default();
        if stored_model != model {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained for motion model `{stored_model}`, configured `{model}`"
            )));
        }
        let mut net = Self::new(arch, 0)?;
        ck.load_into(&mut net.params)?;
        Ok(net)
    }

    /// Records one gain computation. Returns the flattened row-major gain and
    /// the new hidden-state nodes.
    pub fn gain_on_tape(
        &self,
        tape: &mut Tape,
        hidden: &TrackHidden<NodeId>,
        feats: &GkfFeatures<NodeId>,
    ) -> Result<(NodeId, [NodeId; 3])> {
        let p = &self.params;
        let q_in = tape.concat(&[feats.dx_update, feats.dx_evolution]);
        let q_in = self.embed_q.forward(tape, p, q_in)?;
        let h_q = self.gru_q.forward(tape, p, hidden.h_q, q_in)?;

        let p_in = tape.concat(&[h_q, feats.dx_evolution]);
        let p_in = self.embed_p.forward(tape, p, p_in)?;
        let h_p = self.gru_p.forward(tape, p, hidden.h_p, p_in)?;

        let bridged = self.bridge_ps.forward(tape, p, h_p)?;
        let s_in = tape.concat(&[bridged, feats.dy_obs, feats.dy_innovation]);
        let s_in = self.embed_s.forward(tape, p, s_in)?;
        let h_s = self.gru_s.forward(tape, p, hidden.h_s, s_in)?;

        let head_in = tape.concat(&[h_p, h_s]);
        let head = self.head_hidden.forward(tape, p, head_in)?;
        let gain = self.head_out.forward(tape, p, head)?;
        if !tape.value(gain).iter().all(|v| v.is_finite()) {
            let dump = [feats.dx_update, feats.dx_evolution, feats.dy_obs, feats.dy_innovation]
                .iter()
                .map(|&n| format!("{:?}", tape.value(n).as_slice()))
                .collect::<Vec<_>>()
                .join(" ");
            return Err(Error::NonFinite { stage: "gain head", dump });
        }
        Ok((gain, [h_q, h_p, h_s]))
    }

    /// Gain for given hidden state and features, outside any training graph.
    pub fn compute_gain(&self, hidden: &TrackHidden, feats: &GkfFeatures) -> Result<(DMatrix<f64>, TrackHidden)> {
        let mut tape = Tape::new();
        let nodes = hidden_to_tape(&mut tape, hidden);
        let fnodes = GkfFeatures {
            dx_update: tape.leaf(feats.dx_update.clone()),
            dx_evolution: tape.leaf(feats.dx_evolution.clone()),
            dy_obs: tape.leaf(feats.dy_obs.clone()),
            dy_innovation: tape.leaf(feats.dy_innovation.clone()),
        };
        let (gain, [h_q, h_p, h_s]) = self.gain_on_tape(&mut tape, &nodes, &fnodes)?;
        let k = DMatrix::from_row_slice(self.arch.state_dim, self.arch.obs_dim, tape.value(gain).as_slice());
        let mut next = hidden.clone();
        next.h_q = tape.value(h_q).clone();
        next.h_p = tape.value(h_p).clone();
        next.h_s = tape.value(h_s).clone();
        Ok((k, next))
    }
}

pub fn hidden_to_tape(tape: &mut Tape, hidden: &TrackHidden) -> TrackHidden<NodeId> {
    TrackHidden {
        h_q: tape.leaf(hidden.h_q.clone()),
        h_p: tape.leaf(hidden.h_p.clone()),
        h_s: tape.leaf(hidden.h_s.clone()),
        last_posterior: hidden.last_posterior.clone().map(|v| tape.leaf(v)),
        last_prior: hidden.last_prior.clone().map(|v| tape.leaf(v)),
        prev_posterior: hidden.prev_posterior.clone().map(|v| tape.leaf(v)),
        last_observation: hidden.last_observation.clone(),
    }
}

pub fn hidden_from_tape(tape: &Tape, hidden: &TrackHidden<NodeId>) -> TrackHidden {
    TrackHidden {
        h_q: tape.value(hidden.h_q).clone(),
        h_p: tape.value(hidden.h_p).clone(),
        h_s: tape.value(hidden.h_s).clone(),
        last_posterior: hidden.last_posterior.map(|n| tape.value(n).clone()),
        last_prior: hidden.last_prior.map(|n| tape.value(n).clone()),
        prev_posterior: hidden.prev_posterior.map(|n| tape.value(n).clone()),
        last_observation: hidden.last_observation.clone(),
    }
}

fn wrap_at(v: &mut DVector<f64>, idx: Option<usize>) {
    if let Some(i) = idx {
        v[i] = wrap_angle(v[i]);
    }
}

/// Feature vectors for the current step (value form).
pub fn compute_features<S: StateSpace + ?Sized>(
    hidden: &TrackHidden,
    prior: &DVector<f64>,
    y: &DVector<f64>,
    model: &S,
    flip_heading: bool,
) -> GkfFeatures {
    let (m, d) = (model.state_dim(), model.obs_dim());
    let state_diff = |a: &Option<DVector<f64>>, b: &Option<DVector<f64>>| match (a, b) {
        (Some(a), Some(b)) => {
            let mut v = a - b;
            wrap_at(&mut v, model.state_heading());
            v
        }
        _ => DVector::zeros(m),
    };
    let dy_obs = match &hidden.last_observation {
        Some(prev) => {
            let mut v = y - prev;
            wrap_at(&mut v, model.obs_heading());
            v
        }
        None => DVector::zeros(d),
    };
    GkfFeatures {
        dx_update: state_diff(&hidden.last_posterior, &hidden.last_prior),
        dx_evolution: state_diff(&hidden.last_posterior, &hidden.prev_posterior),
        dy_obs,
        dy_innovation: innovation(model, y, &model.observe(prior), flip_heading),
    }
}

/// Options for one learned-filter step.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    pub flip_heading: bool,
}

/// Records one predict(+update) step of the learned filter.
///
/// Returns the posterior node and the new hidden state. Without an
/// observation the posterior is the prior and the recurrent state is carried
/// over unchanged.
pub fn gkf_step_on_tape<S: StateSpace + ?Sized>(
    net: &GainNetwork,
    tape: &mut Tape,
    posterior: NodeId,
    hidden: &TrackHidden<NodeId>,
    y: Option<&DVector<f64>>,
    model: &S,
    dt: f64,
    opts: StepOptions,
) -> Result<(NodeId, TrackHidden<NodeId>)> {
    let post_val = tape.value(posterior).clone();
    let prior_val = model.predict(&post_val, dt);
    let jac = model.jacobian_f(&post_val, dt);
    let prior = tape.linearized(posterior, prior_val.clone(), jac);

    let Some(y) = y else {
        let next = TrackHidden {
            last_posterior: Some(prior),
            last_prior: Some(prior),
            prev_posterior: Some(posterior),
            ..hidden.clone()
        };
        return Ok((prior, next));
    };

    let (m, d) = (model.state_dim(), model.obs_dim());
    let state_diff = |tape: &mut Tape, a: Option<NodeId>, b: Option<NodeId>| match (a, b) {
        (Some(a), Some(b)) => {
            let diff = tape.sub(a, b);
            match model.state_heading() {
                Some(i) => tape.wrap(diff, i),
                None => diff,
            }
        }
        _ => tape.leaf(DVector::zeros(m)),
    };
    let mut dx_update = state_diff(tape, hidden.last_posterior, hidden.last_prior);
    let mut dx_evolution = state_diff(tape, hidden.last_posterior, hidden.prev_posterior);

    let mut dy_obs_val = match &hidden.last_observation {
        Some(prev) => y - prev,
        None => DVector::zeros(d),
    };
    wrap_at(&mut dy_obs_val, model.obs_heading());
    let mut dy_obs = tape.leaf(dy_obs_val);

    // the residual is built on the tape so gradients reach the prior; the
    // heading flip decision is taken on values
    let y_pred_val = model.observe(&prior_val);
    let mut y_used = y.clone();
    if let Some(i) = model.obs_heading() {
        let raw = wrap_angle(y[i] - y_pred_val[i]);
        let resid = innovation(model, y, &y_pred_val, opts.flip_heading)[i];
        if (raw - resid).abs() > 1e-12 {
            y_used[i] = wrap_angle(y[i] + std::f64::consts::PI);
        }
    }
    let y_pred = tape.linearized(prior, y_pred_val, model.jacobian_h(&prior_val));
    let y_node = tape.leaf(y_used);
    let raw_innov = tape.sub(y_node, y_pred);
    let innov = match model.obs_heading() {
        Some(i) => tape.wrap(raw_innov, i),
        None => raw_innov,
    };
    let mut dy_innovation = innov;

    if let Some(scale) = &net.arch.state_scale {
        let inv = tape.leaf(DVector::from_iterator(m, scale.iter().map(|s| 1.0 / s)));
        dx_update = tape.mul(dx_update, inv);
        dx_evolution = tape.mul(dx_evolution, inv);
    }
    if let Some(scale) = &net.arch.obs_scale {
        let inv = tape.leaf(DVector::from_iterator(d, scale.iter().map(|s| 1.0 / s)));
        dy_obs = tape.mul(dy_obs, inv);
        dy_innovation = tape.mul(dy_innovation, inv);
    }
    let feats = GkfFeatures {
        dx_update,
        dx_evolution,
        dy_obs,
        dy_innovation,
    };
    let (gain, [h_q, h_p, h_s]) = net.gain_on_tape(tape, hidden, &feats)?;
    let correction = tape.mat_vec(gain, innov, m);
    let sum = tape.add(prior, correction);
    let post = match model.state_heading() {
        Some(i) => tape.wrap(sum, i),
        None => sum,
    };
    let next = TrackHidden {
        h_q,
        h_p,
        h_s,
        last_posterior: Some(post),
        last_prior: Some(prior),
        prev_posterior: Some(posterior),
        last_observation: Some(y.clone()),
    };
    Ok((post, next))
}

/// One learned-filter step on plain values.
pub fn gkf_step<S: StateSpace + ?Sized>(
    net: &GainNetwork,
    posterior: &DVector<f64>,
    hidden: &TrackHidden,
    y: Option<&DVector<f64>>,
    model: &S,
    dt: f64,
    opts: StepOptions,
) -> Result<(DVector<f64>, TrackHidden)> {
    let mut tape = Tape::new();
    let post = tape.leaf(posterior.clone());
    let nodes = hidden_to_tape(&mut tape, hidden);
    let (out, next) = gkf_step_on_tape(net, &mut tape, post, &nodes, y, model, dt, opts)?;
    Ok((tape.value(out).clone(), hidden_from_tape(&tape, &next)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{LinearModel, ModelKind, MotionModel};
    use rand::Rng;

    const OPTS: StepOptions = StepOptions { flip_heading: true };

    fn small_cfg() -> GainNetConfig {
        GainNetConfig {
            hidden_cap: 12,
            ..Default::default()
        }
    }

    fn ctra_state() -> DVector<f64> {
        DVector::from_vec(vec![1.0, 2.0, 0.5, 1.8, 4.2, 1.5, 5.0, 0.2, 0.3, 0.05])
    }

    #[test]
    fn default_sizes() {
        let arch = GainArch::new(10, 7, &GainNetConfig::default());
        assert_eq!((arch.q_hidden, arch.p_hidden, arch.s_hidden, arch.head_hidden), (200, 200, 98, 140));
        let arch = GainArch::new(1, 1, &GainNetConfig::default());
        assert_eq!((arch.q_hidden, arch.s_hidden), (2, 2));
    }

    #[test]
    fn zero_network_emits_zero_gain() {
        let net = GainNetwork::zeroed(GainArch::new(10, 7, &small_cfg())).unwrap();
        let m = MotionModel::new(ModelKind::Ctra);
        let x = ctra_state();
        let mut y = m.observe(&x);
        y[0] += 0.7;
        let feats = compute_features(&net.initial_hidden(), &x, &y, &m, true);
        let (k, _) = net.compute_gain(&net.initial_hidden(), &feats).unwrap();
        assert_eq!(k, DMatrix::zeros(10, 7));
        let (post, _) = gkf_step(&net, &x, &net.initial_hidden(), Some(&y), &m, 0.5, OPTS).unwrap();
        assert_eq!(post, m.predict(&x, 0.5));
    }

    #[test]
    fn fresh_track_features() {
        let m = MotionModel::new(ModelKind::Ctra);
        let net = GainNetwork::new(GainArch::new(10, 7, &small_cfg()), 1).unwrap();
        let prior = ctra_state();
        let mut y = m.observe(&prior);
        y[1] -= 0.4;
        let f = compute_features(&net.initial_hidden(), &prior, &y, &m, true);
        assert_eq!(f.dx_update, DVector::zeros(10));
        assert_eq!(f.dx_evolution, DVector::zeros(10));
        assert_eq!(f.dy_obs, DVector::zeros(7));
        assert!((f.dy_innovation[1] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn scripted_feature_trace() {
        // hand-set history of a scalar random walk
        let m = LinearModel::scalar_random_walk();
        let v = |x: f64| DVector::from_element(1, x);
        let hidden = TrackHidden {
            h_q: v(0.0),
            h_p: v(0.0),
            h_s: v(0.0),
            last_posterior: Some(v(1.5)),
            last_prior: Some(v(1.2)),
            prev_posterior: Some(v(0.9)),
            last_observation: Some(v(1.7)),
        };
        let f = compute_features(&hidden, &v(1.5), &v(2.1), &m, false);
        assert!((f.dx_update[0] - 0.3).abs() < 1e-12);
        assert!((f.dx_evolution[0] - 0.6).abs() < 1e-12);
        assert!((f.dy_obs[0] - 0.4).abs() < 1e-12);
        assert!((f.dy_innovation[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn stationary_features_vanish() {
        let m = MotionModel::new(ModelKind::Ctra);
        let net = GainNetwork::new(GainArch::new(10, 7, &small_cfg()), 2).unwrap();
        let mut x = ctra_state();
        x[6] = 0.0;
        x[7] = 0.0;
        x[9] = 0.0;
        let y = m.observe(&x);
        let (mut post, mut hid) = (x.clone(), net.initial_hidden());
        for _ in 0..4 {
            let r = gkf_step(&net, &post, &hid, Some(&y), &m, 0.5, OPTS).unwrap();
            post = r.0;
            hid = r.1;
        }
        let f = compute_features(&hid, &m.predict(&post, 0.5), &y, &m, true);
        for v in [&f.dx_update, &f.dx_evolution] {
            assert!(v.amax() < 1e-12);
        }
        assert!(f.dy_obs.amax() < 1e-12 && f.dy_innovation.amax() < 1e-12);
    }

    #[test]
    fn zero_innovation_keeps_prior() {
        let m = MotionModel::new(ModelKind::Ctra);
        let net = GainNetwork::new(GainArch::new(10, 7, &small_cfg()), 3).unwrap();
        let x = ctra_state();
        let prior = m.predict(&x, 0.5);
        let y = m.observe(&prior);
        let (post, _) = gkf_step(&net, &x, &net.initial_hidden(), Some(&y), &m, 0.5, OPTS).unwrap();
        assert!((post - prior).amax() < 1e-12);
    }

    #[test]
    fn hand_set_gain_update() {
        // scalar model with the head forced to emit K = 0.25
        let m = LinearModel::scalar_random_walk();
        let mut net = GainNetwork::zeroed(GainArch::new(1, 1, &GainNetConfig::default())).unwrap();
        net.params.get_mut(net.head_out.bias)[(0, 0)] = 0.25;
        let x0 = DVector::from_element(1, 2.0);
        let y1 = DVector::from_element(1, 3.0);
        let (p1, h1) = gkf_step(&net, &x0, &net.initial_hidden(), Some(&y1), &m, 1.0, OPTS).unwrap();
        assert_eq!(p1[0], 2.0 + 0.25 * 1.0);
        let y2 = DVector::from_element(1, 1.0);
        let (p2, _) = gkf_step(&net, &p1, &h1, Some(&y2), &m, 1.0, OPTS).unwrap();
        assert_eq!(p2[0], 2.25 + 0.25 * (1.0 - 2.25));
    }

    #[test]
    fn coasting_carries_hidden() {
        let m = MotionModel::new(ModelKind::Ctra);
        let net = GainNetwork::new(GainArch::new(10, 7, &small_cfg()), 4).unwrap();
        let x = ctra_state();
        let mut y = m.observe(&x);
        y[0] += 0.3;
        let (p1, h1) = gkf_step(&net, &x, &net.initial_hidden(), Some(&y), &m, 0.5, OPTS).unwrap();
        let (p2, h2) = gkf_step(&net, &p1, &h1, None, &m, 0.5, OPTS).unwrap();
        assert_eq!(p2, m.predict(&p1, 0.5));
        assert_eq!((&h2.h_q, &h2.h_p, &h2.h_s), (&h1.h_q, &h1.h_p, &h1.h_s));
        assert_eq!(h2.last_observation, h1.last_observation);
    }

    #[test]
    fn gain_is_pure() {
        let m = MotionModel::new(ModelKind::Bicycle);
        let net = GainNetwork::new(GainArch::new(10, 7, &small_cfg()), 5).unwrap();
        let x = ctra_state();
        let mut y = m.observe(&x);
        y[2] += 0.1;
        let f = compute_features(&net.initial_hidden(), &x, &y, &m, true);
        let a = net.compute_gain(&net.initial_hidden(), &f).unwrap();
        let b = net.compute_gain(&net.initial_hidden(), &f).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn interleaved_tracks_are_isolated() {
        let m = MotionModel::new(ModelKind::Ctra);
        let net = GainNetwork::new(GainArch::new(10, 7, &small_cfg()), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let obs: Vec<Vec<DVector<f64>>> = (0..2)
            .map(|_| {
                (0..6)
                    .map(|_| m.observe(&ctra_state()).map(|v| v + rng.random_range(-0.3..0.3)))
                    .collect()
            })
            .collect();
        let run_alone = |k: usize| {
            let (mut p, mut h) = (ctra_state(), net.initial_hidden());
            let mut out = vec![];
            for y in &obs[k] {
                (p, h) = gkf_step(&net, &p, &h, Some(y), &m, 0.5, OPTS).unwrap();
                out.push(p.clone());
            }
            out
        };
        let alone = [run_alone(0), run_alone(1)];
        let mut states = [(ctra_state(), net.initial_hidden()), (ctra_state(), net.initial_hidden())];
        for t in 0..6 {
            for (k, st) in states.iter_mut().enumerate() {
                let (p, h) = gkf_step(&net, &st.0, &st.1, Some(&obs[k][t]), &m, 0.5, OPTS).unwrap();
                assert_eq!(p, alone[k][t]);
                *st = (p, h);
            }
        }
    }

    #[test]
    fn posterior_heading_wrapped() {
        let m = MotionModel::new(ModelKind::Ctra);
        let net = GainNetwork::new(GainArch::new(10, 7, &small_cfg()), 7).unwrap();
        let mut x = ctra_state();
        x[8] = 3.1;
        x[9] = 0.5;
        let mut y = m.observe(&x);
        y[6] = -3.1;
        let (mut p, mut h) = (x, net.initial_hidden());
        for _ in 0..10 {
            (p, h) = gkf_step(&net, &p, &h, Some(&y), &m, 0.5, OPTS).unwrap();
            assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&p[8]));
        }
    }

    #[test]
    fn checkpoint_validation() {
        let arch = GainArch::new(10, 7, &small_cfg());
        let net = GainNetwork::new(arch.clone(), 8).unwrap();
        let ck = net.to_checkpoint("ctra", None);
        let back = GainNetwork::from_checkpoint(&ck, &arch, "ctra").unwrap();
        assert_eq!(back.params, net.params);
        assert!(GainNetwork::from_checkpoint(&ck, &arch, "bicycle").is_err());
        let other = GainArch::new(10, 7, &GainNetConfig { hidden_cap: 13, ..small_cfg() });
        assert!(GainNetwork::from_checkpoint(&ck, &other, "ctra").is_err());
    }
}
