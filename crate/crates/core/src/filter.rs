//! Extended Kalman filter. With a linear [`StateSpace`] it is the plain KF.
//!
//! The covariance update uses the subtractive form `P - K S K^T`, followed by
//! symmetrization and a jitter guard when the result is not positive definite.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::geometry::wrap_angle;
use crate::motion::StateSpace;

pub const JITTER: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub process_noise: DMatrix<f64>,
    pub measurement_noise: DMatrix<f64>,
    /// Set when the last operation had to regularize a matrix.
    pub regularized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub predicted_observation: DVector<f64>,
    pub innovation_covariance: DMatrix<f64>,
    pub process_noise: DMatrix<f64>,
    pub measurement_noise: DMatrix<f64>,
    pub regularized: bool,
}

impl FilterState {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        FilterState {
            mean,
            covariance,
            process_noise: q,
            measurement_noise: r,
            regularized: false,
        }
    }

    /// Filter state with diagonal covariance and noise matrices.
    pub fn diagonal(mean: DVector<f64>, p: &DVector<f64>, q: &DVector<f64>, r: &DVector<f64>) -> Self {
        Self::new(
            mean,
            DMatrix::from_diagonal(p),
            DMatrix::from_diagonal(q),
            DMatrix::from_diagonal(r),
        )
    }
}

impl PriorState {
    /// Coasting: the prior becomes the posterior.
    pub fn into_posterior(self) -> FilterState {
        FilterState {
            mean: self.mean,
            covariance: self.covariance,
            process_noise: self.process_noise,
            measurement_noise: self.measurement_noise,
            regularized: self.regularized,
        }
    }
}

/// Symmetrizes `m` and adds `JITTER * I` until it admits a Cholesky factor.
/// Returns whether jitter was needed.
fn stabilize(m: &mut DMatrix<f64>) -> bool {
    let sym = (&*m + m.transpose()) * 0.5;
    *m = sym;
    if Cholesky::new(m.clone()).is_some() {
        return false;
    }
    let n = m.nrows();
    let mut jitter = JITTER;
    for _ in 0..12 {
        let candidate = &*m + DMatrix::identity(n, n) * jitter;
        if Cholesky::new(candidate.clone()).is_some() {
            *m = candidate;
            return true;
        }
        jitter *= 10.0;
    }
    *m += DMatrix::identity(n, n) * jitter;
    true
}

/// Solves `s X = rhs` for symmetric `s`, adding growing jitter when `s` is
/// not positive definite. Returns whether jitter was needed.
fn regularized_solve(s: &DMatrix<f64>, rhs: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = s.nrows();
    let mut jitter = 0.0;
    loop {
        let candidate = if jitter == 0.0 {
            s.clone()
        } else {
            s + DMatrix::identity(n, n) * jitter
        };
        if Cholesky::new(candidate.clone()).is_some() {
            if let Some(x) = candidate.lu().solve(rhs) {
                return (x, jitter > 0.0);
            }
        }
        jitter = if jitter == 0.0 { JITTER } else { jitter * 10.0 };
        assert!(jitter.is_finite(), "innovation covariance cannot be regularized");
    }
}

/// Observation residual `y - y_pred` with the heading component wrapped.
///
/// With `flip_heading`, a heading residual larger than a quarter turn is
/// treated as a reversed detection and rotated by pi.
pub fn innovation<S: StateSpace + ?Sized>(
    model: &S,
    y: &DVector<f64>,
    y_pred: &DVector<f64>,
    flip_heading: bool,
) -> DVector<f64> {
    let mut r = y - y_pred;
    if let Some(i) = model.obs_heading() {
        r[i] = wrap_angle(r[i]);
        if flip_heading && r[i].abs() > PI / 2.0 {
            r[i] = wrap_angle(r[i] + PI);
        }
    }
    r
}

pub fn ekf_predict<S: StateSpace + ?Sized>(fs: &FilterState, model: &S, dt: f64) -> PriorState {
    let jf = model.jacobian_f(&fs.mean, dt);
    let mean = model.predict(&fs.mean, dt);
    let mut covariance = &jf * &fs.covariance * jf.transpose() + &fs.process_noise;
    let mut regularized = stabilize(&mut covariance);
    let jh = model.jacobian_h(&mean);
    let mut s = &jh * &covariance * jh.transpose() + &fs.measurement_noise;
    regularized |= stabilize(&mut s);
    PriorState {
        predicted_observation: model.observe(&mean),
        mean,
        covariance,
        innovation_covariance: s,
        process_noise: fs.process_noise.clone(),
        measurement_noise: fs.measurement_noise.clone(),
        regularized,
    }
}

/// Kalman gain `P H^T S^-1` of a prior.
pub fn kalman_gain<S: StateSpace + ?Sized>(prior: &PriorState, model: &S) -> (DMatrix<f64>, bool) {
    let jh = model.jacobian_h(&prior.mean);
    // S is symmetric, so K^T = S^-1 (H P)
    let (kt, regularized) = regularized_solve(&prior.innovation_covariance, &(&jh * &prior.covariance));
    (kt.transpose(), regularized)
}

pub fn ekf_update<S: StateSpace + ?Sized>(
    prior: &PriorState,
    y: &DVector<f64>,
    model: &S,
    flip_heading: bool,
) -> FilterState {
    let (gain, mut regularized) = kalman_gain(prior, model);
    let resid = innovation(model, y, &prior.predicted_observation, flip_heading);
    let mut mean = &prior.mean + &gain * resid;
    if let Some(i) = model.state_heading() {
        mean[i] = wrap_angle(mean[i]);
    }
    let mut covariance = &prior.covariance - &gain * &prior.innovation_covariance * gain.transpose();
    regularized |= stabilize(&mut covariance);
    FilterState {
        mean,
        covariance,
        process_noise: prior.process_noise.clone(),
        measurement_noise: prior.measurement_noise.clone(),
        regularized,
    }
}

/// One predict step, followed by an update when an observation is present.
pub fn ekf_step<S: StateSpace + ?Sized>(
    fs: &FilterState,
    y: Option<&DVector<f64>>,
    model: &S,
    dt: f64,
    flip_heading: bool,
) -> FilterState {
    let prior = ekf_predict(fs, model, dt);
    match y {
        Some(y) => ekf_update(&prior, y, model, flip_heading),
        None => prior.into_posterior(),
    }
}
