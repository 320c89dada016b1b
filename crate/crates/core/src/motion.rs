//! State-space models shared by the classical filters, the learned filter and
//! the scenario simulator.
//!
//! Every box model observes `(x, y, z, w, l, h, yaw)`. State layouts:
//!
//! | kind    | layout                                   | dim |
//! |---------|------------------------------------------|-----|
//! | CV      | x y z w l h yaw vx vy                    | 9   |
//! | CA      | x y z w l h yaw vx vy ax ay              | 11  |
//! | CTRA    | x y z w l h v a yaw omega                | 10  |
//! | Bicycle | as CTRA, integrated about the rear axle  | 10  |

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, Box3D};

pub const OBS_DIM: usize = 7;
/// Observation index of the heading.
pub const OBS_YAW: usize = 6;

/// Anything the filters can run on: a transition, an observation, and their
/// Jacobians. `dt` may be zero (identity transition).
pub trait StateSpace {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn predict(&self, x: &DVector<f64>, dt: f64) -> DVector<f64>;
    fn jacobian_f(&self, x: &DVector<f64>, dt: f64) -> DMatrix<f64>;
    fn observe(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian_h(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Index of the heading in the state, if any.
    fn state_heading(&self) -> Option<usize> {
        None
    }
    /// Index of the heading in the observation, if any.
    fn obs_heading(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cv,
    Ca,
    Ctra,
    Bicycle,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::Cv => "cv",
            ModelKind::Ca => "ca",
            ModelKind::Ctra => "ctra",
            ModelKind::Bicycle => "bicycle",
        };
        f.write_str(s)
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cv" => Ok(ModelKind::Cv),
            "ca" => Ok(ModelKind::Ca),
            "ctra" => Ok(ModelKind::Ctra),
            "bicycle" => Ok(ModelKind::Bicycle),
            other => Err(format!("unknown motion model `{other}`")),
        }
    }
}

/// CTRA layout indices.
pub mod ctra {
    pub const V: usize = 6;
    pub const A: usize = 7;
    pub const YAW: usize = 8;
    pub const OMEGA: usize = 9;
}

/// CV / CA layout indices.
pub mod cv {
    pub const YAW: usize = 6;
    pub const VX: usize = 7;
    pub const VY: usize = 8;
    pub const AX: usize = 9;
    pub const AY: usize = 10;
}

/// Below this turn rate the CTRA and bicycle integrals use their `omega -> 0` limit.
pub const CTRA_OMEGA_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionModel {
    pub kind: ModelKind,
    /// Rear-axle offset as a fraction of half the length (bicycle only).
    pub bicycle_beta: f64,
}

impl MotionModel {
    pub fn new(kind: ModelKind) -> Self {
        MotionModel {
            kind,
            bicycle_beta: 0.5,
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            ModelKind::Cv => 9,
            ModelKind::Ca => 11,
            ModelKind::Ctra | ModelKind::Bicycle => 10,
        }
    }

    fn yaw_index(&self) -> usize {
        match self.kind {
            ModelKind::Cv | ModelKind::Ca => cv::YAW,
            ModelKind::Ctra | ModelKind::Bicycle => ctra::YAW,
        }
    }

    /// Diagonal of the default process noise.
    pub fn default_process_noise(&self) -> DVector<f64> {
        let mut q = vec![0.05, 0.05, 0.05, 0.01, 0.01, 0.01];
        match self.kind {
            ModelKind::Cv => q.extend([0.01, 0.5, 0.5]),
            ModelKind::Ca => q.extend([0.01, 0.3, 0.3, 0.5, 0.5]),
            ModelKind::Ctra | ModelKind::Bicycle => q.extend([0.5, 0.5, 0.01, 0.05]),
        }
        DVector::from_vec(q)
    }

    /// Diagonal of the default measurement noise.
    pub fn default_measurement_noise(&self) -> DVector<f64> {
        DVector::from_vec(vec![0.5, 0.5, 0.5, 0.05, 0.05, 0.05, 0.05])
    }

    /// Diagonal of the covariance given to a freshly initialized track.
    pub fn default_initial_covariance(&self) -> DVector<f64> {
        let mut p = vec![1.0, 1.0, 1.0, 0.25, 0.25, 0.25];
        match self.kind {
            ModelKind::Cv => p.extend([0.25, 4.0, 4.0]),
            ModelKind::Ca => p.extend([0.25, 4.0, 4.0, 4.0, 4.0]),
            ModelKind::Ctra | ModelKind::Bicycle => p.extend([4.0, 4.0, 0.25, 1.0]),
        }
        DVector::from_vec(p)
    }

    /// State from a box and a ground-plane velocity; unobserved higher-order
    /// terms start at zero.
    pub fn state_from_box(&self, b: &Box3D, velocity: [f64; 2]) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim());
        x[0] = b.center[0];
        x[1] = b.center[1];
        x[2] = b.center[2];
        x[3] = b.size[0];
        x[4] = b.size[1];
        x[5] = b.size[2];
        match self.kind {
            ModelKind::Cv | ModelKind::Ca => {
                x[cv::YAW] = b.yaw;
                x[cv::VX] = velocity[0];
                x[cv::VY] = velocity[1];
            }
            ModelKind::Ctra | ModelKind::Bicycle => {
                x[ctra::YAW] = b.yaw;
                let (s, c) = b.yaw.sin_cos();
                // signed speed along the heading
                x[ctra::V] = velocity[0] * c + velocity[1] * s;
            }
        }
        x
    }

    /// Ground-plane velocity implied by a state.
    pub fn velocity(&self, x: &DVector<f64>) -> [f64; 2] {
        match self.kind {
            ModelKind::Cv | ModelKind::Ca => [x[cv::VX], x[cv::VY]],
            ModelKind::Ctra | ModelKind::Bicycle => {
                let (s, c) = x[ctra::YAW].sin_cos();
                [x[ctra::V] * c, x[ctra::V] * s]
            }
        }
    }

    /// Box described by the observed part of the state. Sizes are floored at
    /// 1 cm so a diverging estimate still yields a valid box.
    pub fn state_to_box(&self, x: &DVector<f64>) -> Box3D {
        obs_to_box(&self.observe(x))
    }
}

/// Box from an observation vector `(x, y, z, w, l, h, yaw)`.
pub fn obs_to_box(y: &DVector<f64>) -> Box3D {
    let s = |v: f64| if v.is_finite() { v.max(0.01) } else { 0.01 };
    let f = |v: f64| if v.is_finite() { v } else { 0.0 };
    Box3D::from_parts(f(y[0]), f(y[1]), f(y[2]), s(y[3]), s(y[4]), s(y[5]), f(y[6]))
        .expect("sanitized box is valid")
}

/// Observation vector of a box.
pub fn box_to_obs(b: &Box3D) -> DVector<f64> {
    DVector::from_vec(vec![
        b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw,
    ])
}

/// Moments `J_k = int_0^T s^k e^{i(theta + omega s)} ds` for k = 0..=2.
///
/// Real parts are the cosine moments, imaginary parts the sine moments.
fn turn_moments(theta: f64, omega: f64, t: f64) -> [Complex64; 3] {
    let rot = Complex64::from_polar(1.0, theta);
    if omega.abs() < CTRA_OMEGA_EPS {
        return [rot * t, rot * (t * t / 2.0), rot * (t * t * t / 3.0)];
    }
    let wt = omega * t;
    if wt.abs() < 0.5 {
        // power series in (i omega s); converges fast for small |omega t|
        let mut out = [Complex64::new(0.0, 0.0); 3];
        for (k, slot) in out.iter_mut().enumerate() {
            let mut coef = Complex64::new(1.0, 0.0);
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..30 {
                let term = coef * t.powi((k + j + 1) as i32) / (k + j + 1) as f64;
                acc += term;
                if term.norm() < 1e-18 * acc.norm() {
                    break;
                }
                coef = coef * Complex64::new(0.0, omega) / (j + 1) as f64;
            }
            *slot = rot * acc;
        }
        return out;
    }
    // closed form via integration by parts
    let end = Complex64::from_polar(1.0, theta + wt);
    let iw = Complex64::new(0.0, omega);
    let j0 = (end - rot) / iw;
    let j1 = (end * t - j0) / iw;
    let j2 = (end * (t * t) - j1 * 2.0) / iw;
    [j0, j1, j2]
}

impl MotionModel {
    /// Planar displacement of the CTRA point and its partials w.r.t.
    /// `(v, a, yaw, omega)` as `[[dx..], [dy..]]`.
    fn ctra_displacement(&self, v: f64, a: f64, theta: f64, omega: f64, dt: f64) -> ([f64; 2], [[f64; 4]; 2]) {
        let [j0, j1, j2] = turn_moments(theta, omega, dt);
        let d = j0 * v + j1 * a;
        // d/domega of J_k is i J_{k+1}
        let dw = (j1 * v + j2 * a) * Complex64::new(0.0, 1.0);
        let disp = [d.re, d.im];
        let jac = [[j0.re, j1.re, -d.im, dw.re], [j0.im, j1.im, d.re, dw.im]];
        (disp, jac)
    }

    fn bicycle_offset(&self, length: f64) -> f64 {
        0.5 * self.bicycle_beta * length
    }
}

impl StateSpace for MotionModel {
    fn state_dim(&self) -> usize {
        self.dim()
    }

    fn obs_dim(&self) -> usize {
        OBS_DIM
    }

    fn predict(&self, x: &DVector<f64>, dt: f64) -> DVector<f64> {
        let mut out = x.clone();
        match self.kind {
            ModelKind::Cv => {
                out[0] += x[cv::VX] * dt;
                out[1] += x[cv::VY] * dt;
            }
            ModelKind::Ca => {
                let half = 0.5 * dt * dt;
                out[0] += x[cv::VX] * dt + x[cv::AX] * half;
                out[1] += x[cv::VY] * dt + x[cv::AY] * half;
                out[cv::VX] += x[cv::AX] * dt;
                out[cv::VY] += x[cv::AY] * dt;
            }
            ModelKind::Ctra | ModelKind::Bicycle => {
                let (v, a, th, w) = (x[ctra::V], x[ctra::A], x[ctra::YAW], x[ctra::OMEGA]);
                let (disp, _) = self.ctra_displacement(v, a, th, w, dt);
                out[0] += disp[0];
                out[1] += disp[1];
                if self.kind == ModelKind::Bicycle {
                    let d = self.bicycle_offset(x[4]);
                    let th2 = th + w * dt;
                    out[0] += d * (th2.cos() - th.cos());
                    out[1] += d * (th2.sin() - th.sin());
                }
                out[ctra::V] += a * dt;
                out[ctra::YAW] = th + w * dt;
            }
        }
        let yi = self.yaw_index();
        out[yi] = wrap_angle(out[yi]);
        out
    }

    fn jacobian_f(&self, x: &DVector<f64>, dt: f64) -> DMatrix<f64> {
        let n = self.dim();
        let mut jf = DMatrix::identity(n, n);
        match self.kind {
            ModelKind::Cv => {
                jf[(0, cv::VX)] = dt;
                jf[(1, cv::VY)] = dt;
            }
            ModelKind::Ca => {
                let half = 0.5 * dt * dt;
                jf[(0, cv::VX)] = dt;
                jf[(1, cv::VY)] = dt;
                jf[(0, cv::AX)] = half;
                jf[(1, cv::AY)] = half;
                jf[(cv::VX, cv::AX)] = dt;
                jf[(cv::VY, cv::AY)] = dt;
            }
            ModelKind::Ctra | ModelKind::Bicycle => {
                let (v, a, th, w) = (x[ctra::V], x[ctra::A], x[ctra::YAW], x[ctra::OMEGA]);
                let (_, dj) = self.ctra_displacement(v, a, th, w, dt);
                let cols = [ctra::V, ctra::A, ctra::YAW, ctra::OMEGA];
                for (row, partials) in dj.iter().enumerate() {
                    for (c, p) in cols.iter().zip(partials) {
                        jf[(row, *c)] += p;
                    }
                }
                if self.kind == ModelKind::Bicycle {
                    let d = self.bicycle_offset(x[4]);
                    let th2 = th + w * dt;
                    let (s1, c1) = th.sin_cos();
                    let (s2, c2) = th2.sin_cos();
                    jf[(0, ctra::YAW)] += d * (s1 - s2);
                    jf[(1, ctra::YAW)] += d * (c2 - c1);
                    jf[(0, ctra::OMEGA)] += -d * s2 * dt;
                    jf[(1, ctra::OMEGA)] += d * c2 * dt;
                    let dd = 0.5 * self.bicycle_beta;
                    jf[(0, 4)] += dd * (c2 - c1);
                    jf[(1, 4)] += dd * (s2 - s1);
                }
                jf[(ctra::V, ctra::A)] = dt;
                jf[(ctra::YAW, ctra::OMEGA)] = dt;
            }
        }
        jf
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(OBS_DIM);
        for i in 0..6 {
            y[i] = x[i];
        }
        y[OBS_YAW] = x[self.yaw_index()];
        y
    }

    fn jacobian_h(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let mut jh = DMatrix::zeros(OBS_DIM, self.dim());
        for i in 0..6 {
            jh[(i, i)] = 1.0;
        }
        jh[(OBS_YAW, self.yaw_index())] = 1.0;
        jh
    }

    fn state_heading(&self) -> Option<usize> {
        Some(self.yaw_index())
    }

    fn obs_heading(&self) -> Option<usize> {
        Some(OBS_YAW)
    }
}

/// A linear-Gaussian model `x' = F x`, `y = H x`. `F` does not depend on `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub transition: DMatrix<f64>,
    pub observation: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(transition: DMatrix<f64>, observation: DMatrix<f64>) -> Self {
        assert_eq!(transition.nrows(), transition.ncols());
        assert_eq!(observation.ncols(), transition.ncols());
        LinearModel {
            transition,
            observation,
        }
    }

    /// Scalar random walk observed directly.
    pub fn scalar_random_walk() -> Self {
        Self::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1))
    }
}

impl StateSpace for LinearModel {
    fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.observation.nrows()
    }

    fn predict(&self, x: &DVector<f64>, _dt: f64) -> DVector<f64> {
        &self.transition * x
    }

    fn jacobian_f(&self, _x: &DVector<f64>, _dt: f64) -> DMatrix<f64> {
        self.transition.clone()
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.observation * x
    }

    fn jacobian_h(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.observation.clone()
    }
}
