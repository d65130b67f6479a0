//! Car-following instance: a leader at constant speed and an ego vehicle
//! whose acceleration is the control input. The state is the error
//! `x = [ego_pos − leader_pos − δ, ego_vel − leader_vel]`, discretized with
//! step `h`. Perception switches between a misdetection mode (position channel
//! lost) and a nominal mode.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Controller, PemAdmModel, PerceptionMode, TransitionMatrix};
use crate::sim::{BiasSignal, Policy, Trajectory};

/// Gains used as the reference stabilizing controller for the default instance.
pub const REFERENCE_SSC_GAINS: [[f64; 2]; 2] = [[0.0, -101.0], [-0.45, -100.0]];
/// Gains used as the reference guaranteed-cost controller for the default instance.
pub const REFERENCE_SOGCC_GAINS: [[f64; 2]; 2] = [[0.0, -3.6], [-1.22, -2.66]];

pub fn reference_ssc_controller() -> Controller {
    Controller::from_rows(&[&REFERENCE_SSC_GAINS[0], &REFERENCE_SSC_GAINS[1]])
}

pub fn reference_sogcc_controller() -> Controller {
    Controller::from_rows(&[&REFERENCE_SOGCC_GAINS[0], &REFERENCE_SOGCC_GAINS[1]])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarFollowingParams {
    /// Sampling interval in seconds.
    pub h: f64,
    /// Desired ego-minus-leader position offset (negative: ego behind).
    pub delta_d: f64,
    pub d00: f64,
    pub d01: f64,
    pub d10: f64,
    pub d11: f64,
    pub e00: f64,
    pub e01: f64,
    pub e10: f64,
    pub e11: f64,
    pub p00: f64,
    pub p01: f64,
    pub p10: f64,
    pub p11: f64,
    /// `[position m, velocity m/s]`
    pub ego_init: [f64; 2],
    pub leader_init: [f64; 2],
    pub bias: BiasSignal,
    /// Defaults to the largest norm the bias signal attains.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_bound: Option<f64>,
}

impl Default for CarFollowingParams {
    fn default() -> Self {
        Self {
            h: 0.01,
            delta_d: -5.0,
            d00: 0.01,
            d01: 0.05,
            d10: 0.01,
            d11: 0.05,
            e00: 0.01,
            e01: 0.01,
            e10: 0.01,
            e11: 0.01,
            p00: 0.7,
            p01: 0.3,
            p10: 0.2,
            p11: 0.8,
            ego_init: [0.0, 1.0],
            leader_init: [10.0, 5.0],
            bias: BiasSignal::Constant(vec![-1.0, -1.0]),
            bias_bound: None,
        }
    }
}

impl CarFollowingParams {
    pub fn leader_speed(&self) -> f64 {
        self.leader_init[1]
    }

    pub fn initial_state(&self) -> DVector<f64> {
        DVector::from_vec(vec![
            self.ego_init[0] - self.leader_init[0] - self.delta_d,
            self.ego_init[1] - self.leader_init[1],
        ])
    }
}

fn diag2(a: f64, b: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_vec(vec![a, b]))
}

/// Error-dynamics model and initial error state.
pub fn build_car_following(p: &CarFollowingParams) -> Result<(PemAdmModel, DVector<f64>)> {
    if !(p.h > 0.0 && p.h.is_finite()) {
        return Err(Error::InvalidArgument(format!("sampling interval must be positive, got {}", p.h)));
    }
    let h = p.h;
    let transition = TransitionMatrix::from_rows(&[&[p.p00, p.p01], &[p.p10, p.p11]])?;
    let bias_bound = p.bias_bound.unwrap_or_else(|| sup_norm(&p.bias));
    let model = PemAdmModel::new(
        DMatrix::from_row_slice(2, 2, &[1.0, h, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, h]),
        vec![
            PerceptionMode::new(diag2(0.0, 1.0), diag2(p.d00, p.d01), diag2(p.e00, p.e01)),
            PerceptionMode::new(diag2(1.0, 1.0), diag2(p.d10, p.d11), diag2(p.e10, p.e11)),
        ],
        transition,
        bias_bound,
    )?;
    Ok((model, p.initial_state()))
}

/// Largest norm the signal can take.
pub fn sup_norm(bias: &BiasSignal) -> f64 {
    match bias {
        BiasSignal::Zero => 0.0,
        BiasSignal::Constant(v) => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        BiasSignal::Sinusoid { amplitude, .. } => amplitude.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// Intelligent driver model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams {
    /// Desired speed, m/s.
    pub v0: f64,
    /// Time headway, s.
    #[serde(rename = "T")]
    pub time_headway: f64,
    pub a_max: f64,
    pub b_comf: f64,
    /// Minimum gap, m.
    pub s0: f64,
    pub delta_exp: f64,
    /// Hardest braking the vehicle can apply, m/s².
    #[serde(default = "default_b_hard")]
    pub b_hard: f64,
    #[serde(default)]
    pub misdetection: MisdetectionHandling,
}

fn default_b_hard() -> f64 {
    9.0
}

/// How the IDM treats the misdetection mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisdetectionHandling {
    /// Use the measurement as delivered; the zeroed position channel reads as
    /// a gap equal to the desired offset.
    #[default]
    ZeroedChannel,
    /// No leader perceived: drive as on a free road.
    FreeRoad,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 15.0,
            time_headway: 1.0,
            a_max: 1.5,
            b_comf: 2.0,
            s0: 2.0,
            delta_exp: 4.0,
            b_hard: default_b_hard(),
            misdetection: MisdetectionHandling::ZeroedChannel,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.v0, self.time_headway, self.a_max, self.b_comf, self.s0, self.delta_exp, self.b_hard];
        if vals.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("IDM parameters must be positive".into()))
        }
    }

    /// Desired gap `s* = s0 + max(0, vT + vΔv / (2√(a b)))`.
    pub fn desired_gap(&self, v: f64, dv: f64) -> f64 {
        self.s0 + (v * self.time_headway + v * dv / (2.0 * (self.a_max * self.b_comf).sqrt())).max(0.0)
    }

    /// Free-road term `a_max (1 − (v/v0)^δ)`.
    pub fn free_road(&self, v: f64) -> f64 {
        self.a_max * (1.0 - (v.max(0.0) / self.v0).powf(self.delta_exp))
    }

    /// Unclamped IDM acceleration for speed `v`, closing speed `dv = v − v_leader`
    /// and gap `s > 0`.
    pub fn acceleration(&self, v: f64, dv: f64, s: f64) -> f64 {
        let ratio = self.desired_gap(v, dv) / s;
        self.free_road(v) - self.a_max * ratio * ratio
    }

    pub fn clamp(&self, a: f64) -> f64 {
        a.clamp(-self.b_hard, self.a_max)
    }
}

/// IDM acting on the perceived error measurement of the car-following model.
#[derive(Clone, Debug, PartialEq)]
pub struct IdmPolicy {
    pub params: IdmParams,
    pub leader_speed: f64,
    pub delta_d: f64,
}

impl IdmPolicy {
    pub fn new(params: IdmParams, scenario: &CarFollowingParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, leader_speed: scenario.leader_speed(), delta_d: scenario.delta_d })
    }

    /// Perceived `(speed, closing speed, gap)` from `y`.
    fn perceive(&self, y: &DVector<f64>) -> (f64, f64, f64) {
        let dv = y[1];
        (self.leader_speed + dv, dv, -(y[0] + self.delta_d))
    }

    fn free_road_mode(&self, mode: usize) -> bool {
        mode == 0 && self.params.misdetection == MisdetectionHandling::FreeRoad
    }
}

impl Policy for IdmPolicy {
    fn act(&self, mode: usize, y: &DVector<f64>) -> DVector<f64> {
        let (v, dv, s) = self.perceive(y);
        let a = if self.free_road_mode(mode) {
            self.params.free_road(v)
        } else if s <= 0.0 {
            -self.params.b_hard
        } else {
            self.params.acceleration(v, dv, s)
        };
        DVector::from_element(1, self.params.clamp(a))
    }

    fn flagged(&self, mode: usize, y: &DVector<f64>) -> bool {
        !self.free_road_mode(mode) && self.perceive(y).2 <= 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionMetrics {
    /// Per trial, the smallest `leader − ego` position over the stored steps.
    pub min_gap: Vec<f64>,
    pub collided: Vec<bool>,
    pub count: usize,
    pub fraction: f64,
}

/// `leader − ego` position at error state `x`.
pub fn physical_gap(x1: f64, delta_d: f64) -> f64 {
    -(x1 + delta_d)
}

/// A trial collides iff the ego position reaches the leader's at some step.
pub fn collision_metrics(trajs: &[Trajectory], params: &CarFollowingParams) -> CollisionMetrics {
    let min_gap: Vec<f64> = trajs
        .iter()
        .map(|t| t.x.iter().map(|x| physical_gap(x[0], params.delta_d)).fold(f64::INFINITY, f64::min))
        .collect();
    let collided: Vec<bool> = min_gap.iter().map(|&g| g <= 0.0).collect();
    let count = collided.iter().filter(|&&c| c).count();
    let fraction = if trajs.is_empty() { 0.0 } else { count as f64 / trajs.len() as f64 };
    CollisionMetrics { min_gap, collided, count, fraction }
}

/// Scenario file: car-following parameters plus optional IDM settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    #[serde(flatten)]
    pub car_following: CarFollowingParams,
    #[serde(default)]
    pub idm: IdmParams,
}
