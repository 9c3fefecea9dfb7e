//! Continuous-control benchmark environments as pure transition functions.
//!
//! All four tasks take a bounded continuous action, clip it to the action
//! box before integrating, and never hold hidden mutable state: a step maps
//! an [`EnvState`] and an action to a [`StepResult`]. Episode length is
//! capped by the caller at [`EnvInfo::max_episode_length`].

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::rng::RngStream;

pub const MAX_EPISODE_LENGTH: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Cartpole,
    MountainCar,
    SwingUp,
    DoublePendulum,
}

impl EnvId {
    pub const ALL: [EnvId; 4] = [
        EnvId::Cartpole,
        EnvId::MountainCar,
        EnvId::SwingUp,
        EnvId::DoublePendulum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::Cartpole => "cartpole",
            EnvId::MountainCar => "mountaincar",
            EnvId::SwingUp => "swingup",
            EnvId::DoublePendulum => "doublependulum",
        }
    }

    pub fn build(self) -> Box<dyn Environment> {
        match self {
            EnvId::Cartpole => Box::new(Cartpole),
            EnvId::MountainCar => Box::new(MountainCar),
            EnvId::SwingUp => Box::new(SwingUp),
            EnvId::DoublePendulum => Box::new(DoublePendulum),
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::UnknownEnv(s.to_string()))
    }
}

/// Looks up an environment by its registry id.
pub fn make(id: &str) -> Result<Box<dyn Environment>> {
    Ok(id.parse::<EnvId>()?.build())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvInfo {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_length: usize,
}

/// `observation` is what the policy sees; `internal` is the full simulator
/// state the dynamics integrate.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub internal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub terminal: bool,
}

pub trait Environment: Send + Sync {
    fn info(&self) -> EnvInfo;

    /// Number of unit perturbations consumed by [`Environment::initial_state`].
    fn perturbation_dim(&self) -> usize;

    /// Initial state for perturbations in `[-1, 1]`; all zeros gives the
    /// nominal start.
    fn initial_state(&self, perturbation: &[f64]) -> EnvState;

    /// Pure dynamics: advances one control interval.
    fn dynamics(&self, internal: &[f64], action: &[f64]) -> StepResult;

    /// Named physical constants, for audit tables.
    fn constants(&self) -> Vec<(&'static str, f64)>;

    fn reset(&self, rng: &mut RngStream) -> EnvState {
        let u: Vec<f64> = (0..self.perturbation_dim())
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        self.initial_state(&u)
    }

    /// Validates, clips the action to its bounds and advances the state.
    fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepResult> {
        let info = self.info();
        check_len("action", info.action_dim, action.len())?;
        check_finite("action", action)?;
        check_finite("environment state", &state.internal)?;
        let clipped: Vec<f64> = action
            .iter()
            .zip(info.action_low.iter().zip(&info.action_high))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect();
        Ok(self.dynamics(&state.internal, &clipped))
    }
}

/// One classical fourth-order Runge–Kutta step.
fn rk4<const N: usize>(x: [f64; N], dt: f64, f: impl Fn(&[f64; N]) -> [f64; N]) -> [f64; N] {
    let add = |a: &[f64; N], b: &[f64; N], s: f64| -> [f64; N] {
        let mut out = *a;
        for (o, v) in out.iter_mut().zip(b) {
            *o += s * v;
        }
        out
    };
    let k1 = f(&x);
    let k2 = f(&add(&x, &k1, dt / 2.0));
    let k3 = f(&add(&x, &k2, dt / 2.0));
    let k4 = f(&add(&x, &k3, dt));
    let mut out = x;
    for i in 0..N {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

// Cart-pole constants shared by the balance and swing-up tasks.
const GRAVITY: f64 = 9.8;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const POLE_HALF_LENGTH: f64 = 0.5;
const FORCE_SCALE: f64 = 10.0;

/// Cart-pole accelerations `(x_dd, theta_dd)`; `theta = 0` is upright.
fn cartpole_accel(theta: f64, theta_dot: f64, force: f64) -> (f64, f64) {
    let total = CART_MASS + POLE_MASS;
    let (sin, cos) = theta.sin_cos();
    let temp = (force + POLE_MASS * POLE_HALF_LENGTH * theta_dot * theta_dot * sin) / total;
    let theta_acc = (GRAVITY * sin - cos * temp)
        / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total));
    let x_acc = temp - POLE_MASS * POLE_HALF_LENGTH * theta_acc * cos / total;
    (x_acc, theta_acc)
}

/// Total mechanical energy of the cart-pole (uniform rod), zero potential at
/// the pivot height. State is `[x, x_dot, theta, theta_dot]`.
pub fn cartpole_energy(s: &[f64]) -> f64 {
    let (x_dot, theta, theta_dot) = (s[1], s[2], s[3]);
    let (m, l) = (POLE_MASS, POLE_HALF_LENGTH);
    0.5 * (CART_MASS + m) * x_dot * x_dot
        + m * l * theta.cos() * x_dot * theta_dot
        + (2.0 / 3.0) * m * l * l * theta_dot * theta_dot
        + m * GRAVITY * l * theta.cos()
}

/// Balance task: Euler integration at 0.02 s, +1 per step inside the
/// angle/track window, terminal once outside it.
#[derive(Debug, Clone, Copy)]
pub struct Cartpole;

impl Cartpole {
    pub const DT: f64 = 0.02;
    pub const ANGLE_LIMIT: f64 = 0.2;
    pub const TRACK_LIMIT: f64 = 2.4;
    pub const INIT_NOISE: f64 = 0.05;
}

impl Environment for Cartpole {
    fn info(&self) -> EnvInfo {
        EnvInfo {
            obs_dim: 4,
            action_dim: 1,
            action_low: vec![-1.0],
            action_high: vec![1.0],
            max_episode_length: MAX_EPISODE_LENGTH,
        }
    }

    fn perturbation_dim(&self) -> usize {
        4
    }

    fn initial_state(&self, u: &[f64]) -> EnvState {
        let s: Vec<f64> = u.iter().map(|v| Self::INIT_NOISE * v).collect();
        EnvState {
            observation: s.clone(),
            internal: s,
        }
    }

    fn dynamics(&self, s: &[f64], action: &[f64]) -> StepResult {
        let (x, x_dot, theta, theta_dot) = (s[0], s[1], s[2], s[3]);
        let (x_acc, theta_acc) = cartpole_accel(theta, theta_dot, FORCE_SCALE * action[0]);
        let next = vec![
            x + Self::DT * x_dot,
            x_dot + Self::DT * x_acc,
            theta + Self::DT * theta_dot,
            theta_dot + Self::DT * theta_acc,
        ];
        let inside = next[0].abs() < Self::TRACK_LIMIT && next[2].abs() < Self::ANGLE_LIMIT;
        StepResult {
            next_state: EnvState {
                observation: next.clone(),
                internal: next,
            },
            reward: if inside { 1.0 } else { 0.0 },
            terminal: !inside,
        }
    }

    fn constants(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("cart_mass_kg", CART_MASS),
            ("pole_mass_kg", POLE_MASS),
            ("pole_half_length_m", POLE_HALF_LENGTH),
            ("gravity_m_s2", GRAVITY),
            ("force_scale_n", FORCE_SCALE),
            ("dt_s", Self::DT),
            ("angle_limit_rad", Self::ANGLE_LIMIT),
            ("track_limit_m", Self::TRACK_LIMIT),
            ("init_noise", Self::INIT_NOISE),
        ]
    }
}

/// Swing-up: the pole starts hanging and each step on the track pays
/// `(1 + cos(theta)) / 2`, from 0 hanging down to 1 upright. Only leaving
/// the track ends an episode early, with a one-off `TRACK_PENALTY`.
///
/// Because per-step rewards are never negative, ending an episode early
/// never pays off; with a plain `cos(theta)` reward a hanging pole earns
/// close to -1 per step, and driving off the track quickly becomes a strong
/// local optimum.
///
/// Observation: `[x, x_dot, cos(theta), sin(theta), theta_dot]`.
/// Internal state: `[x, x_dot, theta, theta_dot]`.
#[derive(Debug, Clone, Copy)]
pub struct SwingUp;

impl SwingUp {
    pub const CONTROL_DT: f64 = 0.02;
    pub const SUBSTEPS: usize = 2;
    pub const TRACK_LIMIT: f64 = 3.0;
    pub const TRACK_PENALTY: f64 = -10.0;
    pub const INIT_ANGLE_NOISE: f64 = 0.1;

    pub fn observe(s: &[f64]) -> Vec<f64> {
        vec![s[0], s[1], s[2].cos(), s[2].sin(), s[3]]
    }

    fn derivative(s: &[f64; 4], force: f64) -> [f64; 4] {
        let (x_acc, theta_acc) = cartpole_accel(s[2], s[3], force);
        [s[1], x_acc, s[3], theta_acc]
    }
}

impl Environment for SwingUp {
    fn info(&self) -> EnvInfo {
        EnvInfo {
            obs_dim: 5,
            action_dim: 1,
            action_low: vec![-1.0],
            action_high: vec![1.0],
            max_episode_length: MAX_EPISODE_LENGTH,
        }
    }

    fn perturbation_dim(&self) -> usize {
        1
    }

    fn initial_state(&self, u: &[f64]) -> EnvState {
        let s = vec![0.0, 0.0, PI + Self::INIT_ANGLE_NOISE * u[0], 0.0];
        EnvState {
            observation: Self::observe(&s),
            internal: s,
        }
    }

    fn dynamics(&self, s: &[f64], action: &[f64]) -> StepResult {
        let force = FORCE_SCALE * action[0];
        let dt = Self::CONTROL_DT / Self::SUBSTEPS as f64;
        let mut x = [s[0], s[1], s[2], s[3]];
        for _ in 0..Self::SUBSTEPS {
            x = rk4(x, dt, |y| Self::derivative(y, force));
        }
        let off_track = x[0].abs() > Self::TRACK_LIMIT;
        StepResult {
            next_state: EnvState {
                observation: Self::observe(&x),
                internal: x.to_vec(),
            },
            reward: if off_track { Self::TRACK_PENALTY } else { 0.5 * (1.0 + x[2].cos()) },
            terminal: off_track,
        }
    }

    fn constants(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("cart_mass_kg", CART_MASS),
            ("pole_mass_kg", POLE_MASS),
            ("pole_half_length_m", POLE_HALF_LENGTH),
            ("gravity_m_s2", GRAVITY),
            ("force_scale_n", FORCE_SCALE),
            ("control_dt_s", Self::CONTROL_DT),
            ("rk4_substeps", Self::SUBSTEPS as f64),
            ("track_limit_m", Self::TRACK_LIMIT),
            ("track_penalty", Self::TRACK_PENALTY),
            ("init_angle_noise_rad", Self::INIT_ANGLE_NOISE),
        ]
    }
}

/// Two-link underactuated pendulum with torque at the first (base) joint.
/// Links are uniform rods; angles are measured from the upright vertical,
/// the second one relative to the first.
///
/// Observation: `[sin q1, cos q1, sin q2, cos q2, q1_dot, q2_dot]`.
/// Internal state: `[q1, q2, q1_dot, q2_dot]`.
#[derive(Debug, Clone, Copy)]
pub struct DoublePendulum;

impl DoublePendulum {
    pub const LINK_MASS: f64 = 1.0;
    pub const LINK_LENGTH: f64 = 1.0;
    pub const TORQUE_SCALE: f64 = 10.0;
    pub const CONTROL_DT: f64 = 0.02;
    pub const SUBSTEPS: usize = 2;
    pub const MAX_VELOCITY: f64 = 30.0;
    pub const INIT_NOISE: f64 = 0.1;

    fn inertia() -> f64 {
        Self::LINK_MASS * Self::LINK_LENGTH * Self::LINK_LENGTH / 12.0
    }

    /// Mass matrix entries `(m11, m12, m22)` and the bias vector (Coriolis
    /// plus gravity) at a state.
    fn manipulator(s: &[f64; 4]) -> ((f64, f64, f64), [f64; 2]) {
        let (m, l, i) = (Self::LINK_MASS, Self::LINK_LENGTH, Self::inertia());
        let lc = l / 2.0;
        let (q1, q2, w1, w2) = (s[0], s[1], s[2], s[3]);
        let c2 = q2.cos();
        let m11 = m * lc * lc + m * (l * l + lc * lc + 2.0 * l * lc * c2) + 2.0 * i;
        let m12 = m * (lc * lc + l * lc * c2) + i;
        let m22 = m * lc * lc + i;
        let h = m * l * lc * q2.sin();
        let coriolis = [-h * w2 * (2.0 * w1 + w2), h * w1 * w1];
        let gravity = [
            -m * GRAVITY * lc * q1.sin() - m * GRAVITY * (l * q1.sin() + lc * (q1 + q2).sin()),
            -m * GRAVITY * lc * (q1 + q2).sin(),
        ];
        (
            (m11, m12, m22),
            [coriolis[0] + gravity[0], coriolis[1] + gravity[1]],
        )
    }

    fn derivative(s: &[f64; 4], torque: f64) -> [f64; 4] {
        let ((m11, m12, m22), bias) = Self::manipulator(s);
        let r1 = torque - bias[0];
        let r2 = -bias[1];
        let det = m11 * m22 - m12 * m12;
        let a1 = (m22 * r1 - m12 * r2) / det;
        let a2 = (m11 * r2 - m12 * r1) / det;
        [s[2], s[3], a1, a2]
    }

    /// Total mechanical energy; potential is zero at the base joint height.
    pub fn energy(s: &[f64]) -> f64 {
        let st = [s[0], s[1], s[2], s[3]];
        let ((m11, m12, m22), _) = Self::manipulator(&st);
        let (w1, w2) = (s[2], s[3]);
        let kinetic = 0.5 * (m11 * w1 * w1 + 2.0 * m12 * w1 * w2 + m22 * w2 * w2);
        let (m, l) = (Self::LINK_MASS, Self::LINK_LENGTH);
        let lc = l / 2.0;
        let potential =
            m * GRAVITY * lc * s[0].cos() + m * GRAVITY * (l * s[0].cos() + lc * (s[0] + s[1]).cos());
        kinetic + potential
    }

    /// Distance from the tip of the second link to the fully upright tip.
    pub fn tip_distance(s: &[f64]) -> f64 {
        let l = Self::LINK_LENGTH;
        let tx = l * s[0].sin() + l * (s[0] + s[1]).sin();
        let ty = l * s[0].cos() + l * (s[0] + s[1]).cos();
        (tx * tx + (ty - 2.0 * l).powi(2)).sqrt()
    }

    pub fn observe(s: &[f64]) -> Vec<f64> {
        vec![s[0].sin(), s[0].cos(), s[1].sin(), s[1].cos(), s[2], s[3]]
    }
}

impl Environment for DoublePendulum {
    fn info(&self) -> EnvInfo {
        EnvInfo {
            obs_dim: 6,
            action_dim: 1,
            action_low: vec![-1.0],
            action_high: vec![1.0],
            max_episode_length: MAX_EPISODE_LENGTH,
        }
    }

    fn perturbation_dim(&self) -> usize {
        2
    }

    fn initial_state(&self, u: &[f64]) -> EnvState {
        let s = vec![Self::INIT_NOISE * u[0], Self::INIT_NOISE * u[1], 0.0, 0.0];
        EnvState {
            observation: Self::observe(&s),
            internal: s,
        }
    }

    fn dynamics(&self, s: &[f64], action: &[f64]) -> StepResult {
        let torque = Self::TORQUE_SCALE * action[0];
        let dt = Self::CONTROL_DT / Self::SUBSTEPS as f64;
        let mut x = [s[0], s[1], s[2], s[3]];
        for _ in 0..Self::SUBSTEPS {
            x = rk4(x, dt, |y| Self::derivative(y, torque));
        }
        x[2] = x[2].clamp(-Self::MAX_VELOCITY, Self::MAX_VELOCITY);
        x[3] = x[3].clamp(-Self::MAX_VELOCITY, Self::MAX_VELOCITY);
        StepResult {
            reward: -Self::tip_distance(&x),
            next_state: EnvState {
                observation: Self::observe(&x),
                internal: x.to_vec(),
            },
            terminal: false,
        }
    }

    fn constants(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("link_mass_kg", Self::LINK_MASS),
            ("link_length_m", Self::LINK_LENGTH),
            ("gravity_m_s2", GRAVITY),
            ("torque_scale_nm", Self::TORQUE_SCALE),
            ("control_dt_s", Self::CONTROL_DT),
            ("rk4_substeps", Self::SUBSTEPS as f64),
            ("max_velocity_rad_s", Self::MAX_VELOCITY),
            ("init_noise_rad", Self::INIT_NOISE),
        ]
    }
}

/// Continuous mountain car.
///
/// Besides the quadratic action cost and the goal bonus, each step is paid
/// `SHAPING` times the change in normalized mechanical energy
/// `phi = (v^2/2 + g/3 sin 3x - e_min) / (e_goal - e_min)`, where `e_min` is
/// the valley bottom at rest and `e_goal` the goal at rest. The shaping
/// terms telescope, so an episode collects at most `SHAPING * (phi_end -
/// phi_start)` from them; the goal bonus and the action cost decide which
/// policies are best.
///
/// Observation: `[position, velocity]`. Internal state is the same.
#[derive(Debug, Clone, Copy)]
pub struct MountainCar;

impl MountainCar {
    pub const MIN_POSITION: f64 = -1.2;
    pub const MAX_POSITION: f64 = 0.6;
    pub const MAX_SPEED: f64 = 0.07;
    pub const GOAL_POSITION: f64 = 0.45;
    pub const POWER: f64 = 0.0015;
    pub const GRAVITY: f64 = 0.0025;
    pub const ACTION_COST: f64 = 0.01;
    pub const GOAL_REWARD: f64 = 1.0;
    pub const SHAPING: f64 = 10.0;

    fn raw_energy(position: f64, velocity: f64) -> f64 {
        0.5 * velocity * velocity + Self::GRAVITY / 3.0 * (3.0 * position).sin()
    }

    /// Normalized mechanical energy: 0 at rest in the valley, 1 at rest on
    /// the goal line.
    pub fn energy(position: f64, velocity: f64) -> f64 {
        let e_min = -Self::GRAVITY / 3.0;
        let e_goal = Self::raw_energy(Self::GOAL_POSITION, 0.0);
        (Self::raw_energy(position, velocity) - e_min) / (e_goal - e_min)
    }
}

impl Environment for MountainCar {
    fn info(&self) -> EnvInfo {
        EnvInfo {
            obs_dim: 2,
            action_dim: 1,
            action_low: vec![-1.0],
            action_high: vec![1.0],
            max_episode_length: MAX_EPISODE_LENGTH,
        }
    }

    fn perturbation_dim(&self) -> usize {
        1
    }

    fn initial_state(&self, u: &[f64]) -> EnvState {
        let s = vec![-0.5 + 0.1 * u[0], 0.0];
        EnvState {
            observation: s.clone(),
            internal: s,
        }
    }

    fn dynamics(&self, s: &[f64], action: &[f64]) -> StepResult {
        let force = action[0];
        let mut velocity = s[1] + force * Self::POWER - Self::GRAVITY * (3.0 * s[0]).cos();
        velocity = velocity.clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        let mut position = (s[0] + velocity).clamp(Self::MIN_POSITION, Self::MAX_POSITION);
        if position == Self::MIN_POSITION && velocity < 0.0 {
            velocity = 0.0;
        }
        if position > Self::MAX_POSITION {
            position = Self::MAX_POSITION;
        }
        let at_goal = position >= Self::GOAL_POSITION;
        let mut reward = -Self::ACTION_COST * force * force
            + Self::SHAPING * (Self::energy(position, velocity) - Self::energy(s[0], s[1]));
        if at_goal {
            reward += Self::GOAL_REWARD;
        }
        let next = vec![position, velocity];
        StepResult {
            next_state: EnvState {
                observation: next.clone(),
                internal: next,
            },
            reward,
            terminal: at_goal,
        }
    }

    fn constants(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("min_position", Self::MIN_POSITION),
            ("max_position", Self::MAX_POSITION),
            ("max_speed", Self::MAX_SPEED),
            ("goal_position", Self::GOAL_POSITION),
            ("power", Self::POWER),
            ("gravity", Self::GRAVITY),
            ("action_cost", Self::ACTION_COST),
            ("goal_reward", Self::GOAL_REWARD),
            ("energy_shaping", Self::SHAPING),
        ]
    }
}
