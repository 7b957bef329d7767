//! Simulation environments, their scripted experts and dynamics models.

mod autoencoder;
pub mod driving;
pub mod pointmass;
pub mod quadrotor;
pub mod toy;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stability::SystemModel;

pub use autoencoder::{Autoencoder, AutoencoderConfig, AutoencoderError};
pub use driving::{DrivingConfig, DrivingEnv, HumanMode};
pub use pointmass::{PointMassConfig, PointMassEnv};
pub use quadrotor::{QuadrotorConfig, QuadrotorEnv};
pub use toy::{ToyConfig, ToyEnv};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autoencoder(#[from] AutoencoderError),
}

/// Episode state. `x` and `y` are what the policy sees; `hidden` carries
/// simulator-only quantities such as the point-mass goal.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub hidden: Vec<f64>,
    /// Number of action components clamped into the valid domain so far.
    pub clamped: u32,
}

impl State {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        Self {
            x,
            y,
            hidden: Vec::new(),
            clamped: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    /// Goal reached.
    Success,
    /// Hit an obstacle or left the workspace.
    Collision,
    /// Ran out of time before reaching a goal.
    Timeout,
    /// Ran the full horizon in an environment with no terminal goal.
    Completed,
    /// The controller produced a non-finite action.
    Failed,
}

impl Status {
    /// Whether the episode counts as successful for aggregate metrics.
    pub fn is_success(self) -> bool {
        matches!(self, Status::Success | Status::Completed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Running => "running",
            Status::Success => "success",
            Status::Collision => "collision",
            Status::Timeout => "timeout",
            Status::Completed => "completed",
            Status::Failed => "failed",
        }
    }
}

/// A simulated task with a scripted expert.
pub trait Environment: Send + Sync {
    fn name(&self) -> &'static str;
    /// `(m, d, n)` as seen by the policy.
    fn dims(&self) -> (usize, usize, usize);
    fn dt(&self) -> f64;
    fn horizon(&self) -> usize;
    /// Steps recorded per demonstration; `None` records until termination.
    fn demo_steps(&self) -> Option<usize>;
    fn reset(&self, rng: &mut ChaCha8Rng) -> State;
    /// Advances one step. Environment randomness draws from `rng`.
    fn step(&self, s: &State, u: &[f64], rng: &mut ChaCha8Rng) -> State;
    fn status(&self, s: &State) -> Status;
    /// Status assigned when the horizon elapses while still running.
    fn horizon_status(&self) -> Status {
        Status::Completed
    }
    fn expert(&self, s: &State, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// Every dynamics Jacobian the simulator can supply.
    fn model(&self) -> SystemModel;
    /// Whether environment dynamics are differentiable enough for the full
    /// error-dynamics matrix.
    fn supports_model_based(&self) -> bool;
    /// Distance to the goal, where the task has one.
    fn goal_error(&self, _s: &State) -> Option<f64> {
        None
    }
    /// Task cost of a visited state sequence, where the task defines one.
    fn episode_cost(&self, _states: &[State]) -> Option<f64> {
        None
    }
}

/// Environment selection plus per-environment settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    Driving,
    Quadrotor,
    Pointmass,
    Toy,
}

impl EnvName {
    pub const ALL: [EnvName; 4] = [EnvName::Driving, EnvName::Quadrotor, EnvName::Pointmass, EnvName::Toy];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Driving => "driving",
            EnvName::Quadrotor => "quadrotor",
            EnvName::Pointmass => "pointmass",
            EnvName::Toy => "toy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.as_str() == s)
    }
}

impl std::fmt::Display for EnvName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub name: EnvName,
    pub driving: DrivingConfig,
    pub quadrotor: QuadrotorConfig,
    pub pointmass: PointMassConfig,
    pub toy: ToyConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            name: EnvName::Driving,
            driving: DrivingConfig::default(),
            quadrotor: QuadrotorConfig::default(),
            pointmass: PointMassConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn with_name(name: EnvName) -> Self {
        Self {
            name,
            ..Self::default()
        }
    }

    /// Builds the selected environment. The point mass observes raw images
    /// unless an encoder is supplied.
    pub fn build(&self, encoder: Option<Autoencoder>) -> Result<Box<dyn Environment>, EnvError> {
        Ok(match self.name {
            EnvName::Driving => Box::new(DrivingEnv::new(self.driving.clone())?),
            EnvName::Quadrotor => Box::new(QuadrotorEnv::new(self.quadrotor.clone())?),
            EnvName::Pointmass => Box::new(PointMassEnv::new(self.pointmass.clone(), encoder)?),
            EnvName::Toy => Box::new(ToyEnv::new(self.toy.clone())?),
        })
    }
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

pub(crate) fn uniform_in(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.gen_range(range[0]..range[1])
    } else {
        range[0]
    }
}

pub(crate) fn check_range(name: &str, r: [f64; 2]) -> Result<(), EnvError> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(EnvError::Config(format!("{name} must be an ordered finite range, got {r:?}")));
    }
    Ok(())
}

pub(crate) fn check_positive(name: &str, v: f64) -> Result<(), EnvError> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(EnvError::Config(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

pub(crate) fn check_nonnegative(name: &str, v: f64) -> Result<(), EnvError> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(EnvError::Config(format!("{name} must be nonnegative, got {v}")));
    }
    Ok(())
}
