//! Planar single integrator `x' = u` whose expert pushes away from the
//! origin, `u = gain * x`. The expert's closed loop is unstable.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_positive, check_range, uniform_in, EnvError, Environment, State, Status};
use crate::linalg::Mat;
use crate::stability::SystemModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub dt: f64,
    pub steps: usize,
    /// Each start coordinate is drawn uniformly from this range.
    pub start: [f64; 2],
    pub gain: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            steps: 10,
            start: [-1.0, 1.0],
            gain: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyEnv {
    cfg: ToyConfig,
}

impl ToyEnv {
    pub fn new(cfg: ToyConfig) -> Result<Self, EnvError> {
        check_positive("toy.dt", cfg.dt)?;
        check_positive("toy.gain", cfg.gain)?;
        check_range("toy.start", cfg.start)?;
        if cfg.steps == 0 {
            return Err(EnvError::Config("toy.steps must be at least 1".into()));
        }
        Ok(Self { cfg })
    }
}

impl Environment for ToyEnv {
    fn name(&self) -> &'static str {
        "toy"
    }

    fn dims(&self) -> (usize, usize, usize) {
        (2, 0, 2)
    }

    fn dt(&self) -> f64 {
        self.cfg.dt
    }

    fn horizon(&self) -> usize {
        self.cfg.steps
    }

    fn demo_steps(&self) -> Option<usize> {
        Some(self.cfg.steps)
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> State {
        State::new(
            vec![uniform_in(rng, self.cfg.start), uniform_in(rng, self.cfg.start)],
            Vec::new(),
        )
    }

    fn step(&self, s: &State, u: &[f64], _rng: &mut ChaCha8Rng) -> State {
        let dt = self.cfg.dt;
        State::new(vec![s.x[0] + u[0] * dt, s.x[1] + u[1] * dt], Vec::new())
    }

    fn status(&self, _s: &State) -> Status {
        Status::Running
    }

    fn expert(&self, s: &State, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        s.x.iter().map(|v| self.cfg.gain * v).collect()
    }

    fn model(&self) -> SystemModel {
        SystemModel::single_integrator(2, 0)
            .with_env_dynamics(|_, _, _| (Mat::zeros(0, 2), Mat::zeros(0, 0), Mat::zeros(0, 2)))
    }

    fn supports_model_based(&self) -> bool {
        true
    }
}
