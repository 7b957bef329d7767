//! Point mass steering to a goal it only sees as a one-hot image.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_positive, uniform_in, Autoencoder, AutoencoderConfig, EnvError, Environment, State, Status};
use crate::stability::SystemModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointMassConfig {
    pub dt: f64,
    pub horizon: usize,
    /// Edge length of the square workspace `[0, workspace]^2`.
    pub workspace: f64,
    /// Image side length in pixels.
    pub resolution: usize,
    /// Expert proportional gain.
    pub gain: f64,
    /// Per-step uniform action bound of the random reference policy.
    pub random_action_bound: f64,
    pub autoencoder: AutoencoderConfig,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            horizon: 50,
            workspace: 10.0,
            resolution: 21,
            gain: 1.0,
            random_action_bound: 17.0,
            autoencoder: AutoencoderConfig::default(),
        }
    }
}

/// One-hot image of `goal`, row-major with rows indexed by the second
/// coordinate. Each pixel covers `workspace / (resolution - 1)` units and
/// the goal is assigned to the nearest pixel center.
pub fn render_goal_image(goal: &[f64], workspace: f64, resolution: usize) -> Vec<f64> {
    let mut img = vec![0.0; resolution * resolution];
    let (col, row) = goal_pixel(goal, workspace, resolution);
    img[row * resolution + col] = 1.0;
    img
}

/// `(column, row)` of the pixel holding `goal`.
pub fn goal_pixel(goal: &[f64], workspace: f64, resolution: usize) -> (usize, usize) {
    let cells = (resolution - 1) as f64;
    let q = |v: f64| ((v / workspace * cells).round().clamp(0.0, cells)) as usize;
    (q(goal[0]), q(goal[1]))
}

/// Point-mass dynamics model for observations of length `d`.
pub fn pointmass_model(d: usize) -> SystemModel {
    SystemModel::single_integrator(2, d)
}

#[derive(Debug, Clone)]
pub struct PointMassEnv {
    cfg: PointMassConfig,
    encoder: Option<Autoencoder>,
}

impl PointMassEnv {
    pub fn new(cfg: PointMassConfig, encoder: Option<Autoencoder>) -> Result<Self, EnvError> {
        check_positive("pointmass.dt", cfg.dt)?;
        check_positive("pointmass.workspace", cfg.workspace)?;
        check_positive("pointmass.gain", cfg.gain)?;
        check_positive("pointmass.random_action_bound", cfg.random_action_bound)?;
        if cfg.horizon == 0 {
            return Err(EnvError::Config("pointmass.horizon must be at least 1".into()));
        }
        if cfg.resolution < 2 {
            return Err(EnvError::Config("pointmass.resolution must be at least 2".into()));
        }
        if let Some(ae) = &encoder {
            let pixels = cfg.resolution * cfg.resolution;
            if ae.image_dim() != pixels {
                return Err(EnvError::Config(format!(
                    "autoencoder expects {} pixels but images have {pixels}",
                    ae.image_dim()
                )));
            }
        }
        Ok(Self { cfg, encoder })
    }

    pub fn config(&self) -> &PointMassConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> Option<&Autoencoder> {
        self.encoder.as_ref()
    }

    pub fn render(&self, goal: &[f64]) -> Vec<f64> {
        render_goal_image(goal, self.cfg.workspace, self.cfg.resolution)
    }

    /// What the policy observes for a goal: the latent code when an encoder
    /// is attached, the raw image otherwise.
    pub fn observe(&self, goal: &[f64]) -> Vec<f64> {
        let img = self.render(goal);
        match &self.encoder {
            Some(ae) => ae.encode(&img),
            None => img,
        }
    }

    fn obs_dim(&self) -> usize {
        match &self.encoder {
            Some(ae) => ae.latent_dim(),
            None => self.cfg.resolution * self.cfg.resolution,
        }
    }
}

impl Environment for PointMassEnv {
    fn name(&self) -> &'static str {
        "pointmass"
    }

    fn dims(&self) -> (usize, usize, usize) {
        (2, self.obs_dim(), 2)
    }

    fn dt(&self) -> f64 {
        self.cfg.dt
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn demo_steps(&self) -> Option<usize> {
        Some(1)
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> State {
        let w = [0.0, self.cfg.workspace];
        let x = vec![uniform_in(rng, w), uniform_in(rng, w)];
        let goal = vec![uniform_in(rng, w), uniform_in(rng, w)];
        State {
            x,
            y: self.observe(&goal),
            hidden: goal,
            clamped: 0,
        }
    }

    fn step(&self, s: &State, u: &[f64], _rng: &mut ChaCha8Rng) -> State {
        let dt = self.cfg.dt;
        State {
            x: vec![s.x[0] + u[0] * dt, s.x[1] + u[1] * dt],
            y: s.y.clone(),
            hidden: s.hidden.clone(),
            clamped: s.clamped,
        }
    }

    fn status(&self, _s: &State) -> Status {
        Status::Running
    }

    fn expert(&self, s: &State, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        let k = self.cfg.gain;
        vec![k * (s.hidden[0] - s.x[0]), k * (s.hidden[1] - s.x[1])]
    }

    fn model(&self) -> SystemModel {
        pointmass_model(self.obs_dim())
    }

    fn supports_model_based(&self) -> bool {
        false
    }

    fn goal_error(&self, s: &State) -> Option<f64> {
        let dx = s.x[0] - s.hidden[0];
        let dy = s.x[1] - s.hidden[1];
        Some((dx * dx + dy * dy).sqrt())
    }
}
