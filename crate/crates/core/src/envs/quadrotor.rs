//! Quadrotor crossing a box-shaped room between spherical obstacles.
//!
//! State `x = (p, v)`, action `u = (u_T, u_phi, u_theta)` with
//! `v_x' = a_g tan(u_theta)`, `v_y' = -a_g tan(u_phi)`, `v_z' = u_T - a_g`.
//! Goal and obstacles are fixed, so there is no environment state.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_nonnegative, check_positive, check_range, uniform_in, EnvError, Environment, State, Status};
use crate::linalg::Mat;
use crate::stability::SystemModel;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadrotorConfig {
    pub dt: f64,
    pub horizon: usize,
    /// Edge length of the cubic room `[0, room]^3`.
    pub room: f64,
    pub goal: [f64; 3],
    pub goal_radius: f64,
    pub start_x: [f64; 2],
    pub start_y: [f64; 2],
    pub start_z: [f64; 2],
    pub obstacle_count: usize,
    pub obstacle_radius: f64,
    pub obstacle_seed: u64,
    /// Region obstacle centers are drawn from, per axis.
    pub obstacle_x: [f64; 2],
    pub obstacle_y: [f64; 2],
    pub obstacle_z: [f64; 2],
    /// Minimum gap between two obstacle surfaces.
    pub obstacle_gap: f64,
    /// Explicit obstacle centers; overrides the seeded placement.
    pub obstacles: Option<Vec<[f64; 3]>>,
    /// Tilt commands are clamped to `+-(pi/2 - tilt_margin)`.
    pub tilt_margin: f64,
    pub expert: QuadExpertConfig,
}

/// Potential-field expert gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadExpertConfig {
    pub cruise_speed: f64,
    /// Distance to the goal inside which the desired speed ramps down.
    pub slow_radius: f64,
    /// Surface distance inside which obstacles repel.
    pub influence: f64,
    pub repulsion: f64,
    pub wall_margin: f64,
    pub wall_gain: f64,
    pub velocity_gain: f64,
    pub max_tilt: f64,
    pub max_vertical_accel: f64,
}

impl Default for QuadExpertConfig {
    fn default() -> Self {
        Self {
            cruise_speed: 1.5,
            slow_radius: 1.5,
            influence: 1.25,
            repulsion: 0.6,
            wall_margin: 0.75,
            wall_gain: 2.0,
            velocity_gain: 2.0,
            max_tilt: 0.35,
            max_vertical_accel: 3.0,
        }
    }
}

impl Default for QuadrotorConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            horizon: 400,
            room: 10.0,
            goal: [9.0, 5.0, 5.0],
            goal_radius: 0.5,
            start_x: [0.5, 1.0],
            start_y: [2.0, 8.0],
            start_z: [2.0, 8.0],
            obstacle_count: 7,
            obstacle_radius: 0.75,
            obstacle_seed: 7,
            obstacle_x: [3.5, 6.5],
            obstacle_y: [2.5, 7.5],
            obstacle_z: [2.5, 7.5],
            obstacle_gap: 0.75,
            obstacles: None,
            tilt_margin: 0.1,
            expert: QuadExpertConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuadrotorEnv {
    cfg: QuadrotorConfig,
    obstacles: Vec<[f64; 3]>,
    clamp_events: Arc<AtomicU64>,
}

impl QuadrotorEnv {
    pub fn new(cfg: QuadrotorConfig) -> Result<Self, EnvError> {
        check_positive("quadrotor.dt", cfg.dt)?;
        check_positive("quadrotor.room", cfg.room)?;
        check_positive("quadrotor.goal_radius", cfg.goal_radius)?;
        check_nonnegative("quadrotor.obstacle_radius", cfg.obstacle_radius)?;
        check_nonnegative("quadrotor.obstacle_gap", cfg.obstacle_gap)?;
        if !(cfg.tilt_margin > 0.0 && cfg.tilt_margin < std::f64::consts::FRAC_PI_2) {
            return Err(EnvError::Config("quadrotor.tilt_margin must lie in (0, pi/2)".into()));
        }
        if cfg.horizon == 0 {
            return Err(EnvError::Config("quadrotor.horizon must be at least 1".into()));
        }
        for (name, r) in [
            ("quadrotor.start_x", cfg.start_x),
            ("quadrotor.start_y", cfg.start_y),
            ("quadrotor.start_z", cfg.start_z),
            ("quadrotor.obstacle_x", cfg.obstacle_x),
            ("quadrotor.obstacle_y", cfg.obstacle_y),
            ("quadrotor.obstacle_z", cfg.obstacle_z),
        ] {
            check_range(name, r)?;
        }
        let inside = |p: &[f64; 3], margin: f64| p.iter().all(|&c| c >= margin && c <= cfg.room - margin);
        if !inside(&cfg.goal, 0.0) {
            return Err(EnvError::Config(format!("quadrotor.goal {:?} is outside the room", cfg.goal)));
        }
        let obstacles = match &cfg.obstacles {
            Some(list) => list.clone(),
            None => place_obstacles(&cfg)?,
        };
        for o in &obstacles {
            if !inside(o, cfg.obstacle_radius) {
                return Err(EnvError::Config(format!("obstacle at {o:?} does not fit inside the room")));
            }
            if dist(o, &cfg.goal) < cfg.obstacle_radius + cfg.goal_radius {
                return Err(EnvError::Config(format!("obstacle at {o:?} overlaps the goal")));
            }
        }
        Ok(Self {
            cfg,
            obstacles,
            clamp_events: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn config(&self) -> &QuadrotorConfig {
        &self.cfg
    }

    pub fn obstacles(&self) -> &[[f64; 3]] {
        &self.obstacles
    }

    /// Total tilt clamps applied by this environment (and its clones).
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }

    fn tilt_limit(&self) -> f64 {
        std::f64::consts::FRAC_PI_2 - self.cfg.tilt_margin
    }

    /// Terminal classification of a position.
    pub fn classify(&self, p: &[f64]) -> Status {
        if dist(p, &self.cfg.goal) < self.cfg.goal_radius {
            return Status::Success;
        }
        if p.iter().any(|&c| c <= 0.0 || c >= self.cfg.room) {
            return Status::Collision;
        }
        if self
            .obstacles
            .iter()
            .any(|o| dist(p, o) <= self.cfg.obstacle_radius)
        {
            return Status::Collision;
        }
        Status::Running
    }

    /// Desired acceleration of the potential-field expert.
    fn field_acceleration(&self, p: &[f64], v: &[f64]) -> [f64; 3] {
        let e = &self.cfg.expert;
        let goal = &self.cfg.goal;
        let to_goal = [goal[0] - p[0], goal[1] - p[1], goal[2] - p[2]];
        let dg = norm3(&to_goal).max(1e-9);
        let speed = e.cruise_speed * (dg / e.slow_radius).min(1.0);
        let mut vd = to_goal.map(|c| c / dg * speed);
        for o in &self.obstacles {
            let r = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
            let rn = norm3(&r).max(1e-9);
            let surface = rn - self.cfg.obstacle_radius;
            if surface >= e.influence {
                continue;
            }
            let nrm = r.map(|c| c / rn);
            let closeness = 1.0 - surface.max(0.0) / e.influence;
            // Cancel motion into the obstacle and slide around it.
            let inward = vd[0] * nrm[0] + vd[1] * nrm[1] + vd[2] * nrm[2];
            if inward < 0.0 {
                for k in 0..3 {
                    vd[k] -= closeness * inward * nrm[k];
                }
                let mut tangent = [
                    to_goal[0] / dg - nrm[0] * dot3(&to_goal, &nrm) / dg,
                    to_goal[1] / dg - nrm[1] * dot3(&to_goal, &nrm) / dg,
                    to_goal[2] / dg - nrm[2] * dot3(&to_goal, &nrm) / dg,
                ];
                if norm3(&tangent) < 0.2 {
                    // Head-on approach: pick a sideways direction.
                    let side = [-nrm[1], nrm[0], 0.3];
                    let sn = norm3(&side).max(1e-9);
                    tangent = side.map(|c| c / sn);
                }
                let tn = norm3(&tangent).max(1e-9);
                for k in 0..3 {
                    vd[k] += closeness * e.cruise_speed * 0.5 * tangent[k] / tn;
                }
            }
            let push = e.repulsion * (1.0 / surface.max(0.05) - 1.0 / e.influence).max(0.0);
            for k in 0..3 {
                vd[k] += push * nrm[k];
            }
        }
        for k in 0..3 {
            if p[k] < e.wall_margin {
                vd[k] += e.wall_gain * (e.wall_margin - p[k]);
            }
            if p[k] > self.cfg.room - e.wall_margin {
                vd[k] -= e.wall_gain * (p[k] - (self.cfg.room - e.wall_margin));
            }
        }
        let lateral = GRAVITY * e.max_tilt.tan();
        [
            (e.velocity_gain * (vd[0] - v[0])).clamp(-lateral, lateral),
            (e.velocity_gain * (vd[1] - v[1])).clamp(-lateral, lateral),
            (e.velocity_gain * (vd[2] - v[2])).clamp(-e.max_vertical_accel, e.max_vertical_accel),
        ]
    }
}

fn place_obstacles(cfg: &QuadrotorConfig) -> Result<Vec<[f64; 3]>, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.obstacle_seed);
    let mut placed: Vec<[f64; 3]> = Vec::with_capacity(cfg.obstacle_count);
    let min_sep = 2.0 * cfg.obstacle_radius + cfg.obstacle_gap;
    let mut attempts = 0;
    while placed.len() < cfg.obstacle_count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(EnvError::Config(format!(
                "could not place {} separated obstacles in the configured region",
                cfg.obstacle_count
            )));
        }
        let c = [
            uniform_in(&mut rng, cfg.obstacle_x),
            uniform_in(&mut rng, cfg.obstacle_y),
            uniform_in(&mut rng, cfg.obstacle_z),
        ];
        if placed.iter().all(|o| dist(o, &c) >= min_sep) {
            placed.push(c);
        }
    }
    Ok(placed)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Continuous-time Jacobians `(df/dx, df/du)` at action `u`.
pub fn quadrotor_jacobians(u: &[f64]) -> (Mat, Mat) {
    let mut fx = Mat::zeros(6, 6);
    for k in 0..3 {
        fx[(k, k + 3)] = 1.0;
    }
    let sec2 = |a: f64| 1.0 / (a.cos() * a.cos());
    let mut fu = Mat::zeros(6, 3);
    fu[(3, 2)] = GRAVITY * sec2(u[2]);
    fu[(4, 1)] = -GRAVITY * sec2(u[1]);
    fu[(5, 0)] = 1.0;
    (fx, fu)
}

impl Environment for QuadrotorEnv {
    fn name(&self) -> &'static str {
        "quadrotor"
    }

    fn dims(&self) -> (usize, usize, usize) {
        (6, 0, 3)
    }

    fn dt(&self) -> f64 {
        self.cfg.dt
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn demo_steps(&self) -> Option<usize> {
        None
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> State {
        loop {
            let p = [
                uniform_in(rng, self.cfg.start_x),
                uniform_in(rng, self.cfg.start_y),
                uniform_in(rng, self.cfg.start_z),
            ];
            if self.classify(&p) == Status::Running {
                return State::new(vec![p[0], p[1], p[2], 0.0, 0.0, 0.0], Vec::new());
            }
        }
    }

    fn step(&self, s: &State, u: &[f64], _rng: &mut ChaCha8Rng) -> State {
        let limit = self.tilt_limit();
        let mut clamped = s.clamped;
        let mut tilt = |a: f64| {
            if a.abs() > limit {
                clamped += 1;
                self.clamp_events.fetch_add(1, Ordering::Relaxed);
                a.clamp(-limit, limit)
            } else {
                a
            }
        };
        let phi = tilt(u[1]);
        let theta = tilt(u[2]);
        let acc = [GRAVITY * theta.tan(), -GRAVITY * phi.tan(), u[0] - GRAVITY];
        let dt = self.cfg.dt;
        let x = &s.x;
        let next = vec![
            x[0] + dt * x[3],
            x[1] + dt * x[4],
            x[2] + dt * x[5],
            x[3] + dt * acc[0],
            x[4] + dt * acc[1],
            x[5] + dt * acc[2],
        ];
        State {
            x: next,
            y: Vec::new(),
            hidden: Vec::new(),
            clamped,
        }
    }

    fn status(&self, s: &State) -> Status {
        self.classify(&s.x[..3])
    }

    fn horizon_status(&self) -> Status {
        Status::Timeout
    }

    fn expert(&self, s: &State, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        let a = self.field_acceleration(&s.x[..3], &s.x[3..]);
        vec![
            a[2] + GRAVITY,
            (-a[1] / GRAVITY).atan(),
            (a[0] / GRAVITY).atan(),
        ]
    }

    fn model(&self) -> SystemModel {
        SystemModel::new(6, 0, 3, |_x, u| quadrotor_jacobians(u))
            .with_env_dynamics(|_, _, _| (Mat::zeros(0, 6), Mat::zeros(0, 0), Mat::zeros(0, 3)))
    }

    fn supports_model_based(&self) -> bool {
        true
    }

    fn goal_error(&self, s: &State) -> Option<f64> {
        Some(dist(&s.x[..3], &self.cfg.goal))
    }
}
