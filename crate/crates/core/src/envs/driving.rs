//! Two cars crossing an unsignalized intersection. The robot car drives
//! left to right; a scripted human car drives bottom to top.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_nonnegative, check_positive, check_range, gaussian, uniform_in, EnvError, Environment, State, Status};
use crate::stability::SystemModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanMode {
    /// The human trades progress against distance from the robot.
    Interactive,
    /// The human only heads for its goal.
    SelfCentered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrivingConfig {
    pub dt: f64,
    pub steps: usize,
    /// Speed of every nonzero candidate velocity.
    pub speed: f64,
    /// Number of compass directions; the zero velocity is always added.
    pub directions: usize,
    /// Weight on the distance-to-other-car terms of the step cost.
    pub avoid_weight: f64,
    pub robot_goal: [f64; 2],
    pub human_goal: [f64; 2],
    pub robot_start_x: [f64; 2],
    pub robot_start_y: [f64; 2],
    pub human_start_x: [f64; 2],
    pub human_start_y: [f64; 2],
    /// Standard deviation of the noise on the expert robot's velocity.
    pub robot_noise: f64,
    /// Standard deviation of the noise on the human's velocity.
    pub human_noise: f64,
    pub human_mode: HumanMode,
    /// Sample robot starts from lateral bands outside the training region.
    pub ood_start: bool,
    /// Lateral distance from the training region's edge to the far edge of
    /// an out-of-distribution band.
    pub ood_offset: f64,
}

impl Default for DrivingConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            steps: 20,
            speed: 2.0,
            directions: 16,
            avoid_weight: 0.75,
            robot_goal: [1.75, 0.0],
            human_goal: [0.0, 1.75],
            robot_start_x: [-2.0, -1.5],
            robot_start_y: [-0.25, 0.25],
            human_start_x: [-0.25, 0.25],
            human_start_y: [-2.0, -1.5],
            robot_noise: 0.05,
            human_noise: 0.05,
            human_mode: HumanMode::Interactive,
            ood_start: false,
            ood_offset: 0.5,
        }
    }
}

/// Step cost of moving from `from` to `to` toward `goal` while the other car
/// sits at `other`.
pub fn step_cost(from: &[f64], to: &[f64], other: &[f64], goal: &[f64], avoid_weight: f64) -> f64 {
    dist(to, goal) - dist(from, goal) + avoid_weight * dist(from, other) - avoid_weight * dist(to, other)
}

/// [`step_cost`] with the standard 0.75 avoidance weight.
pub fn driving_cost(x_t: &[f64], x_next: &[f64], y_t: &[f64], c: &[f64]) -> f64 {
    step_cost(x_t, x_next, y_t, c, 0.75)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct DrivingEnv {
    cfg: DrivingConfig,
    candidates: Vec<[f64; 2]>,
}

impl DrivingEnv {
    pub fn new(cfg: DrivingConfig) -> Result<Self, EnvError> {
        check_positive("driving.dt", cfg.dt)?;
        check_positive("driving.speed", cfg.speed)?;
        check_nonnegative("driving.avoid_weight", cfg.avoid_weight)?;
        check_nonnegative("driving.robot_noise", cfg.robot_noise)?;
        check_nonnegative("driving.human_noise", cfg.human_noise)?;
        check_nonnegative("driving.ood_offset", cfg.ood_offset)?;
        for (name, r) in [
            ("driving.robot_start_x", cfg.robot_start_x),
            ("driving.robot_start_y", cfg.robot_start_y),
            ("driving.human_start_x", cfg.human_start_x),
            ("driving.human_start_y", cfg.human_start_y),
        ] {
            check_range(name, r)?;
        }
        if cfg.steps == 0 {
            return Err(EnvError::Config("driving.steps must be at least 1".into()));
        }
        if cfg.directions == 0 {
            return Err(EnvError::Config("driving.directions must be at least 1".into()));
        }
        let mut candidates: Vec<[f64; 2]> = (0..cfg.directions)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / cfg.directions as f64;
                [cfg.speed * a.cos(), cfg.speed * a.sin()]
            })
            .collect();
        candidates.push([0.0, 0.0]);
        Ok(Self { cfg, candidates })
    }

    pub fn config(&self) -> &DrivingConfig {
        &self.cfg
    }

    pub fn candidates(&self) -> &[[f64; 2]] {
        &self.candidates
    }

    /// Candidate velocity minimizing the step cost of the car at `me`, with
    /// the other car at `other` ignored when `avoid` is false. Ties go to
    /// the first candidate.
    pub fn greedy(&self, me: &[f64], other: &[f64], goal: &[f64], avoid: bool) -> [f64; 2] {
        let w = if avoid { self.cfg.avoid_weight } else { 0.0 };
        let mut best = self.candidates[0];
        let mut best_cost = f64::INFINITY;
        for c in &self.candidates {
            let next = [me[0] + c[0] * self.cfg.dt, me[1] + c[1] * self.cfg.dt];
            let cost = step_cost(me, &next, other, goal, w);
            if cost < best_cost {
                best_cost = cost;
                best = *c;
            }
        }
        best
    }

    /// Human velocity at the current joint state, noise included.
    pub fn human_action(&self, x: &[f64], y: &[f64], rng: &mut ChaCha8Rng) -> [f64; 2] {
        let avoid = self.cfg.human_mode == HumanMode::Interactive;
        let v = self.greedy(y, x, &self.cfg.human_goal, avoid);
        let s = self.cfg.human_noise;
        [v[0] + gaussian(rng, s), v[1] + gaussian(rng, s)]
    }

    fn robot_start(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let px = uniform_in(rng, self.cfg.robot_start_x);
        let [lo, hi] = self.cfg.robot_start_y;
        let py = if self.cfg.ood_start {
            let width = self.cfg.ood_offset;
            let t = rng.gen_range(0.0..1.0) * width;
            if rng.gen_bool(0.5) {
                hi + t
            } else {
                lo - t
            }
        } else {
            uniform_in(rng, [lo, hi])
        };
        [px, py]
    }

    /// Sum of the robot's step costs along a recorded episode.
    pub fn trajectory_cost(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
        xs.windows(2)
            .zip(ys)
            .map(|(w, y)| step_cost(&w[0], &w[1], y, &self.cfg.robot_goal, self.cfg.avoid_weight))
            .sum()
    }
}

impl Environment for DrivingEnv {
    fn name(&self) -> &'static str {
        "driving"
    }

    fn dims(&self) -> (usize, usize, usize) {
        (2, 2, 2)
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
        let x = self.robot_start(rng);
        let y = [uniform_in(rng, self.cfg.human_start_x), uniform_in(rng, self.cfg.human_start_y)];
        State::new(x.to_vec(), y.to_vec())
    }

    fn step(&self, s: &State, u: &[f64], rng: &mut ChaCha8Rng) -> State {
        let h = self.human_action(&s.x, &s.y, rng);
        let dt = self.cfg.dt;
        let x = vec![s.x[0] + u[0] * dt, s.x[1] + u[1] * dt];
        let y = vec![s.y[0] + h[0] * dt, s.y[1] + h[1] * dt];
        State {
            x,
            y,
            hidden: Vec::new(),
            clamped: s.clamped,
        }
    }

    fn status(&self, _s: &State) -> Status {
        Status::Running
    }

    fn expert(&self, s: &State, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let v = self.greedy(&s.x, &s.y, &self.cfg.robot_goal, true);
        let sd = self.cfg.robot_noise;
        vec![v[0] + gaussian(rng, sd), v[1] + gaussian(rng, sd)]
    }

    /// The human's greedy choice is piecewise constant in `(x, y)`, so its
    /// Jacobians are zero wherever they exist.
    fn model(&self) -> SystemModel {
        SystemModel::single_integrator(2, 2)
    }

    fn supports_model_based(&self) -> bool {
        false
    }

    fn goal_error(&self, s: &State) -> Option<f64> {
        Some(dist(&s.x, &self.cfg.robot_goal))
    }

    fn episode_cost(&self, states: &[State]) -> Option<f64> {
        let xs: Vec<Vec<f64>> = states.iter().map(|s| s.x.clone()).collect();
        let ys: Vec<Vec<f64>> = states.iter().map(|s| s.y.clone()).collect();
        Some(self.trajectory_cost(&xs, &ys))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn cost_of_no_motion_is_zero() {
        assert_eq!(driving_cost(&[0.3, 0.1], &[0.3, 0.1], &[1.0, 1.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn hand_evaluated_cost() {
        let c = driving_cost(&[0.0, 0.0], &[0.1, 0.0], &[0.0, 1.0], &[1.0, 0.0]);
        let expected = -0.1 + 0.75 * (1.0 - (0.01f64 + 1.0).sqrt());
        assert!((c - expected).abs() < 1e-15);
        assert!((c + 0.10374).abs() < 1e-5);
    }

    #[test]
    fn moving_away_from_goal_costs() {
        assert!(driving_cost(&[0.0, 0.0], &[-0.1, 0.0], &[0.0, 100.0], &[1.0, 0.0]) > 0.0);
    }

    #[test]
    fn robot_integrates_its_velocity() {
        let env = DrivingEnv::new(DrivingConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = State::new(vec![-1.0, 0.2], vec![0.0, -1.8]);
        let next = env.step(&s, &[1.5, -0.5], &mut rng);
        assert!((next.x[0] - (-1.0 + 0.15)).abs() < 1e-15);
        assert!((next.x[1] - (0.2 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn human_at_goal_stays_put_without_noise() {
        let cfg = DrivingConfig {
            human_noise: 0.0,
            ..DrivingConfig::default()
        };
        let env = DrivingEnv::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = State::new(vec![-5.0, -5.0], vec![0.0, 1.75]);
        let next = env.step(&s, &[0.0, 0.0], &mut rng);
        assert_eq!(next, s);
    }

    #[test]
    fn far_expert_makes_progress() {
        let cfg = DrivingConfig {
            robot_noise: 0.0,
            ..DrivingConfig::default()
        };
        let env = DrivingEnv::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = State::new(vec![-1.8, 0.0], vec![50.0, 50.0]);
        let u = env.expert(&s, &mut rng);
        let next = [s.x[0] + u[0] * 0.1, s.x[1] + u[1] * 0.1];
        assert!(dist(&next, &[1.75, 0.0]) < dist(&s.x, &[1.75, 0.0]));
    }
}
