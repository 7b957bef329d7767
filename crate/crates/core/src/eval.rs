//! Closed-loop rollouts under test protocols, episode metrics and the
//! stability analyzer.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::envs::{gaussian, Autoencoder, EnvConfig, EnvError, EnvName, Environment, HumanMode, State, Status};
use crate::linalg::{covariate_bound, eigenvalues, spectral_norm, LinalgError};
use crate::policy::PolicyNetwork;
use crate::stability::{a1_a2_matrices, a_matrix, StabilityError, SystemModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Test conditions equal training conditions.
    Matched,
    /// The human driver ignores the robot car.
    HumanSelfCentered,
    /// Robot starts outside the demonstrated start region.
    OodStart,
    /// Gaussian noise added to every executed action.
    ActionNoise,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::Matched,
        Protocol::HumanSelfCentered,
        Protocol::OodStart,
        Protocol::ActionNoise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Matched => "matched",
            Protocol::HumanSelfCentered => "human_self_centered",
            Protocol::OodStart => "ood_start",
            Protocol::ActionNoise => "action_noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Protocol::as_str).join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub protocol: Protocol,
    pub episodes: usize,
    pub seed: u64,
    /// Action noise standard deviation (used by `action_noise`).
    pub noise: f64,
}

impl ProtocolSpec {
    /// Action noise actually applied in rollouts.
    pub fn action_noise(&self) -> f64 {
        if self.protocol == Protocol::ActionNoise {
            self.noise
        } else {
            0.0
        }
    }

    /// Environment configuration with this protocol's changes applied.
    pub fn configure(&self, env: &EnvConfig) -> Result<EnvConfig, EvalError> {
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(EvalError::Usage(format!("noise must be nonnegative, got {}", self.noise)));
        }
        let mut cfg = env.clone();
        match self.protocol {
            Protocol::Matched | Protocol::ActionNoise => {}
            Protocol::HumanSelfCentered | Protocol::OodStart if env.name != EnvName::Driving => {
                return Err(EvalError::Usage(format!(
                    "protocol {} only applies to the driving environment",
                    self.protocol.as_str()
                )));
            }
            Protocol::HumanSelfCentered => cfg.driving.human_mode = HumanMode::SelfCentered,
            Protocol::OodStart => cfg.driving.ood_start = true,
        }
        Ok(cfg)
    }
}

/// Produces actions during a rollout.
pub trait Controller {
    fn act(&mut self, env: &dyn Environment, s: &State, rng: &mut ChaCha8Rng) -> Vec<f64>;
}

pub struct PolicyController<'a>(pub &'a PolicyNetwork);

impl Controller for PolicyController<'_> {
    fn act(&mut self, _env: &dyn Environment, s: &State, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.0
            .act(&s.x, &s.y)
            .unwrap_or_else(|_| vec![f64::NAN; self.0.dims.n])
    }
}

/// The environment's scripted expert.
pub struct ExpertController;

impl Controller for ExpertController {
    fn act(&mut self, env: &dyn Environment, s: &State, rng: &mut ChaCha8Rng) -> Vec<f64> {
        env.expert(s, rng)
    }
}

/// Independent uniform actions in `[-bound, bound]` per component.
pub struct RandomController {
    pub bound: f64,
}

impl Controller for RandomController {
    fn act(&mut self, env: &dyn Environment, _s: &State, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (_, _, n) = env.dims();
        (0..n).map(|_| rng.gen_range(-self.bound..=self.bound)).collect()
    }
}

/// Always outputs zeros.
pub struct ZeroController;

impl Controller for ZeroController {
    fn act(&mut self, env: &dyn Environment, _s: &State, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![0.0; env.dims().2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Visited states, initial state first; one longer than `actions`.
    pub states: Vec<State>,
    /// Executed actions (noise included).
    pub actions: Vec<Vec<f64>>,
    pub dt: f64,
    pub status: Status,
    pub diagnostic: Option<String>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|k| k as f64 * self.dt).collect()
    }
}

/// Seed of episode `index` in a protocol seeded `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

/// Simulates one closed-loop episode. Initial conditions, environment
/// randomness, controller randomness and action noise draw from separate
/// streams of `seed`, so different controllers face identical starts.
pub fn rollout(env: &dyn Environment, controller: &mut dyn Controller, action_noise: f64, seed: u64) -> Trajectory {
    let mut init_rng = stream(seed, 0);
    let mut env_rng = stream(seed, 1);
    let mut ctrl_rng = stream(seed, 2);
    let mut noise_rng = stream(seed, 3);
    let mut s = env.reset(&mut init_rng);
    let mut states = vec![s.clone()];
    let mut actions = Vec::new();
    let mut diagnostic = None;
    let mut status = env.status(&s);
    for _ in 0..env.horizon() {
        if status != Status::Running {
            break;
        }
        let mut u = controller.act(env, &s, &mut ctrl_rng);
        if u.iter().any(|v| !v.is_finite()) || u.len() != env.dims().2 {
            diagnostic = Some(format!("non-finite or mis-sized action {u:?} at step {}", actions.len()));
            status = Status::Failed;
            break;
        }
        if action_noise > 0.0 {
            for v in &mut u {
                *v += gaussian(&mut noise_rng, action_noise);
            }
        }
        s = env.step(&s, &u, &mut env_rng);
        actions.push(u);
        states.push(s.clone());
        status = env.status(&s);
    }
    if status == Status::Running {
        status = env.horizon_status();
    }
    Trajectory {
        states,
        actions,
        dt: env.dt(),
        status,
        diagnostic,
    }
}

/// Angle between two vectors in degrees, `None` when either is zero.
pub fn action_angle_deg(a: &[f64], b: &[f64]) -> Option<f64> {
    let na: f64 = a.iter().map(|v| v * v).sum();
    let nb: f64 = b.iter().map(|v| v * v).sum();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    let cross = (na * nb - dot * dot).max(0.0).sqrt();
    Some(cross.atan2(dot).to_degrees())
}

/// Consecutive action pairs turning by more than `threshold_deg`.
pub fn direction_changes(actions: &[Vec<f64>], threshold_deg: f64) -> usize {
    actions
        .windows(2)
        .filter_map(|w| action_angle_deg(&w[0], &w[1]))
        .filter(|&a| a > threshold_deg)
        .count()
}

pub const DIRECTION_THRESHOLD_DEG: f64 = 10.0;

/// Sum of the driving step costs along a trajectory toward goal `c`.
pub fn driving_episode_cost(traj: &Trajectory, c: &[f64]) -> f64 {
    traj.states
        .windows(2)
        .map(|w| crate::envs::driving::driving_cost(&w[0].x, &w[1].x, &w[0].y, c))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    pub status: Status,
    pub success: bool,
    pub steps: usize,
    pub cost: Option<f64>,
    pub final_error: Option<f64>,
    pub direction_changes: usize,
    pub clamped: u32,
    pub initial_x: Vec<f64>,
    pub initial_y: Vec<f64>,
}

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sem: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sem = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            sem,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub episodes: usize,
    pub cost: Option<Stat>,
    pub success_rate: Stat,
    pub final_error: Option<Stat>,
    /// Over successful episodes only.
    pub direction_changes: Option<Stat>,
}

impl Aggregates {
    pub fn from_records(records: &[EpisodeRecord]) -> Self {
        let costs: Vec<f64> = records.iter().filter_map(|r| r.cost).collect();
        let success: Vec<f64> = records.iter().map(|r| if r.success { 1.0 } else { 0.0 }).collect();
        let errors: Vec<f64> = records.iter().filter_map(|r| r.final_error).collect();
        let changes: Vec<f64> = records
            .iter()
            .filter(|r| r.success)
            .map(|r| r.direction_changes as f64)
            .collect();
        Self {
            episodes: records.len(),
            cost: Stat::of(&costs),
            success_rate: Stat::of(&success).unwrap_or(Stat {
                mean: 0.0,
                sem: 0.0,
                count: 0,
            }),
            final_error: Stat::of(&errors),
            direction_changes: Stat::of(&changes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub env: String,
    pub protocol: ProtocolSpec,
    pub episodes: Vec<EpisodeRecord>,
    pub aggregates: Aggregates,
}

pub fn episode_record(env: &dyn Environment, traj: &Trajectory, episode: usize, seed: u64) -> EpisodeRecord {
    let last = traj.states.last().expect("trajectories hold the initial state");
    let first = &traj.states[0];
    EpisodeRecord {
        episode,
        seed,
        status: traj.status,
        success: traj.status.is_success(),
        steps: traj.actions.len(),
        cost: env.episode_cost(&traj.states),
        final_error: env.goal_error(last),
        direction_changes: direction_changes(&traj.actions, DIRECTION_THRESHOLD_DEG),
        clamped: last.clamped,
        initial_x: first.x.clone(),
        initial_y: first.y.clone(),
    }
}

/// Runs every episode of `protocol` with `controller` on an environment
/// already configured for the protocol.
pub fn evaluate(env: &dyn Environment, controller: &mut dyn Controller, protocol: &ProtocolSpec) -> MetricsReport {
    let noise = protocol.action_noise();
    let episodes: Vec<EpisodeRecord> = (0..protocol.episodes)
        .map(|i| {
            let seed = episode_seed(protocol.seed, i);
            let traj = rollout(env, controller, noise, seed);
            if let Some(d) = &traj.diagnostic {
                log::warn!("episode {i}: {d}");
            }
            episode_record(env, &traj, i, seed)
        })
        .collect();
    let aggregates = Aggregates::from_records(&episodes);
    MetricsReport {
        env: env.name().to_string(),
        protocol: protocol.clone(),
        episodes,
        aggregates,
    }
}

/// Builds the protocol's environment and evaluates a policy on it.
pub fn evaluate_policy(
    policy: &PolicyNetwork,
    env_cfg: &EnvConfig,
    protocol: &ProtocolSpec,
    encoder: Option<Autoencoder>,
) -> Result<MetricsReport, EvalError> {
    let env = protocol.configure(env_cfg)?.build(encoder)?;
    let (m, d, n) = env.dims();
    let p = &policy.dims;
    if (p.m, p.d, p.n) != (m, d, n) {
        return Err(EvalError::Usage(format!(
            "policy dims (m={}, d={}, n={}) do not match the {} environment (m={m}, d={d}, n={n})",
            p.m,
            p.d,
            p.n,
            env.name()
        )));
    }
    Ok(evaluate(env.as_ref(), &mut PolicyController(policy), protocol))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpectrum {
    pub index: usize,
    /// Eigenvalues of `A` (model-based) or `A1` (model-free).
    pub eigenvalues: Vec<(f64, f64)>,
    pub abscissa: f64,
    pub stable: bool,
    pub norm_a1: f64,
    pub norm_a2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub model_based: bool,
    pub samples: Vec<SampleSpectrum>,
    pub stable_fraction: f64,
    pub max_norm_a1: f64,
    pub max_norm_a2: f64,
    pub eps: f64,
    /// `(t, bound)` pairs over `[0, horizon]`.
    pub bound_curve: Vec<(f64, f64)>,
}

/// Samples whose analyzed matrix has every eigenvalue strictly in the left
/// half plane.
pub fn stable_fraction(policy: &PolicyNetwork, model: &SystemModel, dataset: &Dataset) -> Result<f64, EvalError> {
    let mut stable = 0usize;
    for s in &dataset.samples {
        let values = if model.is_model_based() {
            eigenvalues(&a_matrix(policy, model, &s.x, &s.y)?)?
        } else {
            eigenvalues(&a1_a2_matrices(policy, model, &s.x, &s.y)?.0)?
        };
        if values.iter().all(|v| v.re < 0.0) {
            stable += 1;
        }
    }
    Ok(stable as f64 / dataset.len().max(1) as f64)
}

/// Per-sample spectra and the robot-drift bound curve.
pub fn analyze_stability(
    policy: &PolicyNetwork,
    model: &SystemModel,
    dataset: &Dataset,
    eps: f64,
    horizon: f64,
    points: usize,
) -> Result<StabilityReport, EvalError> {
    if !(eps >= 0.0) || !(horizon >= 0.0) {
        return Err(EvalError::Usage("eps and horizon must be nonnegative".into()));
    }
    let mut samples = Vec::with_capacity(dataset.len());
    let (mut max1, mut max2) = (0.0f64, 0.0f64);
    for (index, s) in dataset.samples.iter().enumerate() {
        let (a1, a2) = a1_a2_matrices(policy, model, &s.x, &s.y)?;
        let values: Vec<Complex64> = if model.is_model_based() {
            eigenvalues(&a_matrix(policy, model, &s.x, &s.y)?)?
        } else {
            eigenvalues(&a1)?
        };
        let n1 = spectral_norm(&a1)?.value;
        let n2 = spectral_norm(&a2)?.value;
        max1 = max1.max(n1);
        max2 = max2.max(n2);
        let abscissa = values.iter().map(|v| v.re).fold(f64::NEG_INFINITY, f64::max);
        samples.push(SampleSpectrum {
            index,
            eigenvalues: values.iter().map(|v| (v.re, v.im)).collect(),
            abscissa,
            stable: values.iter().all(|v| v.re < 0.0),
            norm_a1: n1,
            norm_a2: n2,
        });
    }
    let stable = samples.iter().filter(|s| s.stable).count();
    let points = points.max(2);
    let bound_curve = (0..points)
        .map(|k| {
            let t = horizon * k as f64 / (points - 1) as f64;
            let b = if max1 > 0.0 {
                covariate_bound(max1, max2, eps, t)?
            } else {
                // Limit of the bound as |A1| -> 0.
                max2 * eps * t
            };
            Ok((t, b))
        })
        .collect::<Result<Vec<_>, LinalgError>>()?;
    Ok(StabilityReport {
        model_based: model.is_model_based(),
        stable_fraction: stable as f64 / samples.len().max(1) as f64,
        samples,
        max_norm_a1: max1,
        max_norm_a2: max2,
        eps,
        bound_curve,
    })
}
