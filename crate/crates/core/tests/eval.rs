use rand_chacha::ChaCha8Rng;
use stable_bc::datagen::generate;
use stable_bc::envs::{EnvConfig, EnvName, Environment, State, Status};
use stable_bc::eval::{
    analyze_stability, direction_changes, episode_seed, evaluate, rollout, Aggregates, Controller, EvalError,
    ExpertController, Protocol, ProtocolSpec, RandomController, DIRECTION_THRESHOLD_DEG,
};
use stable_bc::linalg::Mat;
use stable_bc::policy::{Activation, Layer, Normalization, PolicyNetwork};

fn spec(protocol: Protocol, episodes: usize, seed: u64) -> ProtocolSpec {
    ProtocolSpec {
        protocol,
        episodes,
        seed,
        noise: 0.1,
    }
}

#[test]
fn driving_only_protocols_are_rejected_elsewhere() {
    let quad = EnvConfig::with_name(EnvName::Quadrotor);
    for p in [Protocol::HumanSelfCentered, Protocol::OodStart] {
        assert!(matches!(spec(p, 1, 0).configure(&quad), Err(EvalError::Usage(_))));
    }
    assert!(spec(Protocol::ActionNoise, 1, 0).configure(&quad).is_ok());
    assert!(Protocol::parse("sideways").is_none());
    assert!(Protocol::valid_names().contains("human_self_centered"));
}

#[test]
fn paired_controllers_share_initial_conditions() {
    let env = EnvConfig::with_name(EnvName::Driving).build(None).unwrap();
    let s = spec(Protocol::Matched, 20, 5);
    let a = evaluate(env.as_ref(), &mut ExpertController, &s);
    let b = evaluate(env.as_ref(), &mut RandomController { bound: 2.0 }, &s);
    for (x, y) in a.episodes.iter().zip(&b.episodes) {
        assert_eq!(x.seed, y.seed);
        assert_eq!(x.initial_x, y.initial_x);
        assert_eq!(x.initial_y, y.initial_y);
    }
    // The expert is the best-case reference on the matched protocol.
    assert!(a.aggregates.cost.unwrap().mean < b.aggregates.cost.unwrap().mean);
}

#[test]
fn rollouts_are_reproducible() {
    let env = EnvConfig::with_name(EnvName::Quadrotor).build(None).unwrap();
    let a = rollout(env.as_ref(), &mut ExpertController, 0.1, 77);
    let b = rollout(env.as_ref(), &mut ExpertController, 0.1, 77);
    assert_eq!(a, b);
    let c = rollout(env.as_ref(), &mut ExpertController, 0.0, 77);
    assert_eq!(a.states[0], c.states[0]);
    assert_ne!(a.actions, c.actions);
}

#[test]
fn aggregates_equal_recomputation_from_records() {
    let env = EnvConfig::with_name(EnvName::Driving).build(None).unwrap();
    let r = evaluate(env.as_ref(), &mut RandomController { bound: 2.0 }, &spec(Protocol::Matched, 30, 8));
    assert_eq!(Aggregates::from_records(&r.episodes), r.aggregates);
    let costs: Vec<f64> = r.episodes.iter().map(|e| e.cost.unwrap()).collect();
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    assert!((r.aggregates.cost.unwrap().mean - mean).abs() < 1e-12);
    assert_eq!(r.aggregates.episodes, 30);
}

#[test]
fn episode_cost_sums_step_costs() {
    let env = EnvConfig::with_name(EnvName::Driving).build(None).unwrap();
    let traj = rollout(env.as_ref(), &mut ExpertController, 0.0, 3);
    let cost = env.episode_cost(&traj.states).unwrap();
    let by_hand = stable_bc::eval::driving_episode_cost(&traj, &[1.75, 0.0]);
    assert!((cost - by_hand).abs() < 1e-12);
    assert_eq!(traj.actions.len(), 20);
    assert_eq!(traj.status, Status::Completed);
}

#[test]
fn random_pointmass_final_error_is_about_ten() {
    let cfg = EnvConfig::with_name(EnvName::Pointmass);
    let env = cfg.build(None).unwrap();
    let mut c = RandomController {
        bound: cfg.pointmass.random_action_bound,
    };
    let r = evaluate(env.as_ref(), &mut c, &spec(Protocol::Matched, 1000, 2024));
    let fse = r.aggregates.final_error.unwrap().mean;
    assert!((fse - 10.0).abs() <= 1.5, "random final state error {fse}");
}

struct NanController;

impl Controller for NanController {
    fn act(&mut self, _env: &dyn Environment, _s: &State, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![f64::NAN, 0.0]
    }
}

#[test]
fn non_finite_actions_fail_the_episode() {
    let env = EnvConfig::with_name(EnvName::Toy).build(None).unwrap();
    let t = rollout(env.as_ref(), &mut NanController, 0.0, 0);
    assert_eq!(t.status, Status::Failed);
    assert!(t.diagnostic.is_some());
    assert!(t.actions.is_empty());
}

#[test]
fn direction_changes_count_turns() {
    let a = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
    assert_eq!(direction_changes(&a, DIRECTION_THRESHOLD_DEG), 2);
}

#[test]
fn episode_seeds_are_protocol_specific() {
    assert_ne!(episode_seed(1, 0), episode_seed(2, 0));
    assert_eq!(episode_seed(1, 4), episode_seed(1, 4));
}

fn linear_policy(k: Mat) -> PolicyNetwork {
    let (n, cols) = k.shape();
    PolicyNetwork::from_layers(
        2,
        cols - 2,
        vec![Layer {
            weights: k,
            bias: Mat::zeros(n, 1),
        }],
        Activation::Tanh,
        Normalization::identity(cols, n),
    )
    .unwrap()
}

#[test]
fn analyzer_reports_stable_linear_policy() {
    let env = EnvConfig::with_name(EnvName::Driving).build(None).unwrap();
    let ds = generate(env.as_ref(), 2, 0).unwrap();
    let p = linear_policy(Mat::from_rows(&[[-1.0, 0.2, 0.1, 0.0], [0.0, -0.5, 0.0, 0.3]]));
    let r = analyze_stability(&p, &env.model(), &ds, 0.2, 2.0, 11).unwrap();
    assert_eq!(r.samples.len(), ds.len());
    assert_eq!(r.stable_fraction, 1.0);
    assert!(!r.model_based);
    assert_eq!(r.bound_curve.len(), 11);
    assert_eq!(r.bound_curve[0], (0.0, 0.0));
    assert!(r.bound_curve.windows(2).all(|w| w[1].1 >= w[0].1));
    let zero = analyze_stability(&p, &env.model(), &ds, 0.0, 2.0, 11).unwrap();
    assert!(zero.bound_curve.iter().all(|&(_, b)| b == 0.0));
}

#[test]
fn analyzer_handles_vanishing_self_coupling() {
    let env = EnvConfig::with_name(EnvName::Driving).build(None).unwrap();
    let ds = generate(env.as_ref(), 1, 0).unwrap();
    let p = linear_policy(Mat::from_rows(&[[0.0, 0.0, 0.5, 0.0], [0.0, 0.0, 0.0, 0.5]]));
    let r = analyze_stability(&p, &env.model(), &ds, 0.1, 1.0, 3).unwrap();
    assert_eq!(r.max_norm_a1, 0.0);
    assert!((r.bound_curve[2].1 - 0.5 * 0.1 * 1.0).abs() < 1e-15);
    assert_eq!(r.stable_fraction, 0.0);
}
