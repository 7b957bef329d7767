use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stable_bc::datagen::{generate, Dataset, Provenance, Sample};
use stable_bc::envs::{EnvConfig, EnvName};
use stable_bc::eval::stable_fraction;
use stable_bc::linalg::Mat;
use stable_bc::trainer::{train, Method, TrainConfig, TrainError};

fn toy() -> EnvConfig {
    EnvConfig::with_name(EnvName::Toy)
}

fn small(method: Method, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        epochs,
        seed,
        hidden: vec![16],
        lr: 3e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn bc_recovers_a_realizable_linear_expert() {
    let k = Mat::from_rows(&[[-1.5, 0.5], [0.25, -1.0]]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ds = Dataset::new(
        2,
        0,
        2,
        Provenance {
            env: "toy".into(),
            seed: 6,
            demos: 200,
            discarded: 0,
        },
    );
    for _ in 0..200 {
        let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u = k.matvec(&x).unwrap();
        ds.push(Sample { x, y: vec![], u }).unwrap();
    }
    let (policy, report) = train(&small(Method::Bc, 300, 0), &ds, None).unwrap();
    let loss = report.final_bc_per_sample().unwrap();
    assert!(loss < 1e-3, "final BC loss {loss}");
    let j = policy.input_jacobian_at(&[0.1, -0.1], &[]).unwrap();
    assert!(j.sub(&k).unwrap().max_abs() < 0.1, "{j:?}");
}

#[test]
fn zero_weights_reproduce_bc_bit_for_bit() {
    let env = toy().build(None).unwrap();
    let model = env.model();
    let ds = generate(env.as_ref(), 3, 4).unwrap();
    let (bc, bc_report) = train(&small(Method::Bc, 30, 9), &ds, Some(&model)).unwrap();
    let mut mb = small(Method::StableMb, 30, 9);
    mb.lambda = 0.0;
    let mut mf = small(Method::StableMf, 30, 9);
    mf.lambda1 = 0.0;
    mf.lambda2 = 0.0;
    for cfg in [mb, mf] {
        let (p, report) = train(&cfg, &ds, Some(&model)).unwrap();
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(p.flat_params()), bits(bc.flat_params()), "{}", cfg.method);
        for (a, b) in report.epochs.iter().zip(&bc_report.epochs) {
            assert_eq!(a.bc.to_bits(), b.bc.to_bits());
            assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        }
    }
}

#[test]
fn training_is_deterministic() {
    let env = toy().build(None).unwrap();
    let model = env.model();
    let ds = generate(env.as_ref(), 3, 1).unwrap();
    let mut cfg = small(Method::StableMb, 20, 2);
    cfg.lambda = 1.0;
    let (a, ra) = train(&cfg, &ds, Some(&model)).unwrap();
    let (b, rb) = train(&cfg, &ds, Some(&model)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.epochs, rb.epochs);
}

#[test]
fn stable_mb_raises_the_stable_fraction_on_the_unstable_toy() {
    let env = toy().build(None).unwrap();
    let model = env.model();
    let ds = generate(env.as_ref(), 5, 0).unwrap();
    let mut cfg = TrainConfig {
        epochs: 300,
        hidden: vec![32, 32],
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let (bc, _) = train(&cfg, &ds, Some(&model)).unwrap();
    cfg.method = Method::StableMb;
    cfg.lambda = 30.0;
    let (stable, report) = train(&cfg, &ds, Some(&model)).unwrap();
    let before = stable_fraction(&bc, &model, &ds).unwrap();
    let after = stable_fraction(&stable, &model, &ds).unwrap();
    assert!(after > before, "stable fraction {before} -> {after}");
    let first = &report.epochs[0];
    let last = report.epochs.last().unwrap();
    assert_eq!(first.penalty_factor, 0.0);
    assert_eq!(last.penalty_factor, 1.0);
    assert!(last.eig_penalty < 0.1 * ds.len() as f64);
}

#[test]
fn stable_mb_needs_environment_dynamics() {
    let env = EnvConfig::with_name(EnvName::Driving).build(None).unwrap();
    let ds = generate(env.as_ref(), 1, 0).unwrap();
    let model = env.model();
    let cfg = small(Method::StableMb, 1, 0);
    assert!(matches!(train(&cfg, &ds, Some(&model)), Err(TrainError::Config(_))));
}

#[test]
fn divergence_aborts_with_a_diagnostic() {
    let env = toy().build(None).unwrap();
    let ds = generate(env.as_ref(), 2, 0).unwrap();
    let mut cfg = small(Method::Bc, 50, 0);
    cfg.lr = 1e300;
    match train(&cfg, &ds, None) {
        Err(e @ TrainError::NonFinite { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains("epoch"), "{msg}");
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let env = toy().build(None).unwrap();
    let ds = generate(env.as_ref(), 1, 0).unwrap();
    for cfg in [
        TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(train(&cfg, &ds, None), Err(TrainError::Config(_))));
    }
}

#[test]
fn warmup_ramps_linearly() {
    let cfg = TrainConfig {
        epochs: 100,
        warmup_fraction: 0.1,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.penalty_factor(0), 0.0);
    assert_eq!(cfg.penalty_factor(5), 0.5);
    assert_eq!(cfg.penalty_factor(10), 1.0);
    assert_eq!(cfg.penalty_factor(99), 1.0);
    let none = TrainConfig {
        warmup_fraction: 0.0,
        ..cfg
    };
    assert_eq!(none.penalty_factor(0), 1.0);
}
