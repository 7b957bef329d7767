//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the report is always visible in the test
//! output. Exits nonzero when any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{
    char_poly_roots, constant_toy_model, fd_gradient, flat_gradient, gradient_mismatch, match_distance, random_mat,
    rk4_step, spectral_norm_oracle,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stable_bc::datagen::{generate, generate_for, Sample};
use stable_bc::envs::pointmass::pointmass_model;
use stable_bc::envs::{EnvConfig, EnvName};
use stable_bc::eval::{evaluate, evaluate_policy, stable_fraction, Protocol, ProtocolSpec, RandomController, Stat};
use stable_bc::linalg::{covariate_bound, eigenvalues, spectral_norm, Mat};
use stable_bc::policy::{Activation, Layer, Normalization, PolicyDims, PolicyNetwork};
use stable_bc::stability::{a1_a2_matrices, build_loss, LossScale, LossSpec, SystemModel};
use stable_bc::trainer::{train, Method, TrainConfig};
use stable_bc_cli::{cmd_eval, cmd_gen_data, cmd_train, EvalArgs, GenDataArgs, TrainArgs};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn criterion_1() -> Outcome {
    let model = constant_toy_model(0);
    let mut worst = String::new();
    let mut checks = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let mut policy = PolicyNetwork::init(PolicyDims::new(2, 0, 2, vec![16]), seed).unwrap();
        policy.jitter(&mut rng, 0.3);
        let samples: Vec<Sample> = (0..6)
            .map(|_| Sample {
                x: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                y: vec![],
                u: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect();
        for spec in [
            LossSpec::Bc,
            LossSpec::ModelBased { lambda: 0.7 },
            LossSpec::ModelFree {
                lambda1: 0.4,
                lambda2: 0.9,
            },
        ] {
            let eval = build_loss(&policy, Some(&model), &samples, spec, LossScale::default()).unwrap();
            let analytic = flat_gradient(&policy, &eval);
            let mut probe = policy.clone();
            let numeric = fd_gradient(&policy.flat_params(), 1e-5, |t| {
                probe.set_flat_params(t).unwrap();
                build_loss(&probe, Some(&model), &samples, spec, LossScale::default())
                    .unwrap()
                    .total_value()
            });
            checks += 1;
            if let Some(m) = gradient_mismatch(&analytic, &numeric, 1e-4, 1e-6) {
                worst = format!("seed {seed} {}: {m}", spec.name());
            }
        }
    }
    if worst.is_empty() {
        outcome(true, format!("{checks} loss gradients match central differences"))
    } else {
        outcome(false, worst)
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let (mut eig_err, mut norm_err) = (0.0f64, 0.0f64);
    for n in [2, 3] {
        for _ in 0..1000 {
            let a = random_mat(&mut rng, n, n, 1.0);
            eig_err = eig_err.max(match_distance(&eigenvalues(&a).unwrap(), &char_poly_roots(&a)));
            norm_err = norm_err.max((spectral_norm(&a).unwrap().value - spectral_norm_oracle(&a)).abs());
        }
    }
    outcome(
        eig_err <= 1e-8 && norm_err <= 1e-8,
        format!("max eigenvalue error {eig_err:.1e}, max norm error {norm_err:.1e}"),
    )
}

fn bits(v: Vec<f64>) -> Vec<u64> {
    v.into_iter().map(f64::to_bits).collect()
}

fn criterion_3() -> Outcome {
    let env = EnvConfig::with_name(EnvName::Toy).build(None).unwrap();
    let model = env.model();
    let ds = generate(env.as_ref(), 3, 2).unwrap();
    let base = TrainConfig {
        epochs: 40,
        hidden: vec![16],
        seed: 3,
        ..TrainConfig::default()
    };
    let (bc, bc_report) = train(&base, &ds, Some(&model)).unwrap();
    let mb = TrainConfig {
        method: Method::StableMb,
        lambda: 0.0,
        ..base.clone()
    };
    let mf = TrainConfig {
        method: Method::StableMf,
        lambda1: 0.0,
        lambda2: 0.0,
        ..base.clone()
    };
    let mut same = true;
    for cfg in [mb, mf] {
        let (p, report) = train(&cfg, &ds, Some(&model)).unwrap();
        same &= bits(p.flat_params()) == bits(bc.flat_params());
        same &= report
            .epochs
            .iter()
            .zip(&bc_report.epochs)
            .all(|(a, b)| a.bc.to_bits() == b.bc.to_bits() && a.objective.to_bits() == b.objective.to_bits());
    }
    outcome(same, "zero-weight stable_mb and stable_mf reproduce the BC run bit for bit")
}

fn criterion_4() -> Outcome {
    let env = EnvConfig::with_name(EnvName::Toy).build(None).unwrap();
    let model = env.model();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..5u64 {
        let ds = generate(env.as_ref(), 5, seed).unwrap();
        let cfg = TrainConfig {
            epochs: 1000,
            hidden: vec![32, 32],
            lr: 3e-3,
            seed,
            ..TrainConfig::default()
        };
        let (bc, _) = train(&cfg, &ds, Some(&model)).unwrap();
        let stable_cfg = TrainConfig {
            method: Method::StableMb,
            lambda: 30.0,
            ..cfg
        };
        let (sbc, _) = train(&stable_cfg, &ds, Some(&model)).unwrap();
        let fb = stable_fraction(&bc, &model, &ds).unwrap();
        let fs = stable_fraction(&sbc, &model, &ds).unwrap();
        pass &= fs >= 0.9 && fs > fb;
        lines.push(format!("{fb:.2}->{fs:.2}"));
    }
    outcome(pass, format!("stable fraction bc->stable_mb per seed: {}", lines.join(" ")))
}

fn mean_cost(policy: &PolicyNetwork, env: &EnvConfig, protocol: Protocol) -> f64 {
    let spec = ProtocolSpec {
        protocol,
        episodes: 50,
        seed: 1000,
        noise: 0.0,
    };
    evaluate_policy(policy, env, &spec, None).unwrap().aggregates.cost.unwrap().mean
}

fn criterion_5() -> Outcome {
    let cfg_env = EnvConfig::with_name(EnvName::Driving);
    let env = cfg_env.build(None).unwrap();
    let model = env.model();
    let protocols = [Protocol::OodStart, Protocol::HumanSelfCentered];
    let mut wins = [0usize; 2];
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let ds = generate(env.as_ref(), 15, seed).unwrap();
        let cfg = TrainConfig {
            epochs: 300,
            hidden: vec![64, 64],
            lr: 1e-3,
            seed,
            ..TrainConfig::default()
        };
        let (bc, _) = train(&cfg, &ds, Some(&model)).unwrap();
        let mf_cfg = TrainConfig {
            method: Method::StableMf,
            lambda1: 0.1,
            lambda2: 0.1,
            ..cfg
        };
        let (mf, _) = train(&mf_cfg, &ds, Some(&model)).unwrap();
        for (k, &p) in protocols.iter().enumerate() {
            let (cb, cm) = (mean_cost(&bc, &cfg_env, p), mean_cost(&mf, &cfg_env, p));
            if cm < cb {
                wins[k] += 1;
            }
            lines.push(format!("{}:{cb:.2}/{cm:.2}", p.as_str()));
        }
    }
    outcome(
        wins.iter().all(|&w| w >= 4),
        format!(
            "stable_mf cost below bc in {}/5 (ood_start) and {}/5 (human_self_centered) seeds; bc/stable_mf {}",
            wins[0],
            wins[1],
            lines.join(" ")
        ),
    )
}

/// Seed-averaged success rate and the standard error of that average.
fn pooled(stats: &[Stat]) -> (f64, f64) {
    let n = stats.len() as f64;
    let mean = stats.iter().map(|s| s.mean).sum::<f64>() / n;
    let sem = stats.iter().map(|s| s.sem * s.sem).sum::<f64>().sqrt() / n;
    (mean, sem)
}

fn monotone_within_sem(points: &[(f64, f64)]) -> bool {
    points
        .windows(2)
        .all(|w| w[1].0 >= w[0].0 - (w[0].1 * w[0].1 + w[1].1 * w[1].1).sqrt())
}

fn criterion_6() -> Outcome {
    let cfg_env = EnvConfig::with_name(EnvName::Quadrotor);
    let env = cfg_env.build(None).unwrap();
    let model = env.model();
    let spec = ProtocolSpec {
        protocol: Protocol::ActionNoise,
        episodes: 100,
        seed: 99,
        noise: 0.1,
    };
    let demos = [5usize, 20, 50];
    let mut rates: Vec<[Vec<Stat>; 2]> = demos.iter().map(|_| [Vec::new(), Vec::new()]).collect();
    let mut wins = 0;
    for seed in 0..5u64 {
        for (k, &n) in demos.iter().enumerate() {
            let ds = generate(env.as_ref(), n, seed).unwrap();
            let cfg = TrainConfig {
                epochs: QUAD_EPOCHS,
                hidden: vec![64, 64],
                lr: 1e-3,
                seed,
                ..TrainConfig::default()
            };
            let (bc, _) = train(&cfg, &ds, Some(&model)).unwrap();
            let mb_cfg = TrainConfig {
                method: Method::StableMb,
                lambda: 0.1,
                ..cfg
            };
            let (mb, _) = train(&mb_cfg, &ds, Some(&model)).unwrap();
            let rb = evaluate_policy(&bc, &cfg_env, &spec, None).unwrap().aggregates.success_rate;
            let rm = evaluate_policy(&mb, &cfg_env, &spec, None).unwrap().aggregates.success_rate;
            if n == 20 && rm.mean >= rb.mean {
                wins += 1;
            }
            rates[k][0].push(rb);
            rates[k][1].push(rm);
        }
    }
    let curves: Vec<Vec<(f64, f64)>> = (0..2).map(|m| rates.iter().map(|r| pooled(&r[m])).collect()).collect();
    let fmt = |c: &[(f64, f64)]| c.iter().map(|(m, s)| format!("{m:.3}±{s:.3}")).collect::<Vec<_>>().join(" ");
    let monotone = curves.iter().all(|c| monotone_within_sem(c));
    outcome(
        wins >= 4 && monotone,
        format!(
            "stable_mb >= bc at 20 demos in {wins}/5 seeds; success vs demos 5/20/50: bc {} stable_mb {}",
            fmt(&curves[0]),
            fmt(&curves[1])
        ),
    )
}

const QUAD_EPOCHS: usize = 1000;

fn criterion_7() -> Outcome {
    let cfg_env = EnvConfig::with_name(EnvName::Pointmass);
    let env = cfg_env.build(None).unwrap();
    let mut random = RandomController {
        bound: cfg_env.pointmass.random_action_bound,
    };
    let mc = ProtocolSpec {
        protocol: Protocol::Matched,
        episodes: 1000,
        seed: 2024,
        noise: 0.0,
    };
    let random_fse = evaluate(env.as_ref(), &mut random, &mc).aggregates.final_error.unwrap().mean;
    let baseline_ok = (random_fse - 10.0).abs() <= 1.5;
    let spec = ProtocolSpec {
        protocol: Protocol::Matched,
        episodes: 25,
        seed: 77,
        noise: 0.0,
    };
    let mut ordered = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let (ds, ae) = generate_for(&cfg_env, 50, seed).unwrap();
        let ae = ae.unwrap();
        let model = pointmass_model(ds.d);
        let cfg = TrainConfig {
            epochs: 500,
            hidden: vec![64, 64],
            seed,
            ..TrainConfig::default()
        };
        let (bc, _) = train(&cfg, &ds, Some(&model)).unwrap();
        let mf_cfg = TrainConfig {
            method: Method::StableMf,
            lambda1: 0.1,
            lambda2: 0.1,
            ..cfg
        };
        let (mf, _) = train(&mf_cfg, &ds, Some(&model)).unwrap();
        let fse = |p: &PolicyNetwork| {
            evaluate_policy(p, &cfg_env, &spec, Some(ae.clone()))
                .unwrap()
                .aggregates
                .final_error
                .unwrap()
                .mean
        };
        let (eb, em) = (fse(&bc), fse(&mf));
        if em < eb && eb < random_fse {
            ordered += 1;
        }
        lines.push(format!("{eb:.2}/{em:.2}"));
    }
    outcome(
        baseline_ok && ordered >= 4,
        format!(
            "random final error {random_fse:.3}; stable_mf < bc < random in {ordered}/5 seeds; bc/stable_mf {}",
            lines.join(" ")
        ),
    )
}

fn linear_driving_policy(k: &Mat, l: &Mat) -> PolicyNetwork {
    PolicyNetwork::from_layers(
        2,
        2,
        vec![Layer {
            weights: k.hcat(l).unwrap(),
            bias: Mat::zeros(2, 1),
        }],
        Activation::Tanh,
        Normalization::identity(4, 2),
    )
    .unwrap()
}

fn criterion_8() -> Outcome {
    let env = EnvConfig::with_name(EnvName::Driving).build(None).unwrap();
    let model: SystemModel = env.model();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let (horizon, h) = (4.0, 0.01);
    let steps = (horizon / h) as usize;
    let mut worst_ratio = 0.0f64;
    let mut trials = 0;
    while trials < 100 {
        let k = random_mat(&mut rng, 2, 2, 1.5);
        if char_poly_roots(&k).iter().any(|z| z.re >= -0.05) {
            continue;
        }
        trials += 1;
        let l = random_mat(&mut rng, 2, 2, 1.0);
        let policy = linear_driving_policy(&k, &l);
        let x0 = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let y0 = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let (a1, a2) = a1_a2_matrices(&policy, &model, &x0, &y0).unwrap();
        let (n1, n2) = (spectral_norm_oracle(&a1), spectral_norm_oracle(&a2));
        let eps = rng.gen_range(0.05..0.5);
        let (w1, w2, phase) = (rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0), rng.gen_range(0.0..6.3));
        // Nominal environment trajectory and a shifted copy with |e_y| <= eps.
        let y_ref = move |t: f64| [y0[0] + 0.3 * t, y0[1] - 0.2 * t];
        let shift = move |t: f64| {
            let v = [(w1 * t + phase).sin(), (w2 * t).cos()];
            let n = (v[0] * v[0] + v[1] * v[1]).sqrt().max(1.0);
            [eps * v[0] / n, eps * v[1] / n]
        };
        let nominal = |t: f64, x: &[f64]| policy.act(x, &y_ref(t)).unwrap();
        let shifted = |t: f64, x: &[f64]| {
            let (y, e) = (y_ref(t), shift(t));
            policy.act(x, &[y[0] + e[0], y[1] + e[1]]).unwrap()
        };
        let (mut xa, mut xb) = (x0.to_vec(), x0.to_vec());
        for i in 0..steps {
            let t = i as f64 * h;
            xa = rk4_step(t, &xa, h, &nominal);
            xb = rk4_step(t, &xb, h, &shifted);
            let ex = ((xa[0] - xb[0]).powi(2) + (xa[1] - xb[1]).powi(2)).sqrt();
            let bound = covariate_bound(n1, n2, eps, t + h).unwrap();
            worst_ratio = worst_ratio.max(ex / bound);
        }
    }
    outcome(
        worst_ratio <= 1.0,
        format!("{trials} trials; max simulated drift / bound = {worst_ratio:.3}"),
    )
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn criterion_9() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut identical = Vec::new();
    let runs: Vec<_> = ["a", "b"].iter().map(|r| root.path().join(r)).collect();
    for dir in &runs {
        cmd_gen_data(&GenDataArgs {
            config: None,
            env: Some("driving".into()),
            demos: Some(3),
            seed: Some(11),
            out: dir.join("data"),
        })
        .unwrap();
        cmd_train(&TrainArgs {
            config: None,
            method: Some("stable_mf".into()),
            data: dir.join("data").join("dataset.jsonl"),
            out: dir.join("train"),
            seed: Some(5),
            epochs: Some(30),
            lambda: None,
            lambda1: None,
            lambda2: None,
        })
        .unwrap();
        cmd_eval(&EvalArgs {
            config: None,
            policy: Some(dir.join("train").join("checkpoint.json")),
            baseline: None,
            env: None,
            protocol: Some("ood_start".into()),
            episodes: Some(10),
            seed: Some(3),
            noise: None,
            autoencoder: None,
            out: dir.join("eval"),
        })
        .unwrap();
    }
    for stage in ["data", "train", "eval"] {
        let same = read_dir_bytes(&runs[0].join(stage)) == read_dir_bytes(&runs[1].join(stage));
        identical.push((stage, same));
    }
    let pass = identical.iter().all(|(_, s)| *s);
    let detail = identical
        .iter()
        .map(|(stage, same)| format!("{stage} {}", if *same { "identical" } else { "differs" }))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, detail)
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("1 gradient correctness", criterion_1, minutes(2)),
        ("2 eigen and norm oracles", criterion_2, minutes(1)),
        ("3 zero weights reduce to BC", criterion_3, minutes(1)),
        ("4 toy stabilization", criterion_4, minutes(10)),
        ("5 driving trend", criterion_5, minutes(30)),
        ("6 quadrotor trend", criterion_6, minutes(45)),
        ("7 point-mass visual", criterion_7, minutes(30)),
        ("8 bound soundness", criterion_8, minutes(2)),
        ("9 determinism", criterion_9, minutes(5)),
    ];
    let only: Option<String> = std::env::var("ACCEPTANCE_ONLY").ok();
    let mut failed = 0;
    for (name, run, budget) in criteria {
        if let Some(o) = &only {
            if !o.split(',').any(|k| name.starts_with(k.trim())) {
                continue;
            }
        }
        let start = Instant::now();
        let out = run();
        let elapsed = start.elapsed();
        let pass = out.pass && elapsed <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {name}: {} ({:.1}s, budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
