//! Command-line front end: data generation, training, evaluation and
//! stability analysis.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use stable_bc::datagen::{generate_for, Dataset, DatagenError};
use stable_bc::envs::pointmass::pointmass_model;
use stable_bc::envs::{Autoencoder, EnvConfig, EnvError, EnvName};
use stable_bc::eval::{
    analyze_stability, evaluate, evaluate_policy, EvalError, ExpertController, MetricsReport, Protocol, ProtocolSpec,
    RandomController,
};
use stable_bc::policy::{Checkpoint, CheckpointMeta, PolicyError};
use stable_bc::stability::{StabilityError, SystemModel};
use stable_bc::trainer::{train, Method, TrainError};

pub use config::RunConfig;

pub const AUTOENCODER_FILE: &str = "autoencoder.json";

/// A failed command, split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration (exit 1).
    Usage(anyhow::Error),
    /// Anything that went wrong while running (exit 2).
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<EnvError> for Failure {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Config(_) => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<DatagenError> for Failure {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Config(_) | DatagenError::Env(EnvError::Config(_)) => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Data(_) => Failure::Usage(e.into()),
            TrainError::Stability(StabilityError::Usage(_)) => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Usage(_) | EvalError::Env(EnvError::Config(_)) => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<PolicyError> for Failure {
    fn from(e: PolicyError) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CmdResult = Result<(), Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

#[derive(Debug, Parser)]
#[command(name = "stable-bc", version, about = "Behavior cloning with a closed-loop stability penalty")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the scripted expert and write a demonstration dataset.
    GenData(GenDataArgs),
    /// Train a policy on a dataset.
    Train(TrainArgs),
    /// Evaluate a policy (or a reference controller) under a test protocol.
    Eval(EvalArgs),
    /// Report closed-loop spectra and the drift bound over a dataset.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Environment name (driving, quadrotor, pointmass, toy).
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub demos: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training method (bc, stable_mb, stable_mf).
    #[arg(long)]
    pub method: Option<String>,
    /// Dataset file written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Expert,
    Random,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint written by train.
    #[arg(long, required_unless_present = "baseline")]
    pub policy: Option<PathBuf>,
    /// Evaluate a reference controller instead of a policy.
    #[arg(long, value_enum, conflicts_with = "policy")]
    pub baseline: Option<Baseline>,
    /// Environment for a baseline run; policies use the checkpoint's.
    #[arg(long)]
    pub env: Option<String>,
    /// Test protocol (matched, human_self_centered, ood_start, action_noise).
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Encoder for point-mass observations.
    #[arg(long)]
    pub autoencoder: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Analyze(a) => cmd_analyze(&a),
    }
}

fn parse_env(name: &str) -> Result<EnvName, Failure> {
    EnvName::parse(name).ok_or_else(|| {
        usage(format!(
            "unknown environment {name:?}; valid names: {}",
            EnvName::ALL.map(EnvName::as_str).join(", ")
        ))
    })
}

fn create_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .map_err(Failure::Runtime)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))
}

/// Dynamics model matching a dataset's observation size.
pub fn model_for(env: &EnvConfig, d: usize) -> Result<SystemModel, Failure> {
    if env.name == EnvName::Pointmass {
        return Ok(pointmass_model(d));
    }
    Ok(env.build(None)?.model())
}

#[derive(Serialize)]
struct GenDataSummary<'a> {
    env: &'a str,
    demos: usize,
    seed: u64,
    samples: usize,
    discarded: usize,
    m: usize,
    d: usize,
    n: usize,
    fingerprint: String,
}

pub fn cmd_gen_data(a: &GenDataArgs) -> CmdResult {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(e) = &a.env {
        cfg.env.name = parse_env(e)?;
    }
    if let Some(d) = a.demos {
        cfg.expert.demos = d;
    }
    if let Some(s) = a.seed {
        cfg.expert.seed = s;
    }
    if cfg.expert.demos == 0 {
        return Err(usage("--demos must be at least 1"));
    }
    let (ds, ae) = generate_for(&cfg.env, cfg.expert.demos, cfg.expert.seed)?;
    create_out(&a.out)?;
    ds.save(&a.out.join("dataset.jsonl")).map_err(|e| Failure::Runtime(e.into()))?;
    if let Some(ae) = ae {
        ae.save(&a.out.join(AUTOENCODER_FILE)).map_err(|e| Failure::Runtime(e.into()))?;
    }
    cfg.echo(&a.out)?;
    let summary = GenDataSummary {
        env: cfg.env.name.as_str(),
        demos: cfg.expert.demos,
        seed: cfg.expert.seed,
        samples: ds.len(),
        discarded: ds.provenance.discarded,
        m: ds.m,
        d: ds.d,
        n: ds.n,
        fingerprint: ds.fingerprint(),
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    println!("samples {}", summary.samples);
    println!("fingerprint {}", summary.fingerprint);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    env: &'a str,
    method: &'a str,
    samples: usize,
    epochs: usize,
    final_bc_per_sample: Option<f64>,
    final_objective: Option<f64>,
    skipped_penalty_terms: usize,
    dataset_fingerprint: String,
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load(path).map_err(|e| Failure::Runtime(e.into()))
}

pub fn cmd_train(a: &TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(m) = &a.method {
        cfg.train.method = Method::parse(m).ok_or_else(|| {
            usage(format!(
                "unknown method {m:?}; valid names: {}",
                Method::ALL.map(Method::as_str).join(", ")
            ))
        })?;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lambda {
        cfg.train.lambda = v;
    }
    if let Some(v) = a.lambda1 {
        cfg.train.lambda1 = v;
    }
    if let Some(v) = a.lambda2 {
        cfg.train.lambda2 = v;
    }
    let ds = load_dataset(&a.data)?;
    cfg.env.name = parse_env(&ds.provenance.env)?;
    let env = cfg.env.build(None)?;
    if cfg.train.method == Method::StableMb && !env.supports_model_based() {
        return Err(usage(format!(
            "method stable_mb needs a model-based environment with known environment dynamics, \
             but {} is model-free; use stable_mf",
            env.name()
        )));
    }
    let model = model_for(&cfg.env, ds.d)?;
    let (policy, report) = train(&cfg.train, &ds, Some(&model))?;
    log::info!("trained in {:.1}s", report.wall_time_secs);

    create_out(&a.out)?;
    let meta = CheckpointMeta {
        env: cfg.env.name.as_str().to_string(),
        method: cfg.train.method.as_str().to_string(),
        lambda: cfg.train.lambda,
        lambda1: cfg.train.lambda1,
        lambda2: cfg.train.lambda2,
        epochs: cfg.train.epochs,
        seed: cfg.train.seed,
        dataset_fingerprint: ds.fingerprint(),
    };
    let fingerprint = meta.dataset_fingerprint.clone();
    Checkpoint::new(policy, meta).save(&a.out.join("checkpoint.json"))?;
    let mut w = csv_writer(&a.out.join("train_log.csv"))?;
    for rec in &report.epochs {
        w.serialize(rec).context("cannot write training log")?;
    }
    w.flush().context("cannot write training log")?;
    cfg.echo(&a.out)?;
    let summary = TrainSummary {
        env: cfg.env.name.as_str(),
        method: cfg.train.method.as_str(),
        samples: report.samples,
        epochs: report.epochs.len(),
        final_bc_per_sample: report.final_bc_per_sample(),
        final_objective: report.epochs.last().map(|e| e.objective),
        skipped_penalty_terms: report.skipped_total,
        dataset_fingerprint: fingerprint,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    println!("checkpoint {}", a.out.join("checkpoint.json").display());
    Ok(())
}

#[derive(Serialize)]
struct EpisodeRow<'a> {
    episode: usize,
    seed: u64,
    status: &'a str,
    success: bool,
    steps: usize,
    cost: Option<f64>,
    final_error: Option<f64>,
    direction_changes: usize,
    clamped: u32,
    initial_x: String,
    initial_y: String,
}

fn join_values(v: &[f64]) -> String {
    v.iter().map(|c| format!("{c:?}")).collect::<Vec<_>>().join(";")
}

fn load_autoencoder(path: &Path) -> Result<Autoencoder, Failure> {
    Autoencoder::load(path).map_err(|e| Failure::Runtime(e.into()))
}

pub fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(p) = &a.protocol {
        cfg.eval.protocol = Protocol::parse(p)
            .ok_or_else(|| usage(format!("unknown protocol {p:?}; valid names: {}", Protocol::valid_names())))?;
    }
    if let Some(v) = a.episodes {
        cfg.eval.episodes = v;
    }
    if let Some(v) = a.seed {
        cfg.eval.seed = v;
    }
    if let Some(v) = a.noise {
        cfg.eval.noise = v;
    }
    if cfg.eval.episodes == 0 {
        return Err(usage("--episodes must be at least 1"));
    }
    let checkpoint = match &a.policy {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    if let Some(ck) = &checkpoint {
        cfg.env.name = parse_env(&ck.meta.env)?;
        if a.env.is_some() {
            return Err(usage("--env applies to baseline runs only; policies use their checkpoint's environment"));
        }
    } else if let Some(e) = &a.env {
        cfg.env.name = parse_env(e)?;
    }
    let encoder = match (&a.autoencoder, cfg.env.name) {
        (Some(p), EnvName::Pointmass) => Some(load_autoencoder(p)?),
        (Some(_), _) => return Err(usage("--autoencoder only applies to the pointmass environment")),
        (None, _) => None,
    };
    let spec = ProtocolSpec {
        protocol: cfg.eval.protocol,
        episodes: cfg.eval.episodes,
        seed: cfg.eval.seed,
        noise: cfg.eval.noise,
    };
    let report: MetricsReport = match (&checkpoint, a.baseline) {
        (Some(ck), _) => evaluate_policy(&ck.policy, &cfg.env, &spec, encoder)?,
        (None, Some(b)) => {
            let env = spec.configure(&cfg.env)?.build(encoder)?;
            match b {
                Baseline::Expert => evaluate(env.as_ref(), &mut ExpertController, &spec),
                Baseline::Random => {
                    let bound = cfg.env.pointmass.random_action_bound;
                    evaluate(env.as_ref(), &mut RandomController { bound }, &spec)
                }
            }
        }
        (None, None) => return Err(usage("either --policy or --baseline is required")),
    };
    create_out(&a.out)?;
    let mut w = csv_writer(&a.out.join("episodes.csv"))?;
    for r in &report.episodes {
        w.serialize(EpisodeRow {
            episode: r.episode,
            seed: r.seed,
            status: r.status.as_str(),
            success: r.success,
            steps: r.steps,
            cost: r.cost,
            final_error: r.final_error,
            direction_changes: r.direction_changes,
            clamped: r.clamped,
            initial_x: join_values(&r.initial_x),
            initial_y: join_values(&r.initial_y),
        })
        .context("cannot write episodes")?;
    }
    w.flush().context("cannot write episodes")?;
    cfg.echo(&a.out)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        env: &'a str,
        protocol: &'a ProtocolSpec,
        aggregates: &'a stable_bc::eval::Aggregates,
    }
    write_json(
        &a.out.join("summary.json"),
        &Summary {
            env: &report.env,
            protocol: &report.protocol,
            aggregates: &report.aggregates,
        },
    )?;
    let agg = &report.aggregates;
    println!("episodes {}", agg.episodes);
    println!("success_rate {:.4}", agg.success_rate.mean);
    if let Some(c) = agg.cost {
        println!("mean_cost {:.6} (sem {:.6})", c.mean, c.sem);
    }
    if let Some(e) = agg.final_error {
        println!("mean_final_error {:.6} (sem {:.6})", e.mean, e.sem);
    }
    Ok(())
}

#[derive(Serialize)]
struct SpectrumRow {
    index: usize,
    abscissa: f64,
    stable: bool,
    norm_a1: f64,
    norm_a2: f64,
    eigenvalues: String,
}

#[derive(Serialize)]
struct BoundRow {
    t: f64,
    bound: f64,
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> CmdResult {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(v) = a.eps {
        cfg.analyze.eps = v;
    }
    if let Some(v) = a.horizon {
        cfg.analyze.horizon = v;
    }
    if let Some(v) = a.points {
        cfg.analyze.points = v;
    }
    let ck = Checkpoint::load(&a.policy)?;
    let ds = load_dataset(&a.data)?;
    cfg.env.name = parse_env(&ck.meta.env)?;
    if ds.provenance.env != ck.meta.env {
        return Err(usage(format!(
            "dataset comes from {} but the policy was trained on {}",
            ds.provenance.env, ck.meta.env
        )));
    }
    let p = &ck.policy.dims;
    if (p.m, p.d, p.n) != (ds.m, ds.d, ds.n) {
        return Err(usage(format!(
            "dataset dims (m={}, d={}, n={}) do not match the policy (m={}, d={}, n={})",
            ds.m, ds.d, ds.n, p.m, p.d, p.n
        )));
    }
    let model = model_for(&cfg.env, ds.d)?;
    let report = analyze_stability(
        &ck.policy,
        &model,
        &ds,
        cfg.analyze.eps,
        cfg.analyze.horizon,
        cfg.analyze.points,
    )?;
    create_out(&a.out)?;
    let mut w = csv_writer(&a.out.join("spectra.csv"))?;
    for s in &report.samples {
        let eig = s
            .eigenvalues
            .iter()
            .map(|(re, im)| format!("{re:?}{im:+?}i"))
            .collect::<Vec<_>>()
            .join(";");
        w.serialize(SpectrumRow {
            index: s.index,
            abscissa: s.abscissa,
            stable: s.stable,
            norm_a1: s.norm_a1,
            norm_a2: s.norm_a2,
            eigenvalues: eig,
        })
        .context("cannot write spectra")?;
    }
    w.flush().context("cannot write spectra")?;
    let mut w = csv_writer(&a.out.join("bound.csv"))?;
    for &(t, bound) in &report.bound_curve {
        w.serialize(BoundRow { t, bound }).context("cannot write bound curve")?;
    }
    w.flush().context("cannot write bound curve")?;
    cfg.echo(&a.out)?;
    #[derive(Serialize)]
    struct Summary {
        model_based: bool,
        samples: usize,
        stable_fraction: f64,
        max_norm_a1: f64,
        max_norm_a2: f64,
        eps: f64,
        horizon: f64,
    }
    write_json(
        &a.out.join("summary.json"),
        &Summary {
            model_based: report.model_based,
            samples: report.samples.len(),
            stable_fraction: report.stable_fraction,
            max_norm_a1: report.max_norm_a1,
            max_norm_a2: report.max_norm_a2,
            eps: report.eps,
            horizon: cfg.analyze.horizon,
        },
    )?;
    println!("stable_fraction {:.4}", report.stable_fraction);
    Ok(())
}
