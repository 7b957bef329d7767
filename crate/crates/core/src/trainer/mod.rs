//! Minibatch training of BC and Stable-BC policies.

mod adam;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Dataset, Sample};
use crate::policy::{Normalization, PolicyDims, PolicyError, PolicyNetwork};
use crate::stability::{build_loss, LossScale, LossSpec, StabilityError, SystemModel};

pub use adam::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bc,
    StableMb,
    StableMf,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Bc, Method::StableMb, Method::StableMf];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Bc => "bc",
            Method::StableMb => "stable_mb",
            Method::StableMf => "stable_mf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Fraction of epochs over which penalty weights ramp up from zero.
    pub warmup_fraction: f64,
    /// Divide each batch objective by the batch size.
    pub per_sample: bool,
    /// Standardize policy inputs and outputs with dataset statistics.
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Bc,
            lambda: 0.1,
            lambda1: 0.1,
            lambda2: 0.1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 2000,
            batch_size: 32,
            seed: 0,
            hidden: vec![64, 64],
            warmup_fraction: 0.1,
            per_sample: true,
            normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn loss_spec(&self) -> LossSpec {
        match self.method {
            Method::Bc => LossSpec::Bc,
            Method::StableMb => LossSpec::ModelBased { lambda: self.lambda },
            Method::StableMf => LossSpec::ModelFree {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
            },
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, v) in [("lambda", self.lambda), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden layer widths must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Penalty multiplier at `epoch`: a linear ramp from zero over the first
    /// `warmup_fraction` of training, then one.
    pub fn penalty_factor(&self, epoch: usize) -> f64 {
        let ramp = (self.warmup_fraction * self.epochs as f64).ceil() as usize;
        if ramp == 0 || epoch >= ramp {
            1.0
        } else {
            epoch as f64 / ramp as f64
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset problem: {0}")]
    Data(String),
    #[error(
        "non-finite {what} at epoch {epoch}, batch {batch} (objective {objective}, parameter norm {param_norm})"
    )]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
        objective: f64,
        param_norm: f64,
    },
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Loss components summed over every batch of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sum of squared action errors.
    pub bc: f64,
    /// Sum of eigenvalue penalties over samples (of `A` or of `A1`).
    pub eig_penalty: f64,
    /// Sum of `|A2|` over samples.
    pub coupling_norm: f64,
    /// Warm-up multiplier applied to every penalty weight.
    pub penalty_factor: f64,
    /// `factor * (lambda * eig_penalty)` or
    /// `factor * (lambda1 * coupling_norm + lambda2 * eig_penalty)`.
    pub weighted_penalty: f64,
    /// Sum over batches of the minimized objective.
    pub objective: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub method: Method,
    pub samples: usize,
    pub per_sample: bool,
    pub epochs: Vec<EpochRecord>,
    pub skipped_total: usize,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn final_bc_per_sample(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.bc / self.samples as f64)
    }
}

/// Trains a fresh policy on `dataset`. `model` supplies the dynamics
/// Jacobians for the Stable-BC methods and is ignored for plain BC.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    model: Option<&SystemModel>,
) -> Result<(PolicyNetwork, TrainReport), TrainError> {
    let policy = initial_policy(config, dataset)?;
    train_from(config, dataset, model, policy)
}

/// The policy `train` starts from: seeded initialization plus dataset
/// normalization.
pub fn initial_policy(config: &TrainConfig, dataset: &Dataset) -> Result<PolicyNetwork, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Data("dataset has no samples".into()));
    }
    let dims = PolicyDims::new(dataset.m, dataset.d, dataset.n, config.hidden.clone());
    let mut policy = PolicyNetwork::init(dims, config.seed)?;
    if config.normalize {
        let nz = Normalization::fit(
            dataset.samples.iter().map(|s| [s.x.as_slice(), s.y.as_slice()].concat()),
            dataset.samples.iter().map(|s| s.u.as_slice()),
        )
        .expect("dataset is nonempty");
        policy.set_normalization(nz)?;
    }
    Ok(policy)
}

/// Continues training `policy` with a fresh optimizer.
pub fn train_from(
    config: &TrainConfig,
    dataset: &Dataset,
    model: Option<&SystemModel>,
    mut policy: PolicyNetwork,
) -> Result<(PolicyNetwork, TrainReport), TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Data("dataset has no samples".into()));
    }
    let p = &policy.dims;
    if (p.m, p.d, p.n) != (dataset.m, dataset.d, dataset.n) {
        return Err(TrainError::Data(format!(
            "dataset dims (m={}, d={}, n={}) do not match the policy (m={}, d={}, n={})",
            dataset.m, dataset.d, dataset.n, p.m, p.d, p.n
        )));
    }
    let spec = config.loss_spec();
    let model = match config.method {
        Method::Bc => None,
        Method::StableMb => {
            let model = model.ok_or_else(|| TrainError::Config("stable_mb needs a system model".into()))?;
            if !model.is_model_based() {
                return Err(TrainError::Config(
                    "stable_mb requires a model-based environment (known environment dynamics); use stable_mf".into(),
                ));
            }
            Some(model)
        }
        Method::StableMf => Some(
            model.ok_or_else(|| TrainError::Config("stable_mf needs a system model".into()))?,
        ),
    };

    let started = Instant::now();
    let mut opt = Adam::new(config.adam(), &policy.net.param_shapes());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut skipped_total = 0;
    let mut batch_buf: Vec<Sample> = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let factor = config.penalty_factor(epoch);
        let mut rec = EpochRecord {
            epoch,
            bc: 0.0,
            eig_penalty: 0.0,
            coupling_norm: 0.0,
            penalty_factor: factor,
            weighted_penalty: 0.0,
            objective: 0.0,
            skipped: 0,
        };
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            batch_buf.clear();
            batch_buf.extend(chunk.iter().map(|&i| dataset.samples[i].clone()));
            let eval = build_loss(
                &policy,
                model,
                &batch_buf,
                spec,
                LossScale {
                    per_sample: config.per_sample,
                    penalty_factor: factor,
                },
            )?;
            let objective = eval.total_value();
            if !objective.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "loss",
                    epoch,
                    batch,
                    objective,
                    param_norm: policy.net.param_norm(),
                });
            }
            let grads = eval.graph.backward(eval.total).map_err(StabilityError::from)?;
            if !grads.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "gradient",
                    epoch,
                    batch,
                    objective,
                    param_norm: policy.net.param_norm(),
                });
            }
            if eval.skipped > 0 {
                log::debug!(
                    "epoch {epoch} batch {batch}: skipped {} degenerate penalty terms",
                    eval.skipped
                );
            }
            rec.bc += eval.bc;
            rec.eig_penalty += eval.eig_penalty;
            rec.coupling_norm += eval.coupling_norm;
            rec.weighted_penalty += eval.weighted_penalty;
            rec.objective += objective;
            rec.skipped += eval.skipped;
            opt.step(policy.net.params_mut(), &grads);
        }
        if !policy.net.is_finite() {
            return Err(TrainError::NonFinite {
                what: "parameters",
                epoch,
                batch: 0,
                objective: rec.objective,
                param_norm: policy.net.param_norm(),
            });
        }
        skipped_total += rec.skipped;
        log::trace!("epoch {epoch}: objective {}", rec.objective);
        epochs.push(rec);
    }
    if skipped_total > 0 {
        log::info!("skipped {skipped_total} degenerate penalty terms during training");
    }
    let report = TrainReport {
        method: config.method,
        samples: dataset.len(),
        per_sample: config.per_sample,
        epochs,
        skipped_total,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((policy, report))
}
