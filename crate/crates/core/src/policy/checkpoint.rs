use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, Layer, Normalization, PolicyDims, PolicyError, PolicyNetwork};
use crate::linalg::Mat;

pub const CHECKPOINT_VERSION: u64 = 1;

/// How a policy was produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub env: String,
    pub method: String,
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub dataset_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: PolicyNetwork,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u64,
    dims: PolicyDims,
    init_seed: u64,
    activation: Activation,
    normalization: Normalization,
    layers: Vec<LayerFile>,
    metadata: CheckpointMeta,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u64,
}

impl Checkpoint {
    pub fn new(policy: PolicyNetwork, meta: CheckpointMeta) -> Self {
        Self { policy, meta }
    }

    pub fn to_json(&self) -> String {
        let p = &self.policy;
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            dims: p.dims.clone(),
            init_seed: p.seed,
            activation: p.net.activation,
            normalization: p.normalization.clone(),
            layers: p
                .net
                .layers
                .iter()
                .map(|l| LayerFile {
                    rows: l.weights.rows(),
                    cols: l.weights.cols(),
                    weights: l.weights.as_slice().to_vec(),
                    bias: l.bias.as_slice().to_vec(),
                })
                .collect(),
            metadata: self.meta.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &str) -> Result<Self, PolicyError> {
        let parse = |source| PolicyError::Parse {
            path: path.to_string(),
            source,
        };
        let probe: VersionProbe = serde_json::from_str(text).map_err(parse)?;
        if probe.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Version {
                path: path.to_string(),
                found: probe.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let file: CheckpointFile = serde_json::from_str(text).map_err(parse)?;
        let layers = file
            .layers
            .into_iter()
            .enumerate()
            .map(|(l, lf)| {
                let bad = |what: &str| PolicyError::Config(format!("layer {l}: {what} in {path}"));
                let weights = Mat::from_vec(lf.rows, lf.cols, lf.weights)
                    .map_err(|_| bad("weight count does not match its shape"))?;
                let bias = Mat::from_vec(lf.rows, 1, lf.bias)
                    .map_err(|_| bad("bias length does not match the layer width"))?;
                Ok(Layer { weights, bias })
            })
            .collect::<Result<Vec<_>, PolicyError>>()?;
        let mut policy = PolicyNetwork::from_layers(
            file.dims.m,
            file.dims.d,
            layers,
            file.activation,
            file.normalization,
        )?;
        if policy.dims != file.dims {
            return Err(PolicyError::Config(format!(
                "declared dims {:?} disagree with the stored layers {:?} in {path}",
                file.dims, policy.dims
            )));
        }
        policy.seed = file.init_seed;
        Ok(Self {
            policy,
            meta: file.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        fs::write(path, self.to_json()).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = fs::read_to_string(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }
}
