//! Feedforward policies `u = pi(x, y)` with input/output standardization.

mod checkpoint;
mod mlp;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, GraphError, NodeId};
use crate::linalg::Mat;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use mlp::{Activation, BoundMlp, Layer, Mlp, MlpTrace};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy configuration: {0}")]
    Config(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("dimension mismatch: expected {what} of length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint {path} has version {found}, this build reads version {expected}")]
    Version {
        path: String,
        found: u64,
        expected: u64,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Robot state, environment state and action sizes plus hidden widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub m: usize,
    pub d: usize,
    pub n: usize,
    pub hidden: Vec<usize>,
}

impl PolicyDims {
    pub fn new(m: usize, d: usize, n: usize, hidden: Vec<usize>) -> Self {
        Self { m, d, n, hidden }
    }

    pub fn input_dim(&self) -> usize {
        self.m + self.d
    }

    fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(&self.hidden);
        sizes.push(self.n);
        sizes
    }
}

/// Per-dimension affine maps applied around the network:
/// `z = (input - input_mean) / input_std` and
/// `u = output_mean + output_std * net(z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
}

/// Standard deviations below this are replaced by 1 so constant columns
/// pass through unscaled.
const MIN_STD: f64 = 1e-8;

impl Normalization {
    pub fn identity(inputs: usize, outputs: usize) -> Self {
        Self {
            input_mean: vec![0.0; inputs],
            input_std: vec![1.0; inputs],
            output_mean: vec![0.0; outputs],
            output_std: vec![1.0; outputs],
        }
    }

    /// Column means and population standard deviations.
    pub fn fit<'a, I, O>(inputs: I, outputs: O) -> Option<Self>
    where
        I: IntoIterator<Item = Vec<f64>>,
        O: IntoIterator<Item = &'a [f64]>,
    {
        let (input_mean, input_std) = moments(inputs)?;
        let (output_mean, output_std) = moments(outputs.into_iter().map(<[f64]>::to_vec))?;
        Some(Self {
            input_mean,
            input_std,
            output_mean,
            output_std,
        })
    }

    fn is_valid(&self, inputs: usize, outputs: usize) -> bool {
        let ok_std = |s: &[f64]| s.iter().all(|&v| v.is_finite() && v > 0.0);
        self.input_mean.len() == inputs
            && self.input_std.len() == inputs
            && self.output_mean.len() == outputs
            && self.output_std.len() == outputs
            && ok_std(&self.input_std)
            && ok_std(&self.output_std)
            && self.input_mean.iter().chain(&self.output_mean).all(|v| v.is_finite())
    }
}

fn moments(rows: impl IntoIterator<Item = Vec<f64>>) -> Option<(Vec<f64>, Vec<f64>)> {
    let rows: Vec<Vec<f64>> = rows.into_iter().collect();
    let first = rows.first()?;
    let k = first.len();
    let count = rows.len() as f64;
    let mut mean = vec![0.0; k];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; k];
    for r in &rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / count).sqrt();
            if sd < MIN_STD {
                1.0
            } else {
                sd
            }
        })
        .collect();
    Some((mean, std))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNetwork {
    pub dims: PolicyDims,
    pub seed: u64,
    pub normalization: Normalization,
    pub net: Mlp,
}

impl PolicyNetwork {
    /// Glorot-uniform tanh network with identity normalization.
    pub fn init(dims: PolicyDims, seed: u64) -> Result<Self, PolicyError> {
        Self::init_with(dims, Activation::Tanh, seed)
    }

    pub fn init_with(dims: PolicyDims, activation: Activation, seed: u64) -> Result<Self, PolicyError> {
        if dims.m == 0 {
            return Err(PolicyError::Config("robot state dimension m must be at least 1".into()));
        }
        if dims.n == 0 {
            return Err(PolicyError::Config("action dimension n must be at least 1".into()));
        }
        let net = Mlp::init(&dims.layer_sizes(), activation, seed)?;
        let normalization = Normalization::identity(dims.input_dim(), dims.n);
        Ok(Self {
            dims,
            seed,
            normalization,
            net,
        })
    }

    /// Builds a network from explicit layers, checking that shapes chain
    /// from `m + d` to `n`.
    pub fn from_layers(
        m: usize,
        d: usize,
        layers: Vec<Layer>,
        activation: Activation,
        normalization: Normalization,
    ) -> Result<Self, PolicyError> {
        let Some(last) = layers.last() else {
            return Err(PolicyError::Config("a policy needs at least one layer".into()));
        };
        let n = last.fan_out();
        let mut expected_in = m + d;
        for (l, layer) in layers.iter().enumerate() {
            if layer.fan_in() != expected_in || layer.bias.shape() != (layer.fan_out(), 1) {
                return Err(PolicyError::Config(format!(
                    "layer {l} is {}x{} with bias {:?}, expected {expected_in} inputs",
                    layer.fan_out(),
                    layer.fan_in(),
                    layer.bias.shape()
                )));
            }
            expected_in = layer.fan_out();
        }
        if !normalization.is_valid(m + d, n) {
            return Err(PolicyError::Config(
                "normalization vectors have the wrong length or non-positive scales".into(),
            ));
        }
        let hidden = layers[..layers.len() - 1].iter().map(Layer::fan_out).collect();
        let net = Mlp { layers, activation };
        if !net.is_finite() {
            return Err(PolicyError::Config("parameters must be finite".into()));
        }
        Ok(Self {
            dims: PolicyDims { m, d, n, hidden },
            seed: 0,
            normalization,
            net,
        })
    }

    /// Replaces the normalization, validating its lengths.
    pub fn set_normalization(&mut self, normalization: Normalization) -> Result<(), PolicyError> {
        if !normalization.is_valid(self.dims.input_dim(), self.dims.n) {
            return Err(PolicyError::Config(
                "normalization vectors have the wrong length or non-positive scales".into(),
            ));
        }
        self.normalization = normalization;
        Ok(())
    }

    fn check_inputs(&self, x: &[f64], y: &[f64]) -> Result<(), PolicyError> {
        if x.len() != self.dims.m {
            return Err(PolicyError::Dimension {
                what: "robot state",
                expected: self.dims.m,
                got: x.len(),
            });
        }
        if y.len() != self.dims.d {
            return Err(PolicyError::Dimension {
                what: "environment state",
                expected: self.dims.d,
                got: y.len(),
            });
        }
        Ok(())
    }

    fn standardize(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let nz = &self.normalization;
        x.iter()
            .chain(y)
            .zip(nz.input_mean.iter().zip(&nz.input_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn act(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>, PolicyError> {
        self.check_inputs(x, y)?;
        let z = self.standardize(x, y);
        let nz = &self.normalization;
        Ok(self
            .net
            .forward(&z)
            .into_iter()
            .zip(nz.output_mean.iter().zip(&nz.output_std))
            .map(|(o, (m, s))| m + s * o)
            .collect())
    }

    /// Numeric input Jacobian `[d pi/dx, d pi/dy]` at one point.
    pub fn input_jacobian_at(&self, x: &[f64], y: &[f64]) -> Result<Mat, PolicyError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let batch = bound.forward(&mut g, &[(x, y)])?;
        let j = bound.input_jacobian(&mut g, &batch, 0)?;
        Ok(g.value(j).clone())
    }

    pub fn bind(&self, g: &mut Graph) -> BoundPolicy<'_> {
        BoundPolicy {
            policy: self,
            net: self.net.bind(g),
        }
    }

    /// Parameters flattened into one vector, slot by slot.
    pub fn flat_params(&self) -> Vec<f64> {
        self.net
            .params()
            .iter()
            .flat_map(|p| p.as_slice().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), PolicyError> {
        let total: usize = self.net.params().iter().map(|p| p.as_slice().len()).sum();
        if flat.len() != total {
            return Err(PolicyError::Dimension {
                what: "parameter vector",
                expected: total,
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for p in self.net.params_mut() {
            let len = p.as_slice().len();
            p.as_mut_slice().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Uniformly perturbs every parameter by up to `scale`.
    pub fn jitter<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        for p in self.net.params_mut() {
            for v in p.as_mut_slice() {
                *v += rng.gen_range(-scale..=scale);
            }
        }
    }
}

/// A policy whose parameters are leaves of a graph.
#[derive(Debug, Clone)]
pub struct BoundPolicy<'p> {
    policy: &'p PolicyNetwork,
    pub net: BoundMlp,
}

/// Nodes of a batched policy evaluation.
#[derive(Debug, Clone)]
pub struct PolicyBatch {
    pub trace: MlpTrace,
    /// Actions in raw units, `n x batch`.
    pub actions: NodeId,
    pub len: usize,
}

impl<'p> BoundPolicy<'p> {
    pub fn policy(&self) -> &'p PolicyNetwork {
        self.policy
    }

    /// Evaluates the policy on each `(x, y)` pair, one column per sample.
    pub fn forward(&self, g: &mut Graph, inputs: &[(&[f64], &[f64])]) -> Result<PolicyBatch, PolicyError> {
        let p = self.policy;
        let k = p.dims.input_dim();
        let b = inputs.len();
        let mut z = Mat::zeros(k, b);
        for (col, (x, y)) in inputs.iter().enumerate() {
            p.check_inputs(x, y)?;
            for (row, v) in p.standardize(x, y).into_iter().enumerate() {
                z[(row, col)] = v;
            }
        }
        let z = g.input(z);
        let trace = self.net.forward(g, z)?;
        let nz = &p.normalization;
        let out_std = g.input(Mat::column(&nz.output_std));
        let scaled = g.row_scale(trace.output, out_std)?;
        let mean = g.input(Mat::column(&nz.output_mean));
        let ones = g.input(Mat::filled(1, b, 1.0));
        let offset = g.matmul(mean, ones)?;
        let actions = g.add(scaled, offset)?;
        Ok(PolicyBatch {
            trace,
            actions,
            len: b,
        })
    }

    /// Raw-unit input Jacobian `[d pi/dx, d pi/dy]` (`n x (m + d)`) of batch
    /// sample `col`, including both normalization factors.
    pub fn input_jacobian(&self, g: &mut Graph, batch: &PolicyBatch, col: usize) -> Result<NodeId, PolicyError> {
        let nz = &self.policy.normalization;
        let j = self.net.input_jacobian(g, &batch.trace, col)?;
        let inv_std: Vec<f64> = nz.input_std.iter().map(|s| 1.0 / s).collect();
        let inv_std = g.input(Mat::column(&inv_std));
        let j = g.col_scale(j, inv_std)?;
        let out_std = g.input(Mat::column(&nz.output_std));
        Ok(g.row_scale(j, out_std)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_action() {
        let mut p = PolicyNetwork::init(PolicyDims::new(2, 1, 2, vec![8]), 1).unwrap();
        let zeros = vec![0.0; p.flat_params().len()];
        p.set_flat_params(&zeros).unwrap();
        assert_eq!(p.act(&[0.3, -1.0], &[2.0]).unwrap(), vec![0.0, 0.0]);
        let j = p.input_jacobian_at(&[0.3, -1.0], &[2.0]).unwrap();
        assert_eq!(j, Mat::zeros(2, 3));
    }

    #[test]
    fn identity_linear_layer() {
        let layer = Layer {
            weights: Mat::identity(2),
            bias: Mat::zeros(2, 1),
        };
        let p = PolicyNetwork::from_layers(1, 1, vec![layer], Activation::Tanh, Normalization::identity(2, 2))
            .unwrap();
        assert_eq!(p.act(&[0.5], &[-3.0]).unwrap(), vec![0.5, -3.0]);
        assert_eq!(p.input_jacobian_at(&[0.5], &[-3.0]).unwrap(), Mat::identity(2));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = PolicyNetwork::init(PolicyDims::new(2, 2, 2, vec![4]), 0).unwrap();
        assert!(matches!(
            p.act(&[1.0], &[0.0, 0.0]),
            Err(PolicyError::Dimension { what: "robot state", .. })
        ));
    }

    #[test]
    fn relu_jacobian_is_unsupported() {
        let p = PolicyNetwork::init_with(PolicyDims::new(2, 0, 2, vec![4]), Activation::Relu, 0).unwrap();
        assert!(matches!(
            p.input_jacobian_at(&[0.0, 0.0], &[]),
            Err(PolicyError::Unsupported(_))
        ));
    }

    #[test]
    fn normalization_fit_floors_constant_columns() {
        let inputs = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let outputs: Vec<Vec<f64>> = vec![vec![0.0], vec![2.0]];
        let nz = Normalization::fit(inputs, outputs.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(nz.input_mean, vec![2.0, 5.0]);
        assert_eq!(nz.input_std, vec![1.0, 1.0]);
        assert_eq!(nz.output_std, vec![1.0]);
    }
}
