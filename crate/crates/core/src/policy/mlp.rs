use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::autodiff::{Graph, GraphError, NodeId};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    fn node(self, g: &mut Graph, a: NodeId) -> Result<NodeId, GraphError> {
        match self {
            Activation::Tanh => g.tanh(a),
            Activation::Relu => g.relu(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`.
    pub weights: Mat,
    /// `out x 1`.
    pub bias: Mat,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }
}

/// Fully connected network: activation on every hidden layer, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Parameter nodes of an [`Mlp`] bound into a graph.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    activation: Activation,
}

/// Forward record of a batched pass, kept for Jacobian construction.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Hidden-layer preactivations, each `width x batch`.
    pub preactivations: Vec<NodeId>,
    pub output: NodeId,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases. `sizes` lists every layer
    /// width from input to output.
    pub fn init(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self, PolicyError> {
        if sizes.len() < 2 {
            return Err(PolicyError::Config(
                "a network needs at least an input and an output size".into(),
            ));
        }
        if let Some(pos) = sizes.iter().position(|&s| s == 0) {
            return Err(PolicyError::Config(format!("layer {pos} has zero width")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
                Layer {
                    weights: Mat::from_vec(fan_out, fan_in, data).expect("sized above"),
                    bias: Mat::zeros(fan_out, 1),
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::fan_out)
    }

    /// Parameter shapes in slot order (weight, bias per layer).
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.shape(), l.bias.shape()])
            .collect()
    }

    pub fn params(&self) -> Vec<&Mat> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Euclidean norm over all parameters.
    pub fn param_norm(&self) -> f64 {
        self.params()
            .iter()
            .map(|p| p.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Plain (non-graph) forward pass of one input vector.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let last = self.layers.len().saturating_sub(1);
        let mut h = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let w = &layer.weights;
            let mut out = layer.bias.as_slice().to_vec();
            for (i, o) in out.iter_mut().enumerate() {
                *o += crate::linalg::dot(w.row(i), &h);
            }
            if k < last {
                out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            h = out;
        }
        h
    }

    /// Registers every parameter as a graph leaf, weight of layer `l` in slot
    /// `2l` and its bias in slot `2l + 1`.
    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        self.bind_at(g, 0)
    }

    /// Like [`Mlp::bind`] with every slot shifted by `offset`.
    pub fn bind_at(&self, g: &mut Graph, offset: usize) -> BoundMlp {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            weights.push(g.param(offset + 2 * l, layer.weights.clone()));
            biases.push(g.param(offset + 2 * l + 1, layer.bias.clone()));
        }
        BoundMlp {
            weights,
            biases,
            activation: self.activation,
        }
    }
}

impl BoundMlp {
    /// Batched forward pass; `input` holds one sample per column.
    pub fn forward(&self, g: &mut Graph, input: NodeId) -> Result<MlpTrace, GraphError> {
        let batch = g.value(input).cols();
        let ones = g.input(Mat::filled(1, batch, 1.0));
        let last = self.weights.len() - 1;
        let mut h = input;
        let mut preactivations = Vec::with_capacity(last);
        for l in 0..=last {
            let wx = g.matmul(self.weights[l], h)?;
            let b = g.matmul(self.biases[l], ones)?;
            let pre = g.add(wx, b)?;
            if l < last {
                preactivations.push(pre);
                h = self.activation.node(g, pre)?;
            } else {
                h = pre;
            }
        }
        Ok(MlpTrace {
            preactivations,
            output: h,
        })
    }

    /// Jacobian of the output with respect to the input for sample column
    /// `col` of a traced batch: `W_L D_{L-1} W_{L-1} ... D_1 W_1`, built as
    /// graph nodes so it stays differentiable in the weights.
    pub fn input_jacobian(
        &self,
        g: &mut Graph,
        trace: &MlpTrace,
        col: usize,
    ) -> Result<NodeId, PolicyError> {
        if self.activation != Activation::Tanh {
            return Err(PolicyError::Unsupported(
                "input Jacobians need a smooth activation; relu hidden layers are not differentiable in the weights".into(),
            ));
        }
        let last = self.weights.len() - 1;
        let mut j = self.weights[last];
        for l in (0..last).rev() {
            let pre = g.slice_cols(trace.preactivations[l], col, col + 1)?;
            let d = g.tanh_grad(pre)?;
            let scaled = g.col_scale(j, d)?;
            j = g.matmul(scaled, self.weights[l])?;
        }
        Ok(j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = Mlp::init(&[4, 16, 2], Activation::Tanh, 7).unwrap();
        let b = Mlp::init(&[4, 16, 2], Activation::Tanh, 7).unwrap();
        assert_eq!(a, b);
        for layer in &a.layers {
            assert!(layer.bias.as_slice().iter().all(|&v| v == 0.0));
        }
        let c = Mlp::init(&[4, 16, 2], Activation::Tanh, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_width_is_rejected() {
        assert!(Mlp::init(&[2, 0, 2], Activation::Tanh, 0).is_err());
        assert!(Mlp::init(&[2], Activation::Tanh, 0).is_err());
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let net = Mlp::init(&[3, 5, 4, 2], Activation::Tanh, 3).unwrap();
        let inputs = Mat::from_rows(&[[0.1, -0.4], [0.7, 0.2], [-1.3, 0.05]]);
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let x = g.input(inputs.clone());
        let trace = bound.forward(&mut g, x).unwrap();
        let out = g.value(trace.output);
        for col in 0..2 {
            let v: Vec<f64> = (0..3).map(|r| inputs[(r, col)]).collect();
            let plain = net.forward(&v);
            for (r, p) in plain.iter().enumerate() {
                assert!((out[(r, col)] - p).abs() < 1e-15);
            }
        }
    }
}
