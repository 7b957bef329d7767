//! Linearized error dynamics of a closed loop under a learned policy, and
//! the behavior-cloning losses with stability penalties.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::{Graph, GraphError, NodeId};
use crate::datagen::Sample;
use crate::linalg::Mat;
use crate::policy::{BoundPolicy, PolicyBatch, PolicyError, PolicyNetwork};

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("{0}")]
    Usage(String),
    #[error("loss needs a nonempty batch")]
    EmptyBatch,
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// `(x, u) -> (d f/dx [m x m], d f/du [m x n])`.
pub type RobotJacobians = dyn Fn(&[f64], &[f64]) -> (Mat, Mat) + Send + Sync;
/// `(x, y, u) -> (d g/dx [d x m], d g/dy [d x d], d g/du [d x n])`.
pub type EnvJacobians = dyn Fn(&[f64], &[f64], &[f64]) -> (Mat, Mat, Mat) + Send + Sync;

/// Continuous-time Jacobians of the robot dynamics `x' = f(x, u)` and,
/// when known, of the environment dynamics `y' = g(x, y, u)`.
#[derive(Clone)]
pub struct SystemModel {
    pub m: usize,
    pub d: usize,
    pub n: usize,
    f: Arc<RobotJacobians>,
    g: Option<Arc<EnvJacobians>>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("m", &self.m)
            .field("d", &self.d)
            .field("n", &self.n)
            .field("model_based", &self.is_model_based())
            .finish()
    }
}

impl SystemModel {
    pub fn new(
        m: usize,
        d: usize,
        n: usize,
        f: impl Fn(&[f64], &[f64]) -> (Mat, Mat) + Send + Sync + 'static,
    ) -> Self {
        Self {
            m,
            d,
            n,
            f: Arc::new(f),
            g: None,
        }
    }

    pub fn with_env_dynamics(
        mut self,
        g: impl Fn(&[f64], &[f64], &[f64]) -> (Mat, Mat, Mat) + Send + Sync + 'static,
    ) -> Self {
        self.g = Some(Arc::new(g));
        self
    }

    /// `x' = u` with `d` environment states and no environment model.
    pub fn single_integrator(m: usize, d: usize) -> Self {
        Self::new(m, d, m, move |_, _| (Mat::zeros(m, m), Mat::identity(m)))
    }

    /// Drops the environment model, leaving only what model-free training
    /// may use.
    pub fn without_env_dynamics(mut self) -> Self {
        self.g = None;
        self
    }

    pub fn is_model_based(&self) -> bool {
        self.g.is_some()
    }

    pub fn f_jacobians(&self, x: &[f64], u: &[f64]) -> Result<(Mat, Mat), StabilityError> {
        let (fx, fu) = (self.f)(x, u);
        expect_shape("df/dx", &fx, self.m, self.m)?;
        expect_shape("df/du", &fu, self.m, self.n)?;
        Ok((fx, fu))
    }

    pub fn g_jacobians(&self, x: &[f64], y: &[f64], u: &[f64]) -> Result<(Mat, Mat, Mat), StabilityError> {
        let g = self.g.as_ref().ok_or_else(|| {
            StabilityError::Usage("the system model has no environment dynamics".into())
        })?;
        let (gx, gy, gu) = g(x, y, u);
        expect_shape("dg/dx", &gx, self.d, self.m)?;
        expect_shape("dg/dy", &gy, self.d, self.d)?;
        expect_shape("dg/du", &gu, self.d, self.n)?;
        Ok((gx, gy, gu))
    }

    fn check_policy(&self, policy: &PolicyNetwork) -> Result<(), StabilityError> {
        let p = &policy.dims;
        if (p.m, p.d, p.n) != (self.m, self.d, self.n) {
            return Err(StabilityError::Shape(format!(
                "policy dims (m={}, d={}, n={}) do not match the system (m={}, d={}, n={})",
                p.m, p.d, p.n, self.m, self.d, self.n
            )));
        }
        Ok(())
    }
}

fn expect_shape(what: &str, m: &Mat, rows: usize, cols: usize) -> Result<(), StabilityError> {
    if m.shape() != (rows, cols) {
        return Err(StabilityError::Shape(format!(
            "{what} is {}x{}, expected {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

fn action_column(g: &Graph, batch: &PolicyBatch, col: usize) -> Vec<f64> {
    let a = g.value(batch.actions);
    (0..a.rows()).map(|r| a[(r, col)]).collect()
}

/// Full error-dynamics matrix
/// `[[fx + fu Jx, fu Jy], [gx + gu Jx, gy + gu Jy]]` for batch sample `col`.
/// Dynamics Jacobians are evaluated at the policy's own action and enter as
/// constants; the policy Jacobian stays differentiable.
pub fn assemble_a(
    g: &mut Graph,
    model: &SystemModel,
    policy: &BoundPolicy<'_>,
    batch: &PolicyBatch,
    col: usize,
    x: &[f64],
    y: &[f64],
) -> Result<NodeId, StabilityError> {
    if !model.is_model_based() {
        return Err(StabilityError::Usage(
            "the full error-dynamics matrix needs environment dynamics; use the model-free blocks instead".into(),
        ));
    }
    let u = action_column(g, batch, col);
    let (fx, fu) = model.f_jacobians(x, &u)?;
    let (gx, gy, gu) = model.g_jacobians(x, y, &u)?;
    let (m, d) = (model.m, model.d);
    let mut open = Mat::zeros(m + d, m + d);
    for i in 0..m {
        for j in 0..m {
            open[(i, j)] = fx[(i, j)];
        }
    }
    for i in 0..d {
        for j in 0..m {
            open[(m + i, j)] = gx[(i, j)];
        }
        for j in 0..d {
            open[(m + i, m + j)] = gy[(i, j)];
        }
    }
    let input_gain = fu.vcat(&gu).map_err(|e| StabilityError::Shape(e.to_string()))?;
    let jac = policy.input_jacobian(g, batch, col)?;
    let open = g.input(open);
    let gain = g.input(input_gain);
    let closed = g.matmul(gain, jac)?;
    Ok(g.add(open, closed)?)
}

/// Robot blocks `A1 = fx + fu Jx` (`m x m`) and `A2 = fu Jy` (`m x d`).
pub fn assemble_a1_a2(
    g: &mut Graph,
    model: &SystemModel,
    policy: &BoundPolicy<'_>,
    batch: &PolicyBatch,
    col: usize,
    x: &[f64],
) -> Result<(NodeId, NodeId), StabilityError> {
    let u = action_column(g, batch, col);
    let (fx, fu) = model.f_jacobians(x, &u)?;
    let m = model.m;
    let jac = policy.input_jacobian(g, batch, col)?;
    let jx = g.slice_cols(jac, 0, m)?;
    let jy = g.slice_cols(jac, m, m + model.d)?;
    let fu = g.input(fu);
    let fx = g.input(fx);
    let fu_jx = g.matmul(fu, jx)?;
    let a1 = g.add(fx, fu_jx)?;
    let a2 = g.matmul(fu, jy)?;
    Ok((a1, a2))
}

/// Which loss to build.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    Bc,
    ModelBased { lambda: f64 },
    ModelFree { lambda1: f64, lambda2: f64 },
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Bc => "bc",
            LossSpec::ModelBased { .. } => "stable_mb",
            LossSpec::ModelFree { .. } => "stable_mf",
        }
    }
}

/// Scaling applied when assembling the minimized objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossScale {
    /// Divide the summed objective by the batch size.
    pub per_sample: bool,
    /// Multiplier on every penalty weight (warm-up ramp).
    pub penalty_factor: f64,
}

impl Default for LossScale {
    fn default() -> Self {
        Self {
            per_sample: false,
            penalty_factor: 1.0,
        }
    }
}

/// A built loss graph with its decomposition. Sums are over the batch and
/// exclude samples whose penalty derivative was degenerate.
#[derive(Debug)]
pub struct LossEval {
    pub graph: Graph,
    /// Minimized objective; `backward` from here.
    pub total: NodeId,
    pub bc: f64,
    /// Sum of eigenvalue penalties (of `A` or of `A1`).
    pub eig_penalty: f64,
    /// Sum of `|A2|` (model-free only).
    pub coupling_norm: f64,
    /// Weighted penalty contribution before batch normalization.
    pub weighted_penalty: f64,
    /// Penalty terms dropped because their derivative was degenerate.
    pub skipped: usize,
    pub batch: usize,
}

impl LossEval {
    pub fn total_value(&self) -> f64 {
        self.graph.scalar(self.total)
    }
}

/// Builds the loss graph for `samples`.
pub fn build_loss(
    policy: &PolicyNetwork,
    model: Option<&SystemModel>,
    samples: &[Sample],
    spec: LossSpec,
    scale: LossScale,
) -> Result<LossEval, StabilityError> {
    if samples.is_empty() {
        return Err(StabilityError::EmptyBatch);
    }
    for (name, w) in match spec {
        LossSpec::Bc => vec![],
        LossSpec::ModelBased { lambda } => vec![("lambda", lambda)],
        LossSpec::ModelFree { lambda1, lambda2 } => vec![("lambda1", lambda1), ("lambda2", lambda2)],
    } {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(StabilityError::Usage(format!("{name} must be a nonnegative number, got {w}")));
        }
    }
    let model = match spec {
        LossSpec::Bc => None,
        _ => {
            let model = model.ok_or_else(|| {
                StabilityError::Usage(format!("{} training needs a system model", spec.name()))
            })?;
            model.check_policy(policy)?;
            if matches!(spec, LossSpec::ModelBased { .. }) && !model.is_model_based() {
                return Err(StabilityError::Usage(
                    "stable_mb needs a model-based system (environment dynamics g); use stable_mf".into(),
                ));
            }
            Some(model)
        }
    };

    let mut g = Graph::new();
    let bound = policy.bind(&mut g);
    let inputs: Vec<(&[f64], &[f64])> = samples.iter().map(|s| (s.x.as_slice(), s.y.as_slice())).collect();
    let batch = bound.forward(&mut g, &inputs)?;
    let n = policy.dims.n;
    let mut labels = Mat::zeros(n, samples.len());
    for (col, s) in samples.iter().enumerate() {
        if s.u.len() != n {
            return Err(StabilityError::Shape(format!(
                "sample {col} has an action of length {}, expected {n}",
                s.u.len()
            )));
        }
        for (row, &v) in s.u.iter().enumerate() {
            labels[(row, col)] = v;
        }
    }
    let labels = g.input(labels);
    let residual = g.sub(batch.actions, labels)?;
    let sq = g.square(residual)?;
    let bc = g.sum(sq)?;

    let mut eig_terms = Vec::new();
    let mut norm_terms = Vec::new();
    let mut skipped = 0usize;
    let (eig_weight, norm_weight) = match spec {
        LossSpec::Bc => (0.0, 0.0),
        LossSpec::ModelBased { lambda } => (lambda, 0.0),
        LossSpec::ModelFree { lambda1, lambda2 } => (lambda2, lambda1),
    };
    if let Some(model) = model {
        for (col, s) in samples.iter().enumerate() {
            match spec {
                LossSpec::ModelBased { .. } if eig_weight > 0.0 => {
                    let a = assemble_a(&mut g, model, &bound, &batch, col, &s.x, &s.y)?;
                    let p = g.eig_penalty(a)?;
                    if g.is_degenerate(p) {
                        skipped += 1;
                    } else {
                        eig_terms.push(p);
                    }
                }
                LossSpec::ModelFree { .. } if eig_weight > 0.0 || norm_weight > 0.0 => {
                    let (a1, a2) = assemble_a1_a2(&mut g, model, &bound, &batch, col, &s.x)?;
                    if norm_weight > 0.0 {
                        let p = g.spectral_norm(a2)?;
                        if g.is_degenerate(p) {
                            skipped += 1;
                        } else {
                            norm_terms.push(p);
                        }
                    }
                    if eig_weight > 0.0 {
                        let p = g.eig_penalty(a1)?;
                        if g.is_degenerate(p) {
                            skipped += 1;
                        } else {
                            eig_terms.push(p);
                        }
                    }
                }
                _ => {}
            }
        }
    }
    let eig_sum = g.add_all(&eig_terms)?;
    let norm_sum = g.add_all(&norm_terms)?;
    let eig_penalty = eig_sum.map_or(0.0, |id| g.scalar(id));
    let coupling_norm = norm_sum.map_or(0.0, |id| g.scalar(id));

    let factor = scale.penalty_factor;
    let mut weighted = Vec::new();
    if let Some(id) = eig_sum {
        if eig_weight * factor != 0.0 {
            weighted.push(g.scale(id, eig_weight * factor)?);
        }
    }
    if let Some(id) = norm_sum {
        if norm_weight * factor != 0.0 {
            weighted.push(g.scale(id, norm_weight * factor)?);
        }
    }
    let weighted_sum = g.add_all(&weighted)?;
    let weighted_penalty = weighted_sum.map_or(0.0, |id| g.scalar(id));
    let raw_total = match weighted_sum {
        Some(p) => g.add(bc, p)?,
        None => bc,
    };
    let total = if scale.per_sample {
        g.scale(raw_total, 1.0 / samples.len() as f64)?
    } else {
        raw_total
    };
    Ok(LossEval {
        bc: g.scalar(bc),
        graph: g,
        total,
        eig_penalty,
        coupling_norm,
        weighted_penalty,
        skipped,
        batch: samples.len(),
    })
}

/// Summed squared action error over the batch.
pub fn loss_bc(policy: &PolicyNetwork, samples: &[Sample]) -> Result<LossEval, StabilityError> {
    build_loss(policy, None, samples, LossSpec::Bc, LossScale::default())
}

/// BC loss plus `lambda` times the summed eigenvalue penalty of `A`.
pub fn loss_model_based(
    policy: &PolicyNetwork,
    model: &SystemModel,
    samples: &[Sample],
    lambda: f64,
) -> Result<LossEval, StabilityError> {
    build_loss(policy, Some(model), samples, LossSpec::ModelBased { lambda }, LossScale::default())
}

/// BC loss plus `lambda1 |A2| + lambda2 * penalty(A1)` summed over the batch.
pub fn loss_model_free(
    policy: &PolicyNetwork,
    model: &SystemModel,
    samples: &[Sample],
    lambda1: f64,
    lambda2: f64,
) -> Result<LossEval, StabilityError> {
    build_loss(
        policy,
        Some(model),
        samples,
        LossSpec::ModelFree { lambda1, lambda2 },
        LossScale::default(),
    )
}

/// Numeric `A` at one state.
pub fn a_matrix(policy: &PolicyNetwork, model: &SystemModel, x: &[f64], y: &[f64]) -> Result<Mat, StabilityError> {
    model.check_policy(policy)?;
    let mut g = Graph::new();
    let bound = policy.bind(&mut g);
    let batch = bound.forward(&mut g, &[(x, y)])?;
    let a = assemble_a(&mut g, model, &bound, &batch, 0, x, y)?;
    Ok(g.value(a).clone())
}

/// Numeric `(A1, A2)` at one state.
pub fn a1_a2_matrices(
    policy: &PolicyNetwork,
    model: &SystemModel,
    x: &[f64],
    y: &[f64],
) -> Result<(Mat, Mat), StabilityError> {
    model.check_policy(policy)?;
    let mut g = Graph::new();
    let bound = policy.bind(&mut g);
    let batch = bound.forward(&mut g, &[(x, y)])?;
    let (a1, a2) = assemble_a1_a2(&mut g, model, &bound, &batch, 0, x)?;
    Ok((g.value(a1).clone(), g.value(a2).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Activation, Layer, Normalization};

    fn linear_policy(k: Mat, l: Mat) -> PolicyNetwork {
        let m = k.cols();
        let d = l.cols();
        let n = k.rows();
        let layer = Layer {
            weights: k.hcat(&l).unwrap(),
            bias: Mat::zeros(n, 1),
        };
        PolicyNetwork::from_layers(m, d, vec![layer], Activation::Tanh, Normalization::identity(m + d, n))
            .unwrap()
    }

    fn sample(x: &[f64], y: &[f64], u: &[f64]) -> Sample {
        Sample {
            x: x.to_vec(),
            y: y.to_vec(),
            u: u.to_vec(),
        }
    }

    #[test]
    fn bc_loss_sums_squared_residuals() {
        let p = linear_policy(Mat::zeros(2, 2), Mat::zeros(2, 0));
        let one = loss_bc(&p, &[sample(&[0.0, 0.0], &[], &[1.0, 0.0])]).unwrap();
        assert_eq!(one.total_value(), 1.0);
        let two = loss_bc(
            &p,
            &[sample(&[0.0, 0.0], &[], &[1.0, 0.0]), sample(&[1.0, 1.0], &[], &[0.0, 2.0])],
        )
        .unwrap();
        assert_eq!(two.total_value(), 5.0);
        assert!(matches!(loss_bc(&p, &[]), Err(StabilityError::EmptyBatch)));
    }

    #[test]
    fn single_integrator_blocks_are_policy_gains() {
        let k = Mat::from_rows(&[[-1.0, 0.5], [0.2, -2.0]]);
        let l = Mat::from_rows(&[[0.3, 0.0], [0.0, -0.4]]);
        let p = linear_policy(k.clone(), l.clone());
        let model = SystemModel::single_integrator(2, 2);
        let (a1, a2) = a1_a2_matrices(&p, &model, &[0.1, 0.2], &[0.3, 0.4]).unwrap();
        assert_eq!(a1, k);
        assert_eq!(a2, l);

        let static_env = model.with_env_dynamics(|_, _, _| (Mat::zeros(2, 2), Mat::zeros(2, 2), Mat::zeros(2, 2)));
        let a = a_matrix(&p, &static_env, &[0.1, 0.2], &[0.3, 0.4]).unwrap();
        let expected = k.hcat(&l).unwrap().vcat(&Mat::zeros(2, 4)).unwrap();
        assert_eq!(a, expected);
    }

    #[test]
    fn model_free_system_rejects_full_matrix() {
        let p = linear_policy(Mat::identity(2), Mat::zeros(2, 0));
        let model = SystemModel::single_integrator(2, 0);
        assert!(matches!(a_matrix(&p, &model, &[0.0, 0.0], &[]), Err(StabilityError::Usage(_))));
        let s = [sample(&[0.0, 0.0], &[], &[0.0, 0.0])];
        assert!(matches!(loss_model_based(&p, &model, &s, 0.1), Err(StabilityError::Usage(_))));
    }
}
