use thiserror::Error;

use crate::linalg::{eig_penalty_gradient, spectral_norm, LinalgError, Mat};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Error)]
pub enum GraphError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("backward root node {node} is {rows}x{cols}, expected a scalar")]
    NonScalarRoot { node: usize, rows: usize, cols: usize },
    #[error("node {0} does not exist in this graph")]
    UnknownNode(usize),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("linear algebra failure at node {node}: {source}")]
    Linalg {
        node: usize,
        #[source]
        source: LinalgError,
    },
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    /// `1 - tanh(a)^2`, the derivative of tanh at `a`.
    TanhGrad(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Transpose(NodeId),
    /// Vector to diagonal matrix.
    Diag(NodeId),
    /// `m * diag(v)`: column j scaled by `v_j`.
    ColScale(NodeId, NodeId),
    /// `diag(v) * m`: row i scaled by `v_i`.
    RowScale(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    HCat(NodeId, NodeId),
    VCat(NodeId, NodeId),
    EigPenalty(NodeId),
    SpectralNorm(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::TanhGrad(_) => "tanh_grad",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Transpose(_) => "transpose",
            Op::Diag(_) => "diag",
            Op::ColScale(..) => "col_scale",
            Op::RowScale(..) => "row_scale",
            Op::SliceCols(..) => "slice_cols",
            Op::HCat(..) => "hcat",
            Op::VCat(..) => "vcat",
            Op::EigPenalty(_) => "eig_penalty",
            Op::SpectralNorm(_) => "spectral_norm",
        }
    }
}

/// Backward data cached by the custom-derivative nodes.
#[derive(Debug, Clone)]
struct Custom {
    grad: Mat,
    degenerate: bool,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Mat,
    custom: Option<Custom>,
}

/// Per-parameter-slot gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStore {
    slots: Vec<Option<Mat>>,
}

impl GradStore {
    /// Zeroed accumulators with the given per-slot shapes.
    pub fn zeros(shapes: &[(usize, usize)]) -> Self {
        Self {
            slots: shapes.iter().map(|&(r, c)| Some(Mat::zeros(r, c))).collect(),
        }
    }

    pub fn from_slots(slots: Vec<Mat>) -> Self {
        Self {
            slots: slots.into_iter().map(Some).collect(),
        }
    }

    pub fn get(&self, slot: usize) -> Option<&Mat> {
        self.slots.get(slot).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn accumulate_slot(&mut self, slot: usize, g: &Mat) {
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        match &mut self.slots[slot] {
            Some(acc) => acc.axpy(1.0, g),
            empty => *empty = Some(g.clone()),
        }
    }

    /// Adds every slot of `other` into `self`.
    pub fn accumulate(&mut self, other: &GradStore) {
        for (slot, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate_slot(slot, g);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(Mat::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Mat)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

/// Append-only reverse-mode computation graph over dense matrices.
///
/// Node values are computed as nodes are added. Leaves can later be rebound
/// and the whole graph re-evaluated with [`Graph::forward`].
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0]
            .value
            .to_scalar()
            .expect("scalar() on a non-scalar node")
    }

    /// Whether a custom node (eig penalty or spectral norm) found degenerate
    /// spectral structure at its current input.
    pub fn is_degenerate(&self, id: NodeId) -> bool {
        self.nodes[id.0]
            .custom
            .as_ref()
            .is_some_and(|c| c.degenerate)
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push_leaf(Op::Input, value)
    }

    pub fn param(&mut self, slot: usize, value: Mat) -> NodeId {
        self.push_leaf(Op::Param(slot), value)
    }

    fn push_leaf(&mut self, op: Op, value: Mat) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            custom: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<NodeId, GraphError> {
        let id = self.nodes.len();
        for input in inputs(&op) {
            if input.0 >= id {
                return Err(GraphError::UnknownNode(input.0));
            }
        }
        let (value, custom) = self.evaluate(id, &op)?;
        self.nodes.push(Node { op, value, custom });
        Ok(NodeId(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Sub(a, b))
    }
    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, GraphError> {
        self.push(Op::Scale(a, s))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Tanh(a))
    }
    pub fn tanh_grad(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::TanhGrad(a))
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Relu(a))
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Square(a))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Sum(a))
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Transpose(a))
    }
    pub fn diag(&mut self, v: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Diag(v))
    }
    pub fn col_scale(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::ColScale(m, v))
    }
    pub fn row_scale(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::RowScale(m, v))
    }
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, GraphError> {
        self.push(Op::SliceCols(a, start, end))
    }
    pub fn hcat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::HCat(a, b))
    }
    pub fn vcat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::VCat(a, b))
    }

    /// `sum_i max(0, Re s_i)` over eigenvalues of a square node, with the
    /// eigenvalue-perturbation derivative.
    pub fn eig_penalty(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::EigPenalty(a))
    }

    /// Induced 2-norm with derivative `u1 v1^T`.
    pub fn spectral_norm(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::SpectralNorm(a))
    }

    /// Sum of scalar nodes; `None` for an empty list.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<Option<NodeId>, GraphError> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(None);
        };
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(Some(acc))
    }

    /// Replaces the value bound to a leaf. Call [`Graph::forward`] afterwards
    /// to refresh downstream nodes.
    pub fn rebind(&mut self, leaf: NodeId, value: Mat) -> Result<(), GraphError> {
        let node = self
            .nodes
            .get_mut(leaf.0)
            .ok_or(GraphError::UnknownNode(leaf.0))?;
        match node.op {
            Op::Input | Op::Param(_) => {
                node.value = value;
                Ok(())
            }
            _ => Err(GraphError::NotALeaf(leaf.0)),
        }
    }

    /// Re-evaluates every non-leaf node in insertion order.
    pub fn forward(&mut self) -> Result<(), GraphError> {
        for id in 0..self.nodes.len() {
            let op = self.nodes[id].op.clone();
            if matches!(op, Op::Input | Op::Param(_)) {
                continue;
            }
            let (value, custom) = self.evaluate(id, &op)?;
            self.nodes[id].value = value;
            self.nodes[id].custom = custom;
        }
        Ok(())
    }

    fn evaluate(&self, id: usize, op: &Op) -> Result<(Mat, Option<Custom>), GraphError> {
        let v = |n: &NodeId| &self.nodes[n.0].value;
        let shape_err = |detail: String| GraphError::Shape {
            node: id,
            op: op.name(),
            detail,
        };
        let lin = |e: LinalgError| match e {
            LinalgError::Dimension(d) => shape_err(d),
            LinalgError::NotSquare { rows, cols } => shape_err(format!("{rows}x{cols} is not square")),
            other => GraphError::Linalg {
                node: id,
                source: other,
            },
        };
        let value = match op {
            Op::Input | Op::Param(_) => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => v(a).matmul(v(b)).map_err(lin)?,
            Op::Add(a, b) => v(a).add(v(b)).map_err(lin)?,
            Op::Sub(a, b) => v(a).sub(v(b)).map_err(lin)?,
            Op::Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y).map_err(lin)?,
            Op::Scale(a, s) => v(a).scale(*s),
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::TanhGrad(a) => v(a).map(|x| {
                let t = x.tanh();
                1.0 - t * t
            }),
            Op::Relu(a) => v(a).map(|x| x.max(0.0)),
            Op::Square(a) => v(a).map(|x| x * x),
            Op::Sum(a) => Mat::scalar(v(a).sum()),
            Op::Transpose(a) => v(a).transpose(),
            Op::Diag(a) => {
                let d = v(a);
                if d.rows() != 1 && d.cols() != 1 {
                    return Err(shape_err(format!("diag needs a vector, got {:?}", d.shape())));
                }
                Mat::diag(d.as_slice())
            }
            Op::ColScale(m, s) => {
                let (m, s) = (v(m), v(s));
                if s.as_slice().len() != m.cols() || (s.rows() != 1 && s.cols() != 1) {
                    return Err(shape_err(format!(
                        "scale vector {:?} does not match {} columns",
                        s.shape(),
                        m.cols()
                    )));
                }
                let mut out = m.clone();
                let sv = s.as_slice();
                for i in 0..m.rows() {
                    for j in 0..m.cols() {
                        out[(i, j)] *= sv[j];
                    }
                }
                out
            }
            Op::RowScale(m, s) => {
                let (m, s) = (v(m), v(s));
                if s.as_slice().len() != m.rows() || (s.rows() != 1 && s.cols() != 1) {
                    return Err(shape_err(format!(
                        "scale vector {:?} does not match {} rows",
                        s.shape(),
                        m.rows()
                    )));
                }
                let mut out = m.clone();
                let sv = s.as_slice();
                for i in 0..m.rows() {
                    for j in 0..m.cols() {
                        out[(i, j)] *= sv[i];
                    }
                }
                out
            }
            Op::SliceCols(a, s, e) => v(a).slice_cols(*s, *e).map_err(lin)?,
            Op::HCat(a, b) => v(a).hcat(v(b)).map_err(lin)?,
            Op::VCat(a, b) => v(a).vcat(v(b)).map_err(lin)?,
            Op::EigPenalty(a) => {
                let pg = eig_penalty_gradient(v(a)).map_err(lin)?;
                return Ok((
                    Mat::scalar(pg.value),
                    Some(Custom {
                        grad: pg.grad,
                        degenerate: pg.degenerate,
                    }),
                ));
            }
            Op::SpectralNorm(a) => {
                let a = v(a);
                let sn = spectral_norm(a).map_err(lin)?;
                // An empty block has norm 0 and nothing to differentiate.
                let degenerate = !a.is_empty() && sn.is_degenerate();
                return Ok((
                    Mat::scalar(sn.value),
                    Some(Custom {
                        grad: sn.gradient(),
                        degenerate,
                    }),
                ));
            }
        };
        Ok((value, None))
    }

    /// Reverse sweep from a scalar root. Every parameter slot that appears in
    /// the graph gets an entry, zero when the root does not depend on it.
    pub fn backward(&self, root: NodeId) -> Result<GradStore, GraphError> {
        let r = self
            .nodes
            .get(root.0)
            .ok_or(GraphError::UnknownNode(root.0))?;
        if r.value.shape() != (1, 1) {
            return Err(GraphError::NonScalarRoot {
                node: root.0,
                rows: r.value.rows(),
                cols: r.value.cols(),
            });
        }
        let mut grads = GradStore::default();
        for node in &self.nodes[..=root.0] {
            if let Op::Param(slot) = node.op {
                let (rr, cc) = node.value.shape();
                grads.accumulate_slot(slot, &Mat::zeros(rr, cc));
            }
        }
        let mut adj: Vec<Option<Mat>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Mat::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let val = |n: &NodeId| &self.nodes[n.0].value;
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => grads.accumulate_slot(*slot, &g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_tr(val(b)).expect("shapes checked in forward");
                    let gb = val(a).tr_matmul(&g).expect("shapes checked in forward");
                    push_adj(&mut adj, *a, ga);
                    push_adj(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    push_adj(&mut adj, *a, g.clone());
                    push_adj(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    push_adj(&mut adj, *a, g.clone());
                    push_adj(&mut adj, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(val(b), |x, y| x * y).expect("checked");
                    let gb = g.zip_map(val(a), |x, y| x * y).expect("checked");
                    push_adj(&mut adj, *a, ga);
                    push_adj(&mut adj, *b, gb);
                }
                Op::Scale(a, s) => push_adj(&mut adj, *a, g.scale(*s)),
                Op::Tanh(a) => {
                    let ga = g
                        .zip_map(&node.value, |x, t| x * (1.0 - t * t))
                        .expect("checked");
                    push_adj(&mut adj, *a, ga);
                }
                Op::TanhGrad(a) => {
                    // d/da sech^2(a) = -2 tanh(a) sech^2(a)
                    let ga = g
                        .zip_map(val(a), |x, pre| {
                            let t = pre.tanh();
                            x * (-2.0 * t * (1.0 - t * t))
                        })
                        .expect("checked");
                    push_adj(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g
                        .zip_map(val(a), |x, pre| if pre > 0.0 { x } else { 0.0 })
                        .expect("checked");
                    push_adj(&mut adj, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(val(a), |x, y| 2.0 * x * y).expect("checked");
                    push_adj(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let (rr, cc) = val(a).shape();
                    push_adj(&mut adj, *a, Mat::filled(rr, cc, g.as_slice()[0]));
                }
                Op::Transpose(a) => push_adj(&mut adj, *a, g.transpose()),
                Op::Diag(a) => {
                    let (rr, cc) = val(a).shape();
                    let n = g.rows();
                    let d: Vec<f64> = (0..n).map(|i| g[(i, i)]).collect();
                    push_adj(&mut adj, *a, Mat::from_vec(rr, cc, d).expect("vector shape"));
                }
                Op::ColScale(m, s) => {
                    let (mv, sv) = (val(m), val(s));
                    let svals = sv.as_slice();
                    let mut gm = g.clone();
                    let mut gs = vec![0.0; svals.len()];
                    for i in 0..mv.rows() {
                        for j in 0..mv.cols() {
                            gm[(i, j)] *= svals[j];
                            gs[j] += g[(i, j)] * mv[(i, j)];
                        }
                    }
                    push_adj(&mut adj, *m, gm);
                    push_adj(&mut adj, *s, Mat::from_vec(sv.rows(), sv.cols(), gs).expect("vector"));
                }
                Op::RowScale(m, s) => {
                    let (mv, sv) = (val(m), val(s));
                    let svals = sv.as_slice();
                    let mut gm = g.clone();
                    let mut gs = vec![0.0; svals.len()];
                    for i in 0..mv.rows() {
                        for j in 0..mv.cols() {
                            gm[(i, j)] *= svals[i];
                            gs[i] += g[(i, j)] * mv[(i, j)];
                        }
                    }
                    push_adj(&mut adj, *m, gm);
                    push_adj(&mut adj, *s, Mat::from_vec(sv.rows(), sv.cols(), gs).expect("vector"));
                }
                Op::SliceCols(a, s, _) => {
                    let av = val(a);
                    let acc = adj[a.0].get_or_insert_with(|| Mat::zeros(av.rows(), av.cols()));
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            acc[(i, s + j)] += g[(i, j)];
                        }
                    }
                }
                Op::HCat(a, b) => {
                    let ca = val(a).cols();
                    push_adj(&mut adj, *a, g.slice_cols(0, ca).expect("checked"));
                    push_adj(&mut adj, *b, g.slice_cols(ca, g.cols()).expect("checked"));
                }
                Op::VCat(a, b) => {
                    let (ra, c) = val(a).shape();
                    let data = g.as_slice();
                    let top = Mat::from_vec(ra, c, data[..ra * c].to_vec()).expect("checked");
                    let bottom = Mat::from_vec(g.rows() - ra, c, data[ra * c..].to_vec())
                        .expect("checked");
                    push_adj(&mut adj, *a, top);
                    push_adj(&mut adj, *b, bottom);
                }
                Op::EigPenalty(a) | Op::SpectralNorm(a) => {
                    let custom = node.custom.as_ref().expect("custom nodes cache their gradient");
                    if custom.grad.as_slice().iter().any(|&v| v != 0.0) {
                        push_adj(&mut adj, *a, custom.grad.scale(g.as_slice()[0]));
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn push_adj(adj: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut adj[id.0] {
        Some(acc) => acc.axpy(1.0, &g),
        empty => *empty = Some(g),
    }
}

fn inputs(op: &Op) -> Vec<NodeId> {
    match *op {
        Op::Input | Op::Param(_) => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::ColScale(a, b)
        | Op::RowScale(a, b)
        | Op::HCat(a, b)
        | Op::VCat(a, b) => vec![a, b],
        Op::Scale(a, _)
        | Op::Tanh(a)
        | Op::TanhGrad(a)
        | Op::Relu(a)
        | Op::Square(a)
        | Op::Sum(a)
        | Op::Transpose(a)
        | Op::Diag(a)
        | Op::SliceCols(a, _, _)
        | Op::EigPenalty(a)
        | Op::SpectralNorm(a) => vec![a],
    }
}
