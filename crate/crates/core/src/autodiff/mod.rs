//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape: every node records its op kind, input
//! node ids and the eagerly computed output tensor. Backward rules are
//! themselves expressed as graph construction, so gradients are ordinary
//! nodes and can be differentiated again — which is how the critic's
//! gradient-norm penalty stays trainable.

mod backward;

use thiserror::Error;

use crate::tensor::{kernels, Precision, Tensor};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Everything a node can be.
///
/// `Leaf` nodes are differentiable roots (parameters, inputs); `Constant`
/// nodes are fixed payloads injected by callers or by backward rules
/// (activation masks, fill patterns) and never receive gradients.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    Constant,
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    LeakyRelu(f64),
    Exp,
    Log,
    ConcatLastAxis,
    SliceLastAxis { start: usize, len: usize },
    ReduceMean,
    ReduceSum,
    Square,
    Sqrt,
    Abs,
    L2NormRows,
    BroadcastRow { rows: usize },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::MatMul { .. } => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "elementwise-mul",
            OpKind::ScalarMul(_) => "scalar-mul",
            OpKind::LeakyRelu(_) => "leaky-relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::ConcatLastAxis => "concat-last-axis",
            OpKind::SliceLastAxis { .. } => "slice-last-axis",
            OpKind::ReduceMean => "reduce-mean",
            OpKind::ReduceSum => "reduce-sum",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Abs => "abs",
            OpKind::L2NormRows => "l2-norm-rows",
            OpKind::BroadcastRow { .. } => "broadcast-row",
        }
    }
}

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch at node inputs {nodes:?}: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        nodes: Vec<usize>,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: rank-2 tensor required, got shape {shape:?} at node {node}")]
    RankUnsupported {
        op: &'static str,
        node: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("node {0} does not exist in this graph")]
    UnknownNode(usize),
    #[error("backward output node {node} is not scalar-shaped (shape {shape:?})")]
    NonScalarOutput { node: usize, shape: Vec<usize> },
    #[error("gradient requested w.r.t. node {0}, which is not a leaf")]
    NotALeaf(usize),
}

pub type AdResult<T> = Result<T, AdError>;

#[derive(Clone, Debug)]
struct Node {
    op: OpKind,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Append-only computation tape. Input ids of node `k` are all `< k`, so
/// node order is a topological order by construction.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let value = self.precision.round_tensor(value);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, value });
        id
    }

    /// Insert a differentiable root holding `value`.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Leaf, vec![], value)
    }

    /// Insert a non-differentiable value.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Constant, vec![], value)
    }

    pub fn zeros_const(&mut self, shape: &[usize]) -> NodeId {
        self.constant(Tensor::zeros(shape))
    }

    pub fn ones_const(&mut self, shape: &[usize]) -> NodeId {
        self.constant(Tensor::ones(shape))
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes.get(id.0).map(|n| &n.op), Some(OpKind::Leaf))
    }

    pub fn op_kind(&self, id: NodeId) -> Option<&OpKind> {
        self.nodes.get(id.0).map(|n| &n.op)
    }

    fn check(&self, id: NodeId) -> AdResult<&Node> {
        self.nodes.get(id.0).ok_or(AdError::UnknownNode(id.0))
    }

    /// Forward value of a node. Values are computed eagerly at construction,
    /// so this is a cache lookup.
    pub fn eval(&self, id: NodeId) -> AdResult<&Tensor> {
        Ok(&self.check(id)?.value)
    }

    /// Forward value of a node; panics on an unknown id.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Re-run every forward rule in the subgraph of `id` without touching
    /// the cache. Used to verify that re-evaluation with unchanged leaves
    /// is bitwise reproducible.
    pub fn recompute(&self, id: NodeId) -> AdResult<Tensor> {
        self.check(id)?;
        let mut memo: Vec<Option<Tensor>> = vec![None; id.0 + 1];
        for k in 0..=id.0 {
            // only ancestors of `id` matter, but recomputing the prefix is
            // simpler and the invariant must hold for all of them anyway
            let node = &self.nodes[k];
            let value = match node.op {
                OpKind::Leaf | OpKind::Constant => node.value.clone(),
                _ => {
                    let ins: Vec<&Tensor> = node
                        .inputs
                        .iter()
                        .map(|i| memo[i.0].as_ref().expect("topological order"))
                        .collect();
                    self.precision.round_tensor(compute_forward(&node.op, &ins))
                }
            };
            memo[k] = Some(value);
        }
        Ok(memo[id.0].take().expect("computed"))
    }

    // ---- op constructors -------------------------------------------------

    fn elementwise_pair(&mut self, op: OpKind, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.value.shape() != tb.value.shape() {
            return Err(AdError::ShapeMismatch {
                op: op.name(),
                nodes: vec![a.0, b.0],
                shapes: vec![ta.value.shape().to_vec(), tb.value.shape().to_vec()],
            });
        }
        let value = compute_forward(&op, &[&self.nodes[a.0].value, &self.nodes[b.0].value]);
        Ok(self.push(op, vec![a, b], value))
    }

    fn elementwise_one(&mut self, op: OpKind, a: NodeId) -> AdResult<NodeId> {
        self.check(a)?;
        let value = compute_forward(&op, &[&self.nodes[a.0].value]);
        Ok(self.push(op, vec![a], value))
    }

    fn require_rank2(&self, op: &'static str, id: NodeId) -> AdResult<(usize, usize)> {
        let node = self.check(id)?;
        node.value.dims2().ok_or_else(|| AdError::RankUnsupported {
            op,
            node: id.0,
            shape: node.value.shape().to_vec(),
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.elementwise_pair(OpKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.elementwise_pair(OpKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.elementwise_pair(OpKind::Mul, a, b)
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> AdResult<NodeId> {
        self.elementwise_one(OpKind::ScalarMul(c), a)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> AdResult<NodeId> {
        if !(0.0..1.0).contains(&slope) {
            return Err(AdError::InvalidArgument {
                op: "leaky-relu",
                detail: format!("slope {slope} outside [0, 1)"),
            });
        }
        self.elementwise_one(OpKind::LeakyRelu(slope), a)
    }

    pub fn exp(&mut self, a: NodeId) -> AdResult<NodeId> {
        self.elementwise_one(OpKind::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> AdResult<NodeId> {
        self.elementwise_one(OpKind::Log, a)
    }

    pub fn square(&mut self, a: NodeId) -> AdResult<NodeId> {
        self.elementwise_one(OpKind::Square, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> AdResult<NodeId> {
        self.elementwise_one(OpKind::Sqrt, a)
    }

    pub fn abs(&mut self, a: NodeId) -> AdResult<NodeId> {
        self.elementwise_one(OpKind::Abs, a)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> AdResult<NodeId> {
        let (ar, ac) = self.require_rank2("matmul", a)?;
        let (br, bc) = self.require_rank2("matmul", b)?;
        let ka = if ta { ar } else { ac };
        let kb = if tb { bc } else { br };
        if ka != kb {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                nodes: vec![a.0, b.0],
                shapes: vec![vec![ar, ac], vec![br, bc]],
            });
        }
        let op = OpKind::MatMul { ta, tb };
        let value = compute_forward(&op, &[&self.nodes[a.0].value, &self.nodes[b.0].value]);
        Ok(self.push(op, vec![a, b], value))
    }

    pub fn concat_last_axis(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (ra, _) = self.require_rank2("concat-last-axis", a)?;
        let (rb, _) = self.require_rank2("concat-last-axis", b)?;
        if ra != rb {
            return Err(AdError::ShapeMismatch {
                op: "concat-last-axis",
                nodes: vec![a.0, b.0],
                shapes: vec![
                    self.nodes[a.0].value.shape().to_vec(),
                    self.nodes[b.0].value.shape().to_vec(),
                ],
            });
        }
        let value = compute_forward(
            &OpKind::ConcatLastAxis,
            &[&self.nodes[a.0].value, &self.nodes[b.0].value],
        );
        Ok(self.push(OpKind::ConcatLastAxis, vec![a, b], value))
    }

    pub fn slice_last_axis(&mut self, a: NodeId, start: usize, len: usize) -> AdResult<NodeId> {
        let (_, c) = self.require_rank2("slice-last-axis", a)?;
        if len == 0 || start + len > c {
            return Err(AdError::InvalidArgument {
                op: "slice-last-axis",
                detail: format!("range {start}..{} outside 0..{c}", start + len),
            });
        }
        let op = OpKind::SliceLastAxis { start, len };
        let value = compute_forward(&op, &[&self.nodes[a.0].value]);
        Ok(self.push(op, vec![a], value))
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> AdResult<NodeId> {
        self.require_rank2("reduce-mean", a)?;
        let value = compute_forward(&OpKind::ReduceMean, &[&self.nodes[a.0].value]);
        Ok(self.push(OpKind::ReduceMean, vec![a], value))
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> AdResult<NodeId> {
        self.require_rank2("reduce-sum", a)?;
        let value = compute_forward(&OpKind::ReduceSum, &[&self.nodes[a.0].value]);
        Ok(self.push(OpKind::ReduceSum, vec![a], value))
    }

    pub fn l2_norm_rows(&mut self, a: NodeId) -> AdResult<NodeId> {
        self.require_rank2("l2-norm-rows", a)?;
        let value = compute_forward(&OpKind::L2NormRows, &[&self.nodes[a.0].value]);
        Ok(self.push(OpKind::L2NormRows, vec![a], value))
    }

    pub fn broadcast_row(&mut self, row: NodeId, rows: usize) -> AdResult<NodeId> {
        let (r, _) = self.require_rank2("broadcast-row", row)?;
        if r != 1 || rows == 0 {
            return Err(AdError::InvalidArgument {
                op: "broadcast-row",
                detail: format!(
                    "need a [1, n] row and rows >= 1, got {r} rows to broadcast {rows}x"
                ),
            });
        }
        let op = OpKind::BroadcastRow { rows };
        let value = compute_forward(&op, &[&self.nodes[row.0].value]);
        Ok(self.push(op, vec![row], value))
    }
}

fn compute_forward(op: &OpKind, inputs: &[&Tensor]) -> Tensor {
    match op {
        OpKind::Leaf | OpKind::Constant => unreachable!("roots carry their own value"),
        OpKind::MatMul { ta, tb } => kernels::matmul(inputs[0], inputs[1], *ta, *tb),
        OpKind::Add => inputs[0].zip_map(inputs[1], |a, b| a + b),
        OpKind::Sub => inputs[0].zip_map(inputs[1], |a, b| a - b),
        OpKind::Mul => inputs[0].zip_map(inputs[1], |a, b| a * b),
        OpKind::ScalarMul(c) => inputs[0].map(|x| c * x),
        OpKind::LeakyRelu(s) => inputs[0].map(|x| kernels::leaky_relu_scalar(x, *s)),
        OpKind::Exp => inputs[0].map(f64::exp),
        OpKind::Log => inputs[0].map(f64::ln),
        OpKind::ConcatLastAxis => kernels::concat_cols(inputs[0], inputs[1]),
        OpKind::SliceLastAxis { start, len } => kernels::slice_cols(inputs[0], *start, *len),
        OpKind::ReduceMean => {
            let n = inputs[0].len() as f64;
            Tensor::scalar(inputs[0].data().iter().sum::<f64>() / n)
        }
        OpKind::ReduceSum => Tensor::scalar(inputs[0].data().iter().sum::<f64>()),
        OpKind::Square => inputs[0].map(|x| x * x),
        OpKind::Sqrt => inputs[0].map(f64::sqrt),
        OpKind::Abs => inputs[0].map(f64::abs),
        OpKind::L2NormRows => kernels::l2_norm_rows(inputs[0]),
        OpKind::BroadcastRow { rows } => kernels::broadcast_row(inputs[0], *rows),
    }
}

/// True iff all entries of `t` are finite.
pub fn check_finite(t: &Tensor) -> bool {
    t.is_finite()
}
