//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is an append-only list of operation records. Because a node can
//! only reference nodes that already exist, the list is topologically ordered
//! by construction. Leaves are either constant inputs or named parameters;
//! [`Graph::evaluate`] binds both by name, caches every forward value and
//! returns the scalar loss, and [`Graph::gradient`] walks the list backwards
//! to produce the gradient of the loss with respect to each parameter.
//!
//! Everything is a 2-D array. Scalars are `1 x 1`, row vectors are `1 x c`.
//! There is no general broadcasting; the only broadcast is [`Graph::add_row`],
//! which adds a `1 x c` bias to every row of an `r x c` matrix.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, Axis, Zip};
use thiserror::Error;

pub type NodeId = usize;

/// Named leaf values for one evaluation.
pub type Bindings = BTreeMap<String, Array2<f64>>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    ShapeMismatch {
        node: NodeId,
        op: String,
        detail: String,
    },
    #[error("node {node} ({op}): non-finite value")]
    NonFinite { node: NodeId, op: String },
    #[error("node {node}: no binding for `{name}`")]
    Unbound { node: NodeId, name: String },
    #[error("graph has no output node")]
    NoOutput,
    #[error("gradient requested before a successful evaluation")]
    NotEvaluated,
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

pub type Result<T> = std::result::Result<T, DiffError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Constant leaf; receives no gradient.
    Input(String),
    /// Differentiable leaf.
    Param(String),
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulT(NodeId, NodeId),
    /// `r x c` plus a `1 x c` row added to every row.
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// Sum of all squared entries, `1 x 1`.
    SumSquares(NodeId),
    /// Per-row sum of squares, `r x 1`.
    RowSumSquares(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Per-row log-sum-exp with max shift, `r x 1`.
    LogSumExpRows(NodeId),
    /// Pairwise squared Euclidean distances between the rows of two
    /// matrices, `k x l` and `m x l` to `k x m`.
    SqDist(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::SumSquares(_) => "sum_squares",
            Op::RowSumSquares(_) => "row_sum_squares",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::LogSumExpRows(_) => "log_sum_exp_rows",
            Op::SqDist(..) => "sq_dist",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::AddRow(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::SqDist(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::SumSquares(a)
            | Op::RowSumSquares(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LogSumExpRows(a) => vec![a],
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Input(n) | Op::Param(n) => write!(f, "{} `{}`", self.name(), n),
            _ => f.write_str(self.name()),
        }
    }
}

/// Gradients keyed by parameter name, each shaped like its parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<String, Array2<f64>>,
}

impl GradientSet {
    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Array2<f64>>,
    output: Option<NodeId>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    fn push(&mut self, op: Op) -> NodeId {
        for i in op.inputs() {
            assert!(i < self.ops.len(), "node {i} does not exist yet");
        }
        self.evaluated = false;
        self.ops.push(op);
        self.ops.len() - 1
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()))
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.push(Op::Param(name.to_string()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulT(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Offset(a, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumSquares(a))
    }

    pub fn row_sum_squares(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSumSquares(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSumExpRows(a))
    }

    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::SqDist(a, b))
    }

    /// Mark the scalar loss node.
    pub fn set_output(&mut self, node: NodeId) {
        assert!(node < self.ops.len(), "node {node} does not exist");
        self.output = Some(node);
        self.evaluated = false;
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Cached forward value of a node from the last successful evaluation.
    pub fn value(&self, node: NodeId) -> Option<&Array2<f64>> {
        if self.evaluated {
            self.values.get(node)
        } else {
            None
        }
    }

    /// Forward pass. Returns the scalar loss and caches all node values.
    pub fn evaluate(&mut self, bindings: &Bindings) -> Result<f64> {
        self.evaluated = false;
        let out = self.output.ok_or(DiffError::NoOutput)?;
        let mut values: Vec<Array2<f64>> = Vec::with_capacity(self.ops.len());
        for (id, op) in self.ops.iter().enumerate() {
            let v = forward(id, op, &values, bindings)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DiffError::NonFinite {
                    node: id,
                    op: op.to_string(),
                });
            }
            values.push(v);
        }
        let loss = &values[out];
        if loss.dim() != (1, 1) {
            return Err(DiffError::ShapeMismatch {
                node: out,
                op: self.ops[out].to_string(),
                detail: format!("loss must be 1x1, got {:?}", loss.dim()),
            });
        }
        let value = loss[[0, 0]];
        self.values = values;
        self.evaluated = true;
        Ok(value)
    }

    /// Reverse pass over the cached forward values.
    pub fn gradient(&self) -> Result<GradientSet> {
        if !self.evaluated {
            return Err(DiffError::NotEvaluated);
        }
        let out = self.output.ok_or(DiffError::NoOutput)?;
        let v = &self.values;
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.ops.len()];
        adj[out] = Some(Array2::ones((1, 1)));
        let mut grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();

        for id in (0..=out).rev() {
            let Some(g) = adj[id].take() else { continue };
            match &self.ops[id] {
                Op::Input(_) => {}
                Op::Param(name) => match grads.get_mut(name) {
                    Some(acc) => *acc += &g,
                    None => {
                        grads.insert(name.clone(), g);
                    }
                },
                &Op::MatMul(a, b) => {
                    accumulate(&mut adj, a, g.dot(&v[b].t()));
                    accumulate(&mut adj, b, v[a].t().dot(&g));
                }
                &Op::MatMulT(a, b) => {
                    accumulate(&mut adj, a, g.dot(&v[b]));
                    accumulate(&mut adj, b, g.t().dot(&v[a]));
                }
                &Op::AddRow(a, r) => {
                    accumulate(&mut adj, r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut adj, a, g);
                }
                &Op::Add(a, b) => {
                    accumulate(&mut adj, b, g.clone());
                    accumulate(&mut adj, a, g);
                }
                &Op::Sub(a, b) => {
                    accumulate(&mut adj, b, -&g);
                    accumulate(&mut adj, a, g);
                }
                &Op::Mul(a, b) => {
                    accumulate(&mut adj, a, &g * &v[b]);
                    accumulate(&mut adj, b, &g * &v[a]);
                }
                &Op::Scale(a, c) => accumulate(&mut adj, a, g * c),
                &Op::Offset(a, _) => accumulate(&mut adj, a, g),
                &Op::Tanh(a) => {
                    let y = &v[id];
                    let d = Zip::from(&g).and(y).map_collect(|&g, &y| g * (1.0 - y * y));
                    accumulate(&mut adj, a, d);
                }
                &Op::Relu(a) => {
                    let x = &v[a];
                    let d = Zip::from(&g)
                        .and(x)
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut adj, a, d);
                }
                &Op::Sigmoid(a) => {
                    let y = &v[id];
                    let d = Zip::from(&g).and(y).map_collect(|&g, &y| g * y * (1.0 - y));
                    accumulate(&mut adj, a, d);
                }
                &Op::SumSquares(a) => {
                    let s = g[[0, 0]];
                    accumulate(&mut adj, a, &v[a] * (2.0 * s));
                }
                &Op::RowSumSquares(a) => {
                    let d = &v[a] * &(&g * 2.0);
                    accumulate(&mut adj, a, d);
                }
                &Op::Sum(a) => {
                    let s = g[[0, 0]];
                    accumulate(&mut adj, a, Array2::from_elem(v[a].dim(), s));
                }
                &Op::Mean(a) => {
                    let s = g[[0, 0]] / v[a].len() as f64;
                    accumulate(&mut adj, a, Array2::from_elem(v[a].dim(), s));
                }
                &Op::LogSumExpRows(a) => {
                    let x = &v[a];
                    let lse = &v[id];
                    let mut d = Array2::zeros(x.dim());
                    for (r, mut row) in d.outer_iter_mut().enumerate() {
                        let (gr, l) = (g[[r, 0]], lse[[r, 0]]);
                        for (c, e) in row.iter_mut().enumerate() {
                            *e = gr * (x[[r, c]] - l).exp();
                        }
                    }
                    accumulate(&mut adj, a, d);
                }
                &Op::SqDist(a, b) => {
                    // dA_i = 2 (rowsum(G)_i a_i - (G B)_i)
                    // dB_j = 2 (colsum(G)_j b_j - (G^T A)_j)
                    let (xa, xb) = (&v[a], &v[b]);
                    let rs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let cs = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                    let da = (xa * &rs - g.dot(xb)) * 2.0;
                    let db = (xb * &cs - g.t().dot(xa)) * 2.0;
                    accumulate(&mut adj, a, da);
                    accumulate(&mut adj, b, db);
                }
            }
        }
        Ok(GradientSet { grads })
    }

    /// Evaluate and differentiate in one call.
    pub fn value_and_gradient(&mut self, bindings: &Bindings) -> Result<(f64, GradientSet)> {
        let value = self.evaluate(bindings)?;
        Ok((value, self.gradient()?))
    }

    /// Compare reverse-mode gradients with central finite differences.
    ///
    /// Returns `max |autodiff - fd| / max(|autodiff|, |fd|, 1e-6)` over every
    /// entry of every parameter that is bound and reachable. The floor keeps
    /// round-off in near-zero entries from showing up as huge relative
    /// errors. Leaves the graph evaluated
    /// at the original bindings.
    pub fn check_gradient(&mut self, bindings: &Bindings, step: f64) -> Result<f64> {
        if !(step > 0.0) {
            return Err(DiffError::InvalidStep(step));
        }
        let (_, grads) = self.value_and_gradient(bindings)?;
        let mut probe = bindings.clone();
        let mut worst = 0.0f64;
        for (name, g) in grads.iter() {
            for idx in 0..g.len() {
                let orig = bindings[name].as_slice_memory_order().expect("contiguous")[idx];
                set_entry(&mut probe, name, idx, orig + step);
                let fp = self.evaluate(&probe)?;
                set_entry(&mut probe, name, idx, orig - step);
                let fm = self.evaluate(&probe)?;
                set_entry(&mut probe, name, idx, orig);
                let fd = (fp - fm) / (2.0 * step);
                let ad = g.as_slice_memory_order().expect("contiguous")[idx];
                worst = worst.max((ad - fd).abs() / fd.abs().max(ad.abs()).max(GRAD_CHECK_FLOOR));
            }
        }
        self.evaluate(bindings)?;
        Ok(worst)
    }
}

const GRAD_CHECK_FLOOR: f64 = 1e-6;

fn set_entry(b: &mut Bindings, name: &str, idx: usize, x: f64) {
    let arr = b.get_mut(name).expect("bound parameter");
    arr.as_slice_memory_order_mut().expect("contiguous")[idx] = x;
}

fn accumulate(adj: &mut [Option<Array2<f64>>], node: NodeId, g: Array2<f64>) {
    match &mut adj[node] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn forward(id: NodeId, op: &Op, v: &[Array2<f64>], bindings: &Bindings) -> Result<Array2<f64>> {
    let mismatch = |detail: String| DiffError::ShapeMismatch {
        node: id,
        op: op.to_string(),
        detail,
    };
    let same = |a: NodeId, b: NodeId| {
        if v[a].dim() == v[b].dim() {
            Ok(())
        } else {
            Err(mismatch(format!("{:?} vs {:?}", v[a].dim(), v[b].dim())))
        }
    };
    let out = match op {
        Op::Input(name) | Op::Param(name) => {
            let x = bindings.get(name).ok_or_else(|| DiffError::Unbound {
                node: id,
                name: name.clone(),
            })?;
            // Standard layout keeps finite-difference indexing simple.
            x.as_standard_layout().into_owned()
        }
        &Op::MatMul(a, b) => {
            if v[a].ncols() != v[b].nrows() {
                return Err(mismatch(format!("{:?} x {:?}", v[a].dim(), v[b].dim())));
            }
            v[a].dot(&v[b])
        }
        &Op::MatMulT(a, b) => {
            if v[a].ncols() != v[b].ncols() {
                return Err(mismatch(format!("{:?} x {:?}^T", v[a].dim(), v[b].dim())));
            }
            v[a].dot(&v[b].t())
        }
        &Op::AddRow(a, r) => {
            if v[r].nrows() != 1 || v[r].ncols() != v[a].ncols() {
                return Err(mismatch(format!(
                    "row {:?} does not fit {:?}",
                    v[r].dim(),
                    v[a].dim()
                )));
            }
            &v[a] + &v[r]
        }
        &Op::Add(a, b) => {
            same(a, b)?;
            &v[a] + &v[b]
        }
        &Op::Sub(a, b) => {
            same(a, b)?;
            &v[a] - &v[b]
        }
        &Op::Mul(a, b) => {
            same(a, b)?;
            &v[a] * &v[b]
        }
        &Op::Scale(a, c) => &v[a] * c,
        &Op::Offset(a, c) => &v[a] + c,
        &Op::Tanh(a) => v[a].mapv(f64::tanh),
        &Op::Relu(a) => v[a].mapv(|x| if x > 0.0 { x } else { 0.0 }),
        &Op::Sigmoid(a) => v[a].mapv(sigmoid),
        &Op::SumSquares(a) => Array2::from_elem((1, 1), v[a].iter().map(|x| x * x).sum()),
        &Op::RowSumSquares(a) => v[a]
            .map_axis(Axis(1), |r| r.iter().map(|x| x * x).sum::<f64>())
            .insert_axis(Axis(1)),
        &Op::Sum(a) => Array2::from_elem((1, 1), v[a].sum()),
        &Op::Mean(a) => {
            if v[a].is_empty() {
                return Err(mismatch("mean of an empty array".into()));
            }
            Array2::from_elem((1, 1), v[a].sum() / v[a].len() as f64)
        }
        &Op::LogSumExpRows(a) => {
            if v[a].ncols() == 0 {
                return Err(mismatch("log-sum-exp over zero columns".into()));
            }
            v[a].map_axis(Axis(1), |r| log_sum_exp(r.iter().copied()))
                .insert_axis(Axis(1))
        }
        &Op::SqDist(a, b) => {
            if v[a].ncols() != v[b].ncols() {
                return Err(mismatch(format!("{:?} vs {:?} rows", v[a].dim(), v[b].dim())));
            }
            sq_dist(&v[a], &v[b])
        }
    };
    Ok(out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln sum exp(x_i)` with the max shift. Returns `-inf` for an empty input.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Pairwise squared distances by direct differencing (no `|a|^2 + |b|^2 - 2ab`
/// cancellation).
pub(crate) fn sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.outer_iter().enumerate() {
        for (j, rb) in b.outer_iter().enumerate() {
            out[[i, j]] = ra
                .iter()
                .zip(rb.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
        }
    }
    out
}
