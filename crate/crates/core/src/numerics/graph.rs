//! Static computation graphs over [`Array`] values with reverse-mode
//! vector-Jacobian products.
//!
//! A [`Graph`] is assembled once with a [`GraphBuilder`], which checks every
//! shape rule at construction time. Evaluation runs the nodes in insertion
//! order (a topological order by construction) and keeps every intermediate
//! value so that [`Forward::vjp`] can propagate a cotangent back to any set
//! of named inputs.

use std::borrow::Cow;
use std::cell::Cell;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Array, NumericsError};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
    static BACKWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Runs `f` with differentiation disabled on the current thread. Any
/// attempt to compute a vector-Jacobian product inside fails with
/// [`NumericsError::GradDisabled`].
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let previous = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(previous));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Number of graph evaluations performed on this thread.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.with(Cell::get)
}

/// Number of backward passes performed on this thread.
pub fn backward_pass_count() -> u64 {
    BACKWARD_PASSES.with(Cell::get)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is a vector spanning the last axis of lhs.
    Row,
    /// rhs holds a single value.
    Scalar,
}

#[derive(Debug, Clone)]
pub enum Op {
    Input {
        name: String,
    },
    Constant {
        value: Arc<Array>,
    },
    MatMul {
        lhs: NodeId,
        rhs: NodeId,
        transpose_rhs: bool,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Mul {
        lhs: NodeId,
        rhs: NodeId,
    },
    Tanh {
        input: NodeId,
    },
    Softmax {
        input: NodeId,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        input: NodeId,
        eps: f64,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant { .. } => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Tanh { .. } => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::Embedding { .. } => "embedding",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Constant { .. } => Vec::new(),
            Op::MatMul { lhs, rhs, .. } | Op::Add { lhs, rhs } | Op::Mul { lhs, rhs } => {
                vec![*lhs, *rhs]
            }
            Op::Tanh { input } | Op::Softmax { input } | Op::LayerNorm { input, .. } => {
                vec![*input]
            }
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    label: Option<String>,
}

/// Immutable computation graph. Safe to share across threads.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn output_node(&self, name: &str) -> Result<NodeId, NumericsError> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::UnknownOutput(name.to_string()))
    }

    fn node_name(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.label {
            Some(label) => format!("{label} (#{} {})", id.0, node.op.kind()),
            None => format!("#{} {}", id.0, node.op.kind()),
        }
    }

    /// Evaluates every node. Bound arrays must match the declared input
    /// shapes exactly.
    pub fn forward<'a>(&'a self, bindings: &Bindings<'a>) -> Result<Forward<'a>, NumericsError> {
        FORWARD_PASSES.with(|c| c.set(c.get() + 1));
        let mut values: Vec<Cow<'a, Array>> = Vec::with_capacity(self.nodes.len());
        for (index, node) in self.nodes.iter().enumerate() {
            let id = NodeId(index);
            let value: Cow<'a, Array> = match &node.op {
                Op::Input { name } => {
                    let bound = bindings
                        .get(name)
                        .ok_or_else(|| NumericsError::UnboundInput(name.clone()))?;
                    if bound.shape() != node.shape.as_slice() {
                        return Err(NumericsError::ShapeMismatch {
                            node: self.node_name(id),
                            detail: format!(
                                "input `{name}` declared {:?}, bound {:?}",
                                node.shape,
                                bound.shape()
                            ),
                        });
                    }
                    Cow::Borrowed(bound)
                }
                Op::Constant { value } => Cow::Owned(Array::clone(value)),
                op => Cow::Owned(eval_op(op, &node.shape, &values)),
            };
            if !value.is_finite() {
                return Err(NumericsError::NonFinite {
                    node: self.node_name(id),
                });
            }
            values.push(value);
        }
        Ok(Forward {
            graph: self,
            values,
        })
    }
}

/// Named input arrays for one evaluation.
#[derive(Debug, Clone, Default)]
pub struct Bindings<'a> {
    map: BTreeMap<&'a str, &'a Array>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &'a str, value: &'a Array) -> &mut Self {
        self.map.insert(name, value);
        self
    }

    pub fn with(mut self, name: &'a str, value: &'a Array) -> Self {
        self.map.insert(name, value);
        self
    }

    pub fn bind_params(&mut self, params: &'a super::ParameterSet) -> &mut Self {
        for (name, value) in params.iter() {
            self.map.insert(name, value);
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Array> {
        self.map.get(name).copied()
    }
}

/// Values of every node from one evaluation.
pub struct Forward<'a> {
    graph: &'a Graph,
    values: Vec<Cow<'a, Array>>,
}

impl<'a> Forward<'a> {
    pub fn value(&self, node: NodeId) -> &Array {
        &self.values[node.0]
    }

    pub fn output(&self, name: &str) -> Result<&Array, NumericsError> {
        let node = self.graph.output_node(name)?;
        Ok(self.value(node))
    }

    /// Returns `cotangentᵀ · J` for every requested input, where `J` is the
    /// Jacobian of `output` with respect to that input. Inputs the output
    /// does not depend on receive zeros.
    pub fn vjp(
        &self,
        output: &str,
        cotangent: &Array,
        wrt: &[&str],
    ) -> Result<BTreeMap<String, Array>, NumericsError> {
        if !grad_enabled() {
            return Err(NumericsError::GradDisabled);
        }
        let graph = self.graph;
        let out = graph.output_node(output)?;
        if cotangent.shape() != graph.shape(out) {
            return Err(NumericsError::ShapeMismatch {
                node: graph.node_name(out),
                detail: format!(
                    "cotangent {:?} does not match output {:?}",
                    cotangent.shape(),
                    graph.shape(out)
                ),
            });
        }
        let mut targets = Vec::with_capacity(wrt.len());
        for name in wrt {
            let id = graph
                .inputs
                .get(*name)
                .copied()
                .ok_or_else(|| NumericsError::UnknownInput(name.to_string()))?;
            targets.push((name.to_string(), id));
        }
        BACKWARD_PASSES.with(|c| c.set(c.get() + 1));

        // A node needs a gradient when it is a requested input or feeds one.
        let n = out.0 + 1;
        let mut needed = vec![false; n];
        for (_, id) in &targets {
            if id.0 < n {
                needed[id.0] = true;
            }
        }
        for i in 0..n {
            if !needed[i] && graph.nodes[i].op.operands().iter().any(|o| needed[o.0]) {
                needed[i] = true;
            }
        }

        let mut grads: Vec<Option<Array>> = vec![None; n];
        grads[out.0] = Some(cotangent.clone());
        for i in (0..n).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &graph.nodes[i];
            match &node.op {
                Op::Input { .. } | Op::Constant { .. } => {
                    grads[i] = Some(grad);
                    continue;
                }
                op => {
                    for (operand, g) in backward_op(op, &grad, &self.values, &node.shape, &needed) {
                        if !g.is_finite() {
                            return Err(NumericsError::NonFinite {
                                node: graph.node_name(operand),
                            });
                        }
                        match &mut grads[operand.0] {
                            Some(existing) => existing.axpy(1.0, &g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }

        let mut result = BTreeMap::new();
        for (name, id) in targets {
            let g = if id.0 < n { grads[id.0].clone() } else { None };
            let g = g.unwrap_or_else(|| Array::zeros_like_shape(graph.shape(id)));
            result.insert(name, g);
        }
        Ok(result)
    }
}

impl Array {
    fn zeros_like_shape(shape: &[usize]) -> Array {
        if shape.is_empty() {
            Array::scalar(0.0)
        } else {
            Array::zeros(shape)
        }
    }
}

/// Assembles a [`Graph`], validating shapes as nodes are added.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: Graph,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        self.graph.shape(node)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.graph.nodes.len());
        self.graph.nodes.push(Node {
            op,
            shape,
            label: None,
        });
        id
    }

    fn mismatch(&self, kind: &str, detail: String) -> NumericsError {
        NumericsError::ShapeMismatch {
            node: format!("#{} {kind}", self.graph.nodes.len()),
            detail,
        }
    }

    /// Declares a named input. Declaring the same name twice with the same
    /// shape returns the existing node.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, NumericsError> {
        if let Some(&id) = self.graph.inputs.get(name) {
            if self.graph.shape(id) == shape {
                return Ok(id);
            }
            return Err(self.mismatch(
                "input",
                format!("input `{name}` redeclared with shape {shape:?}"),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(self.mismatch("input", format!("zero dimension in {shape:?}")));
        }
        let id = self.push(
            Op::Input {
                name: name.to_string(),
            },
            shape.to_vec(),
        );
        self.graph.nodes[id.0].label = Some(name.to_string());
        self.graph.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(
            Op::Constant {
                value: Arc::new(value),
            },
            shape,
        )
    }

    pub fn constant_shared(&mut self, value: Arc<Array>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant { value }, shape)
    }

    fn matmul_impl(
        &mut self,
        lhs: NodeId,
        rhs: NodeId,
        transpose_rhs: bool,
    ) -> Result<NodeId, NumericsError> {
        let ls = self.shape(lhs).to_vec();
        let rs = self.shape(rhs).to_vec();
        if rs.len() != 2 || ls.is_empty() || ls.len() > 2 {
            return Err(self.mismatch(
                "matmul",
                format!("unsupported ranks {ls:?} x {rs:?}"),
            ));
        }
        let k = *ls.last().unwrap();
        let (rk, n) = if transpose_rhs {
            (rs[1], rs[0])
        } else {
            (rs[0], rs[1])
        };
        if k != rk {
            return Err(self.mismatch(
                "matmul",
                format!("inner dimensions differ: {ls:?} x {rs:?} (transpose_rhs={transpose_rhs})"),
            ));
        }
        let shape = if ls.len() == 1 { vec![n] } else { vec![ls[0], n] };
        Ok(self.push(
            Op::MatMul {
                lhs,
                rhs,
                transpose_rhs,
            },
            shape,
        ))
    }

    /// `lhs · rhs`. A rank-1 `lhs` is treated as a single row.
    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, NumericsError> {
        self.matmul_impl(lhs, rhs, false)
    }

    /// `lhs · rhsᵀ`.
    pub fn matmul_t(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, NumericsError> {
        self.matmul_impl(lhs, rhs, true)
    }

    fn broadcast_operands(
        &self,
        kind: &str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(NodeId, NodeId), NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (la, lb): (usize, usize) = (sa.iter().product(), sb.iter().product());
        let (lhs, rhs) = if lb > la { (b, a) } else { (a, b) };
        if broadcast_kind(self.shape(lhs), self.shape(rhs)).is_none() {
            return Err(self.mismatch(
                kind,
                format!("cannot broadcast {:?} with {:?}", self.shape(lhs), self.shape(rhs)),
            ));
        }
        Ok((lhs, rhs))
    }

    /// Elementwise sum; the smaller operand may be a scalar or a vector
    /// spanning the last axis.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (lhs, rhs) = self.broadcast_operands("add", a, b)?;
        let shape = self.shape(lhs).to_vec();
        Ok(self.push(Op::Add { lhs, rhs }, shape))
    }

    /// Elementwise product with the same broadcasting rule as [`add`](Self::add).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (lhs, rhs) = self.broadcast_operands("mul", a, b)?;
        let shape = self.shape(lhs).to_vec();
        Ok(self.push(Op::Mul { lhs, rhs }, shape))
    }

    /// Multiplies by a constant factor.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, NumericsError> {
        let c = self.constant(Array::scalar(factor));
        self.mul(x, c)
    }

    /// `a - b` composed as `a + (-1)·b`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Tanh { input: x }, shape)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(self.mismatch("softmax", "softmax of a scalar".into()));
        }
        Ok(self.push(Op::Softmax { input: x }, shape))
    }

    /// Row lookup: `table[ids[i]]` for each id, giving `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NumericsError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(self.mismatch("embedding", format!("table must be rank 2, got {ts:?}")));
        }
        if ids.is_empty() {
            return Err(self.mismatch("embedding", "empty id list".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(self.mismatch(
                "embedding",
                format!("id {bad} out of range for table {ts:?}"),
            ));
        }
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), ts[1]],
        ))
    }

    /// Normalizes each row over the last axis to zero mean, unit variance.
    pub fn layer_norm(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(self.mismatch("layer_norm", "layer norm of a scalar".into()));
        }
        Ok(self.push(Op::LayerNorm { input: x, eps: 1e-5 }, shape))
    }

    /// Mean cross-entropy of `logits` rows against integer targets. Rows
    /// with `None` are ignored. Produces a scalar.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[Option<usize>],
    ) -> Result<NodeId, NumericsError> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(self.mismatch(
                "cross_entropy",
                format!("logits {ls:?} vs {} targets", targets.len()),
            ));
        }
        if targets.iter().all(Option::is_none) {
            return Err(self.mismatch("cross_entropy", "no target positions".into()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= ls[1]) {
            return Err(self.mismatch(
                "cross_entropy",
                format!("target {bad} out of range for {} classes", ls[1]),
            ));
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            Vec::new(),
        ))
    }

    pub fn label(&mut self, node: NodeId, label: impl Into<String>) {
        self.graph.nodes[node.0].label = Some(label.into());
    }

    pub fn output(&mut self, name: &str, node: NodeId) {
        self.graph.outputs.insert(name.to_string(), node);
    }

    pub fn finish(self) -> Graph {
        self.graph
    }
}

fn broadcast_kind(lhs: &[usize], rhs: &[usize]) -> Option<Broadcast> {
    if lhs == rhs {
        return Some(Broadcast::Same);
    }
    let rl: usize = rhs.iter().product();
    if rl == 1 {
        return Some(Broadcast::Scalar);
    }
    if rhs.len() == 1 && !lhs.is_empty() && lhs[lhs.len() - 1] == rhs[0] {
        return Some(Broadcast::Row);
    }
    None
}

/// C = A·op(B) with matrixmultiply strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (a_rs, a_cs): (usize, usize),
    b: &[f64],
    (b_rs, b_cs): (usize, usize),
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides, checked above, and `c` does not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matmul_dims(lhs: &Array, rhs: &Array, transpose_rhs: bool) -> (usize, usize, usize) {
    let k = lhs.last_dim();
    let m = lhs.len() / k;
    let n = if transpose_rhs {
        rhs.shape()[0]
    } else {
        rhs.shape()[1]
    };
    (m, k, n)
}

fn eval_op(op: &Op, shape: &[usize], values: &[Cow<'_, Array>]) -> Array {
    let v = |id: &NodeId| -> &Array { &values[id.0] };
    match op {
        Op::Input { .. } | Op::Constant { .. } => unreachable!("leaves are bound directly"),
        Op::MatMul {
            lhs,
            rhs,
            transpose_rhs,
        } => {
            let (a, b) = (v(lhs), v(rhs));
            let (m, k, n) = matmul_dims(a, b, *transpose_rhs);
            let mut out = vec![0.0; m * n];
            let b_strides = if *transpose_rhs { (1, k) } else { (n, 1) };
            gemm(m, k, n, a.data(), (k, 1), b.data(), b_strides, &mut out);
            Array::new(shape.to_vec(), out).expect("matmul shape")
        }
        Op::Add { lhs, rhs } => broadcast_apply(v(lhs), v(rhs), |a, b| a + b),
        Op::Mul { lhs, rhs } => broadcast_apply(v(lhs), v(rhs), |a, b| a * b),
        Op::Tanh { input } => v(input).map(f64::tanh),
        Op::Softmax { input } => {
            let x = v(input);
            let cols = x.last_dim();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(cols) {
                softmax_in_place(row);
            }
            Array::new(shape.to_vec(), out).expect("softmax shape")
        }
        Op::Embedding { table, ids } => {
            let t = v(table);
            let dim = t.shape()[1];
            let mut out = Vec::with_capacity(ids.len() * dim);
            for &id in ids {
                out.extend_from_slice(t.row(id));
            }
            Array::new(shape.to_vec(), out).expect("embedding shape")
        }
        Op::LayerNorm { input, eps } => {
            let x = v(input);
            let cols = x.last_dim();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(cols) {
                let (mean, inv_std) = row_stats(row, *eps);
                for value in row.iter_mut() {
                    *value = (*value - mean) * inv_std;
                }
            }
            Array::new(shape.to_vec(), out).expect("layer norm shape")
        }
        Op::CrossEntropy { logits, targets } => {
            let x = v(logits);
            let mut total = 0.0;
            let mut count = 0usize;
            for (i, target) in targets.iter().enumerate() {
                if let Some(t) = target {
                    let row = x.row(i);
                    total += log_sum_exp(row) - row[*t];
                    count += 1;
                }
            }
            Array::scalar(total / count as f64)
        }
    }
}

fn broadcast_apply(lhs: &Array, rhs: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let kind = broadcast_kind(lhs.shape(), rhs.shape()).expect("validated at build");
    let out: Vec<f64> = match kind {
        Broadcast::Same => lhs
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| f(a, b))
            .collect(),
        Broadcast::Scalar => {
            let b = rhs.data()[0];
            lhs.data().iter().map(|&a| f(a, b)).collect()
        }
        Broadcast::Row => {
            let cols = rhs.len();
            lhs.data()
                .iter()
                .enumerate()
                .map(|(i, &a)| f(a, rhs.data()[i % cols]))
                .collect()
        }
    };
    Array::new(lhs.shape().to_vec(), out).expect("broadcast shape")
}

/// Sums `g` down to the shape of the broadcast operand.
fn reduce_broadcast(g: Vec<f64>, lhs_shape: &[usize], rhs: &Array) -> Array {
    match broadcast_kind(lhs_shape, rhs.shape()).expect("validated at build") {
        Broadcast::Same => Array::new(rhs.shape().to_vec(), g).expect("same shape"),
        Broadcast::Scalar => {
            let total: f64 = g.iter().sum();
            let mut out = Array::zeros_like_shape(rhs.shape());
            out.data_mut()[0] = total;
            out
        }
        Broadcast::Row => {
            let cols = rhs.len();
            let mut out = vec![0.0; cols];
            for row in g.chunks(cols) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Array::new(rhs.shape().to_vec(), out).expect("row shape")
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for value in row.iter_mut() {
        *value = (*value - max).exp();
        sum += *value;
    }
    for value in row.iter_mut() {
        *value /= sum;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn backward_op(
    op: &Op,
    grad: &Array,
    values: &[Cow<'_, Array>],
    out_shape: &[usize],
    needed: &[bool],
) -> Vec<(NodeId, Array)> {
    let v = |id: &NodeId| -> &Array { &values[id.0] };
    let mut result = Vec::with_capacity(2);
    match op {
        Op::Input { .. } | Op::Constant { .. } => {}
        Op::MatMul {
            lhs,
            rhs,
            transpose_rhs,
        } => {
            let (a, b) = (v(lhs), v(rhs));
            let (m, k, n) = matmul_dims(a, b, *transpose_rhs);
            if needed[lhs.0] {
                // dA = dC · op(B)ᵀ
                let mut da = vec![0.0; m * k];
                let b_strides = if *transpose_rhs { (k, 1) } else { (1, n) };
                gemm(m, n, k, grad.data(), (n, 1), b.data(), b_strides, &mut da);
                result.push((*lhs, Array::new(a.shape().to_vec(), da).expect("dA")));
            }
            if needed[rhs.0] {
                let mut db = vec![0.0; k * n];
                if *transpose_rhs {
                    // dB[n,k] = dCᵀ · A
                    gemm(n, m, k, grad.data(), (1, n), a.data(), (k, 1), &mut db);
                } else {
                    // dB[k,n] = Aᵀ · dC
                    gemm(k, m, n, a.data(), (1, k), grad.data(), (n, 1), &mut db);
                }
                result.push((*rhs, Array::new(b.shape().to_vec(), db).expect("dB")));
            }
        }
        Op::Add { lhs, rhs } => {
            if needed[lhs.0] {
                result.push((*lhs, grad.clone()));
            }
            if needed[rhs.0] {
                let r = v(rhs);
                result.push((*rhs, reduce_broadcast(grad.data().to_vec(), out_shape, r)));
            }
        }
        Op::Mul { lhs, rhs } => {
            let (a, b) = (v(lhs), v(rhs));
            if needed[lhs.0] {
                result.push((*lhs, broadcast_apply(grad, b, |g, bv| g * bv)));
            }
            if needed[rhs.0] {
                let prod: Vec<f64> = grad
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(g, av)| g * av)
                    .collect();
                result.push((*rhs, reduce_broadcast(prod, out_shape, b)));
            }
        }
        Op::Tanh { input } => {
            if needed[input.0] {
                let y = v(input).map(f64::tanh);
                result.push((*input, grad.zip_map(&y, |g, t| g * (1.0 - t * t))));
            }
        }
        Op::Softmax { input } => {
            if needed[input.0] {
                let x = v(input);
                let cols = x.last_dim();
                let mut out = x.data().to_vec();
                for (row, g) in out.chunks_mut(cols).zip(grad.data().chunks(cols)) {
                    softmax_in_place(row);
                    let dot: f64 = row.iter().zip(g).map(|(y, g)| y * g).sum();
                    for (y, g) in row.iter_mut().zip(g) {
                        *y *= g - dot;
                    }
                }
                result.push((*input, Array::new(x.shape().to_vec(), out).expect("softmax grad")));
            }
        }
        Op::Embedding { table, ids } => {
            if needed[table.0] {
                let t = v(table);
                let dim = t.shape()[1];
                let mut dt = Array::zeros(t.shape());
                let data = dt.data_mut();
                for (i, &id) in ids.iter().enumerate() {
                    let g = &grad.data()[i * dim..(i + 1) * dim];
                    for (o, gv) in data[id * dim..(id + 1) * dim].iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                result.push((*table, dt));
            }
        }
        Op::LayerNorm { input, eps } => {
            if needed[input.0] {
                let x = v(input);
                let cols = x.last_dim();
                let n = cols as f64;
                let mut out = vec![0.0; x.len()];
                for ((row, g), o) in x
                    .data()
                    .chunks(cols)
                    .zip(grad.data().chunks(cols))
                    .zip(out.chunks_mut(cols))
                {
                    let (mean, inv_std) = row_stats(row, *eps);
                    let g_mean = g.iter().sum::<f64>() / n;
                    let gx_mean = row
                        .iter()
                        .zip(g)
                        .map(|(xv, gv)| (xv - mean) * inv_std * gv)
                        .sum::<f64>()
                        / n;
                    for ((ov, xv), gv) in o.iter_mut().zip(row).zip(g) {
                        let xhat = (xv - mean) * inv_std;
                        *ov = inv_std * (gv - g_mean - xhat * gx_mean);
                    }
                }
                result.push((*input, Array::new(x.shape().to_vec(), out).expect("ln grad")));
            }
        }
        Op::CrossEntropy { logits, targets } => {
            if needed[logits.0] {
                let x = v(logits);
                let cols = x.last_dim();
                let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                let scale = grad.item() / count;
                let mut out = vec![0.0; x.len()];
                for (i, target) in targets.iter().enumerate() {
                    if let Some(t) = target {
                        let row = &mut out[i * cols..(i + 1) * cols];
                        row.copy_from_slice(x.row(i));
                        softmax_in_place(row);
                        row[*t] -= 1.0;
                        for value in row.iter_mut() {
                            *value *= scale;
                        }
                    }
                }
                result.push((*logits, Array::new(x.shape().to_vec(), out).expect("ce grad")));
            }
        }
    }
    result
}

/// Evaluates a graph and returns every declared output.
pub fn evaluate(
    graph: &Graph,
    bindings: &Bindings<'_>,
) -> Result<BTreeMap<String, Array>, NumericsError> {
    let forward = graph.forward(bindings)?;
    let mut outputs = BTreeMap::new();
    for (name, &id) in &graph.outputs {
        outputs.insert(name.clone(), forward.value(id).clone());
    }
    Ok(outputs)
}

/// Evaluates a graph, then returns `cotangentᵀ · ∂output/∂leaf` for each
/// requested leaf.
pub fn vjp(
    graph: &Graph,
    bindings: &Bindings<'_>,
    output: &str,
    cotangent: &Array,
    wrt: &[&str],
) -> Result<BTreeMap<String, Array>, NumericsError> {
    let forward = graph.forward(bindings)?;
    forward.vjp(output, cotangent, wrt)
}
