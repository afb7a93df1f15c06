//! Reverse-mode automatic differentiation over small dense vector/matrix
//! expressions.
//!
//! An [`ExprGraph`] is an append-only arena of operation records. Operands
//! always precede their consumers, so a single forward sweep evaluates the
//! graph and a single reverse sweep accumulates adjoints. Graphs are built
//! once and re-evaluated many times with fresh leaf bindings; value and
//! adjoint buffers are reused between passes.

use std::fmt;

use thiserror::Error;

/// Errors raised while evaluating or differentiating a graph.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("numeric overflow: non-finite value produced at node {node} ({op})")]
    NumericOverflow { node: usize, op: &'static str },
    #[error("leaf `{name}` (node {node}) has no bound value")]
    UnboundLeaf { node: usize, name: String },
    #[error("stale graph: forward_eval must run before backward")]
    StaleGraph,
    #[error("node {0} does not exist or is not a leaf")]
    InvalidNode(usize),
    #[error("seed has length {got}, output node {node} has {expected} entries")]
    SeedLength {
        node: usize,
        expected: usize,
        got: usize,
    },
}

/// Dense row-major array. Vectors are stored as `n x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn vector(data: &[f64]) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data: data.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::vector(&[value])
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Self { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn reshape_zeroed(&mut self, rows: usize, cols: usize) {
        self.rows = rows;
        self.cols = cols;
        self.data.clear();
        self.data.resize(rows * cols, 0.0);
    }
}

/// Handle to a node in an [`ExprGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { ordinal: usize, name: String },
    Const,
    MatVec(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Softplus(usize),
    Square(usize),
    Sum(usize),
    Dot(usize, usize),
    Concat(Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Const => "const",
            Op::MatVec(..) => "matvec",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
            Op::Concat(_) => "concat",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Per-leaf gradients, indexed in leaf creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    leaves: Vec<NodeId>,
    grads: Vec<Tensor>,
}

impl Gradient {
    /// Gradient with respect to `leaf`, `None` if `leaf` is not a leaf of the graph.
    pub fn wrt(&self, leaf: NodeId) -> Option<&Tensor> {
        self.leaves
            .iter()
            .position(|&l| l == leaf)
            .map(|i| &self.grads[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.leaves.iter().copied().zip(self.grads.iter())
    }

    pub fn by_ordinal(&self, ordinal: usize) -> &Tensor {
        &self.grads[ordinal]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Largest error over all leaf entries (relative, or absolute where the
    /// analytic derivative is below `1e-8` in magnitude).
    pub max_error: f64,
    pub worst_entry: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

/// Below this magnitude the FD comparison falls back to absolute error.
pub const FD_ABSOLUTE_THRESHOLD: f64 = 1e-8;

/// Append-only expression graph with cached forward values.
#[derive(Debug, Clone, Default)]
pub struct ExprGraph {
    nodes: Vec<Node>,
    leaves: Vec<usize>,
    bound: Vec<bool>,
    outputs: Vec<NodeId>,
    evaluated: bool,
    adjoint: Vec<Tensor>,
    touched: Vec<bool>,
}

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.leaves.iter().map(|&i| NodeId(i)).collect()
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn mark_output(&mut self, node: NodeId) {
        self.outputs.push(node);
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        for operand in operands(&op) {
            debug_assert!(operand < self.nodes.len(), "operand must precede consumer");
        }
        self.nodes.push(Node { op, value });
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    /// Declares a leaf of the given shape. Its value must be bound before evaluation.
    pub fn leaf(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        let ordinal = self.leaves.len();
        let id = self.push(
            Op::Leaf {
                ordinal,
                name: name.to_string(),
            },
            Tensor::zeros(rows, cols),
        );
        self.leaves.push(id.0);
        self.bound.push(false);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn constant_vector(&mut self, data: &[f64]) -> NodeId {
        self.constant(Tensor::vector(data))
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        self.push(Op::MatVec(m.0, v.0), Tensor::zeros(0, 0))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a.0, b.0), Tensor::zeros(0, 0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a.0, b.0), Tensor::zeros(0, 0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a.0, b.0), Tensor::zeros(0, 0))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a.0, factor), Tensor::zeros(0, 0))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a.0), Tensor::zeros(0, 0))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softplus(a.0), Tensor::zeros(0, 0))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a.0), Tensor::zeros(0, 0))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a.0), Tensor::zeros(0, 0))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Dot(a.0, b.0), Tensor::zeros(0, 0))
    }

    /// Stacks the entries of every part into one column vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(
            Op::Concat(parts.iter().map(|p| p.0).collect()),
            Tensor::zeros(0, 0),
        )
    }

    fn check_node(&self, node: NodeId) -> Result<(), AutodiffError> {
        if node.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::InvalidNode(node.0))
        }
    }

    /// Binds a value to a leaf. The value length must match the declared shape.
    pub fn bind(&mut self, leaf: NodeId, values: &[f64]) -> Result<(), AutodiffError> {
        self.check_node(leaf)?;
        let node = &mut self.nodes[leaf.0];
        let Op::Leaf { ordinal, name } = &node.op else {
            return Err(AutodiffError::InvalidNode(leaf.0));
        };
        if values.len() != node.value.len() {
            return Err(AutodiffError::ShapeMismatch {
                node: leaf.0,
                op: "leaf",
                detail: format!(
                    "leaf `{name}` declared {}x{}, bound {} values",
                    node.value.rows,
                    node.value.cols,
                    values.len()
                ),
            });
        }
        node.value.data.copy_from_slice(values);
        self.bound[*ordinal] = true;
        self.evaluated = false;
        Ok(())
    }

    /// Binds every listed leaf, evaluates the graph and returns the values of
    /// the marked outputs.
    pub fn forward_eval(
        &mut self,
        leaf_values: &[(NodeId, Tensor)],
    ) -> Result<Vec<Tensor>, AutodiffError> {
        for (leaf, value) in leaf_values {
            self.check_node(*leaf)?;
            let declared = self.nodes[leaf.0].value.shape();
            if value.shape() != declared {
                return Err(AutodiffError::ShapeMismatch {
                    node: leaf.0,
                    op: "leaf",
                    detail: format!(
                        "declared {}x{}, bound {}x{}",
                        declared.0, declared.1, value.rows, value.cols
                    ),
                });
            }
            self.bind(*leaf, &value.data)?;
        }
        self.evaluate()?;
        Ok(self
            .outputs
            .iter()
            .map(|o| self.nodes[o.0].value.clone())
            .collect())
    }

    /// Recomputes every non-constant node from the current leaf bindings.
    pub fn evaluate(&mut self) -> Result<(), AutodiffError> {
        self.evaluated = false;
        for (ordinal, &bound) in self.bound.iter().enumerate() {
            if !bound {
                let node = self.leaves[ordinal];
                let name = match &self.nodes[node].op {
                    Op::Leaf { name, .. } => name.clone(),
                    _ => String::new(),
                };
                return Err(AutodiffError::UnboundLeaf { node, name });
            }
        }
        for i in 0..self.nodes.len() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            forward_node(i, &node.op, &mut node.value, before)?;
        }
        self.evaluated = true;
        Ok(())
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn is_evaluated(&self) -> bool {
        self.evaluated
    }

    /// Zero gradient shaped like the current leaves.
    pub fn zero_gradient(&self) -> Gradient {
        Gradient {
            leaves: self.leaves(),
            grads: self
                .leaves
                .iter()
                .map(|&l| {
                    let v = &self.nodes[l].value;
                    Tensor::zeros(v.rows, v.cols)
                })
                .collect(),
        }
    }

    /// Gradient of `seed · output` with respect to every leaf.
    pub fn backward(&mut self, output: NodeId, seed: &[f64]) -> Result<Gradient, AutodiffError> {
        let mut grad = self.zero_gradient();
        self.backward_accumulate(output, seed, &mut grad)?;
        Ok(grad)
    }

    /// Adds the gradient of `seed · output` into `grad`.
    pub fn backward_accumulate(
        &mut self,
        output: NodeId,
        seed: &[f64],
        grad: &mut Gradient,
    ) -> Result<(), AutodiffError> {
        self.check_node(output)?;
        if !self.evaluated {
            return Err(AutodiffError::StaleGraph);
        }
        let out_len = self.nodes[output.0].value.len();
        if seed.len() != out_len {
            return Err(AutodiffError::SeedLength {
                node: output.0,
                expected: out_len,
                got: seed.len(),
            });
        }
        let n = output.0 + 1;
        if self.adjoint.len() < self.nodes.len() {
            self.adjoint.resize(self.nodes.len(), Tensor::zeros(0, 0));
            self.touched.resize(self.nodes.len(), false);
        }
        for t in &mut self.touched[..n] {
            *t = false;
        }
        {
            let adj = &mut self.adjoint[output.0];
            let v = &self.nodes[output.0].value;
            adj.reshape_zeroed(v.rows, v.cols);
            adj.data.copy_from_slice(seed);
            self.touched[output.0] = true;
        }
        for i in (0..n).rev() {
            if !self.touched[i] {
                continue;
            }
            let op = &self.nodes[i].op;
            if let Op::Leaf { ordinal, .. } = op {
                let g = &mut grad.grads[*ordinal];
                for (gi, ai) in g.data.iter_mut().zip(&self.adjoint[i].data) {
                    *gi += ai;
                }
                continue;
            }
            if matches!(op, Op::Const) {
                continue;
            }
            let (adj_before, adj_rest) = self.adjoint.split_at_mut(i);
            let adj_i = &adj_rest[0];
            backward_node(
                op,
                &self.nodes[i].value,
                adj_i,
                &self.nodes,
                adj_before,
                &mut self.touched[..i],
            );
        }
        Ok(())
    }

    /// Compares `backward` against central finite differences for one leaf.
    ///
    /// The objective is the sum of the entries of `output`. Leaf bindings are
    /// restored afterwards and the graph is left evaluated at them.
    pub fn check_gradient_fd(
        &mut self,
        output: NodeId,
        leaf: NodeId,
        h: f64,
        tol: f64,
    ) -> Result<FdReport, AutodiffError> {
        assert!(h > 0.0, "finite-difference step must be positive");
        self.check_node(leaf)?;
        if !matches!(self.nodes[leaf.0].op, Op::Leaf { .. }) {
            return Err(AutodiffError::InvalidNode(leaf.0));
        }
        self.evaluate()?;
        let ones = vec![1.0; self.nodes[output.0].value.len()];
        let analytic = self
            .backward(output, &ones)?
            .wrt(leaf)
            .map(|t| t.data.clone())
            .unwrap_or_default();
        let base = self.nodes[leaf.0].value.data.clone();
        let mut numeric = Vec::with_capacity(base.len());
        let mut perturbed = base.clone();
        for k in 0..base.len() {
            perturbed[k] = base[k] + h;
            self.bind(leaf, &perturbed)?;
            self.evaluate()?;
            let plus: f64 = self.nodes[output.0].value.data.iter().sum();
            perturbed[k] = base[k] - h;
            self.bind(leaf, &perturbed)?;
            self.evaluate()?;
            let minus: f64 = self.nodes[output.0].value.data.iter().sum();
            perturbed[k] = base[k];
            numeric.push((plus - minus) / (2.0 * h));
        }
        self.bind(leaf, &base)?;
        self.evaluate()?;
        let (max_error, worst_entry) = compare_gradients(&analytic, &numeric);
        Ok(FdReport {
            max_error,
            worst_entry,
            passed: max_error <= tol,
            analytic,
            numeric,
        })
    }
}

/// Largest per-entry discrepancy and its index. Relative error, except
/// absolute where the analytic value is below [`FD_ABSOLUTE_THRESHOLD`].
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (k, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = if a.abs() < FD_ABSOLUTE_THRESHOLD {
            (a - n).abs()
        } else {
            (a - n).abs() / a.abs()
        };
        if err > worst.0 || err.is_nan() {
            worst = (err, k);
        }
    }
    worst
}

fn operands(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf { .. } | Op::Const => vec![],
        Op::MatVec(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Dot(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _) | Op::Tanh(a) | Op::Softplus(a) | Op::Square(a) | Op::Sum(a) => vec![*a],
        Op::Concat(parts) => parts.clone(),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(node: usize, op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            node,
            op,
            detail: format!(
                "operands are {}x{} and {}x{}",
                a.rows, a.cols, b.rows, b.cols
            ),
        });
    }
    Ok(())
}

fn forward_node(i: usize, op: &Op, out: &mut Tensor, before: &[Node]) -> Result<(), AutodiffError> {
    let name = op.name();
    match op {
        Op::Leaf { .. } | Op::Const => return Ok(()),
        Op::MatVec(m, v) => {
            let (m, v) = (&before[*m].value, &before[*v].value);
            if m.cols != v.len() || v.cols != 1 {
                return Err(AutodiffError::ShapeMismatch {
                    node: i,
                    op: name,
                    detail: format!(
                        "matrix is {}x{}, vector is {}x{}",
                        m.rows, m.cols, v.rows, v.cols
                    ),
                });
            }
            out.reshape_zeroed(m.rows, 1);
            for (r, o) in out.data.iter_mut().enumerate() {
                let row = &m.data[r * m.cols..(r + 1) * m.cols];
                *o = row.iter().zip(&v.data).map(|(a, b)| a * b).sum();
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (a, b) = (&before[*a].value, &before[*b].value);
            same_shape(i, name, a, b)?;
            out.reshape_zeroed(a.rows, a.cols);
            let it = out.data.iter_mut().zip(a.data.iter().zip(&b.data));
            match op {
                Op::Add(..) => it.for_each(|(o, (x, y))| *o = x + y),
                Op::Sub(..) => it.for_each(|(o, (x, y))| *o = x - y),
                _ => it.for_each(|(o, (x, y))| *o = x * y),
            }
        }
        Op::Scale(a, c) => {
            let a = &before[*a].value;
            out.reshape_zeroed(a.rows, a.cols);
            for (o, x) in out.data.iter_mut().zip(&a.data) {
                *o = c * x;
            }
        }
        Op::Tanh(a) | Op::Softplus(a) | Op::Square(a) => {
            let a = &before[*a].value;
            out.reshape_zeroed(a.rows, a.cols);
            let it = out.data.iter_mut().zip(&a.data);
            match op {
                Op::Tanh(_) => it.for_each(|(o, x)| *o = x.tanh()),
                Op::Softplus(_) => it.for_each(|(o, x)| *o = softplus(*x)),
                _ => it.for_each(|(o, x)| *o = x * x),
            }
        }
        Op::Sum(a) => {
            let a = &before[*a].value;
            out.reshape_zeroed(1, 1);
            out.data[0] = a.data.iter().sum();
        }
        Op::Dot(a, b) => {
            let (a, b) = (&before[*a].value, &before[*b].value);
            same_shape(i, name, a, b)?;
            out.reshape_zeroed(1, 1);
            out.data[0] = a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum();
        }
        Op::Concat(parts) => {
            let total = parts.iter().map(|&p| before[p].value.len()).sum();
            out.reshape_zeroed(total, 1);
            let mut offset = 0;
            for &p in parts {
                let src = &before[p].value.data;
                out.data[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
    }
    if out.data.iter().any(|x| !x.is_finite()) {
        return Err(AutodiffError::NumericOverflow { node: i, op: name });
    }
    Ok(())
}

fn accumulate<'a>(
    adj: &'a mut [Tensor],
    touched: &mut [bool],
    nodes: &[Node],
    k: usize,
) -> &'a mut Tensor {
    if !touched[k] {
        let v = &nodes[k].value;
        adj[k].reshape_zeroed(v.rows, v.cols);
        touched[k] = true;
    }
    &mut adj[k]
}

fn backward_node(
    op: &Op,
    value: &Tensor,
    adj_i: &Tensor,
    nodes: &[Node],
    adj: &mut [Tensor],
    touched: &mut [bool],
) {
    let g = &adj_i.data;
    match op {
        Op::Leaf { .. } | Op::Const => {}
        Op::MatVec(m, v) => {
            let (mv, vv) = (&nodes[*m].value, &nodes[*v].value);
            let cols = mv.cols;
            {
                let am = accumulate(adj, touched, nodes, *m);
                for (r, gr) in g.iter().enumerate() {
                    let row = &mut am.data[r * cols..(r + 1) * cols];
                    for (a, x) in row.iter_mut().zip(&vv.data) {
                        *a += gr * x;
                    }
                }
            }
            let av = accumulate(adj, touched, nodes, *v);
            for (r, gr) in g.iter().enumerate() {
                let row = &mv.data[r * cols..(r + 1) * cols];
                for (a, w) in av.data.iter_mut().zip(row) {
                    *a += gr * w;
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            for (x, gi) in accumulate(adj, touched, nodes, *a).data.iter_mut().zip(g) {
                *x += gi;
            }
            for (x, gi) in accumulate(adj, touched, nodes, *b).data.iter_mut().zip(g) {
                *x += sign * gi;
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            for ((x, gi), y) in accumulate(adj, touched, nodes, *a)
                .data
                .iter_mut()
                .zip(g)
                .zip(&bv.data)
            {
                *x += gi * y;
            }
            for ((x, gi), y) in accumulate(adj, touched, nodes, *b)
                .data
                .iter_mut()
                .zip(g)
                .zip(&av.data)
            {
                *x += gi * y;
            }
        }
        Op::Scale(a, c) => {
            for (x, gi) in accumulate(adj, touched, nodes, *a).data.iter_mut().zip(g) {
                *x += c * gi;
            }
        }
        Op::Tanh(a) => {
            for ((x, gi), y) in accumulate(adj, touched, nodes, *a)
                .data
                .iter_mut()
                .zip(g)
                .zip(&value.data)
            {
                *x += gi * (1.0 - y * y);
            }
        }
        Op::Softplus(a) => {
            let input = &nodes[*a].value;
            for ((x, gi), u) in accumulate(adj, touched, nodes, *a)
                .data
                .iter_mut()
                .zip(g)
                .zip(&input.data)
            {
                *x += gi * sigmoid(*u);
            }
        }
        Op::Square(a) => {
            let input = &nodes[*a].value;
            for ((x, gi), u) in accumulate(adj, touched, nodes, *a)
                .data
                .iter_mut()
                .zip(g)
                .zip(&input.data)
            {
                *x += 2.0 * gi * u;
            }
        }
        Op::Sum(a) => {
            for x in accumulate(adj, touched, nodes, *a).data.iter_mut() {
                *x += g[0];
            }
        }
        Op::Dot(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            for (x, y) in accumulate(adj, touched, nodes, *a).data.iter_mut().zip(&bv.data) {
                *x += g[0] * y;
            }
            for (x, y) in accumulate(adj, touched, nodes, *b).data.iter_mut().zip(&av.data) {
                *x += g[0] * y;
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                for (x, gi) in accumulate(adj, touched, nodes, p)
                    .data
                    .iter_mut()
                    .zip(&g[offset..offset + len])
                {
                    *x += gi;
                }
                offset += len;
            }
        }
    }
}
