use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Probability floor used when taking logs of predicted probabilities.
pub const LOG_CLAMP: f64 = 1e-12;

const NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Dot(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    ScaleByScalar(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    LnClamped(NodeId),
    Neg(NodeId),
    Softmax(NodeId),
    SoftmaxRows(NodeId),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    MaxAxis(NodeId, usize),
    L2Norm(NodeId),
    StackRows(Vec<NodeId>),
    StackScalars(Vec<NodeId>),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    Embed(NodeId, Vec<usize>),
    Unfold(NodeId, usize),
    Squash(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Operation tape with reverse-mode differentiation.
///
/// Nodes are appended in topological order by construction; inputs always
/// precede their consumers, so the backward pass is a single reverse sweep
/// that touches each node exactly once. A graph is single-writer while it
/// is being built; `backward` takes `&self` and may be called repeatedly.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given node, if the node required one
    /// and was reachable from the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// A leaf that participates in differentiation (parameters, probe inputs).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf excluded from differentiation (frozen embeddings, targets).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(op, value, requires)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    // ── binary ops ──────────────────────────────────────────────────

    /// Matrix product. Accepts `[m,k]x[k,n]`, `[k]x[k,n]` and `[m,k]x[k]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (am, ak) = as_matrix_dims(self.shape(a));
        let (bk, bn) = as_matrix_dims(self.shape(b));
        // A vector on the left is a row; on the right a column.
        let (am, ak) = if self.shape(a).len() == 1 { (1, am * ak) } else { (am, ak) };
        let (bk, bn) = if self.shape(b).len() == 1 { (bk * bn, 1) } else { (bk, bn) };
        if ak != bk {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = matmul_raw(self.data(a), self.data(b), am, ak, bn);
        let out_shape = match (self.shape(a).len(), self.shape(b).len()) {
            (1, 2) => vec![bn],
            (2, 1) => vec![am],
            _ => vec![am, bn],
        };
        let value = Tensor::raw(out_shape, data);
        Ok(self.push_op(Op::MatMul(a, b), value, &[a, b]))
    }

    /// Inner product of two equally sized tensors (flattened), yielding a scalar.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.data(a).len() != self.data(b).len() {
            return Err(Error::Dimension {
                op: "dot",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push_op(Op::Dot(a, b), Tensor::scalar(s), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same_shape("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn zip_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::raw(self.shape(a).to_vec(), data);
        Ok(self.push_op(op, value, &[a, b]))
    }

    /// Add a length-`n` bias vector to every row of an `[m,n]` matrix.
    pub fn add_row_bias(&mut self, m: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = match self.shape(m) {
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::Dimension {
                    op: "add_row_bias",
                    lhs: self.shape(m).to_vec(),
                    rhs: self.shape(bias).to_vec(),
                })
            }
        };
        if self.shape(bias) != [cols] {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: self.shape(m).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias).to_vec();
        let data: Vec<f64> = self
            .data(m)
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % cols])
            .collect();
        let value = Tensor::raw(vec![rows, cols], data);
        Ok(self.push_op(Op::AddRowBias(m, bias), value, &[m, bias]))
    }

    /// Multiply a tensor by a scalar node (the only scalar-tensor broadcast).
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.data(s).len() != 1 {
            return Err(Error::Dimension {
                op: "scale_by",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(a).iter().map(|x| x * sv).collect();
        let value = Tensor::raw(self.shape(a).to_vec(), data);
        Ok(self.push_op(Op::ScaleByScalar(a, s), value, &[a, s]))
    }

    // ── unary ops ───────────────────────────────────────────────────

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map_unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map_unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map_unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map_unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map_unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.map_unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.map_unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map_unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log with the argument clamped to [`LOG_CLAMP`] from below.
    pub fn ln_clamped(&mut self, a: NodeId) -> NodeId {
        self.map_unary(a, |x| x.max(LOG_CLAMP).ln(), Op::LnClamped(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.map_unary(a, |x| -x, Op::Neg(a))
    }

    fn map_unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|x| f(*x)).collect();
        let value = Tensor::raw(self.shape(a).to_vec(), data);
        self.push_op(op, value, &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = match self.shape(a) {
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::Dimension {
                    op: "transpose",
                    lhs: self.shape(a).to_vec(),
                    rhs: vec![],
                })
            }
        };
        let src = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::raw(vec![c, r], data);
        Ok(self.push_op(Op::Transpose(a), value, &[a]))
    }

    // ── softmax ─────────────────────────────────────────────────────

    /// Stable softmax of a vector (max-subtraction).
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        if self.shape(a).len() > 1 || self.data(a).is_empty() {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        let data = softmax_raw(self.data(a));
        let value = Tensor::raw(self.shape(a).to_vec(), data);
        Ok(self.push_op(Op::Softmax(a), value, &[a]))
    }

    /// Row-wise stable softmax of a matrix.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = match self.shape(a) {
            [r, c] if *c > 0 => (*r, *c),
            _ => {
                return Err(Error::Dimension {
                    op: "softmax_rows",
                    lhs: self.shape(a).to_vec(),
                    rhs: vec![],
                })
            }
        };
        let src = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            data[i * c..(i + 1) * c].copy_from_slice(&softmax_raw(&src[i * c..(i + 1) * c]));
        }
        let value = Tensor::raw(vec![r, c], data);
        Ok(self.push_op(Op::SoftmaxRows(a), value, &[a]))
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Sum of all entries (`axis: None`) or along an axis of a matrix.
    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let value = reduce_forward("sum", self.value(a), axis, ReduceKind::Sum)?;
        Ok(self.push_op(Op::Sum(a, axis), value, &[a]))
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let value = reduce_forward("mean", self.value(a), axis, ReduceKind::Mean)?;
        Ok(self.push_op(Op::Mean(a, axis), value, &[a]))
    }

    /// Maximum along an axis of a matrix; gradient flows to the first
    /// maximizing entry on ties.
    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let value = reduce_forward("max", self.value(a), Some(axis), ReduceKind::Max)?;
        Ok(self.push_op(Op::MaxAxis(a, axis), value, &[a]))
    }

    /// Euclidean norm over all entries, yielding a scalar.
    pub fn l2norm(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).norm();
        self.push_op(Op::L2Norm(a), Tensor::scalar(n), &[a])
    }

    // ── structure ops ───────────────────────────────────────────────

    /// Stack equally sized vectors (or single-row matrices) into a matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Dimension {
                op: "stack_rows",
                lhs: vec![0],
                rhs: vec![],
            });
        }
        let width = self.data(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if self.data(r).len() != width || self.value(r).rows() != 1 {
                return Err(Error::Dimension {
                    op: "stack_rows",
                    lhs: vec![width],
                    rhs: self.shape(r).to_vec(),
                });
            }
            data.extend_from_slice(self.data(r));
        }
        let value = Tensor::raw(vec![rows.len(), width], data);
        Ok(self.push_op(Op::StackRows(rows.to_vec()), value, &rows.to_vec()))
    }

    /// Pack scalar nodes into a vector.
    pub fn stack_scalars(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::with_capacity(items.len());
        for &s in items {
            if self.data(s).len() != 1 {
                return Err(Error::Dimension {
                    op: "stack_scalars",
                    lhs: vec![1],
                    rhs: self.shape(s).to_vec(),
                });
            }
            data.push(self.data(s)[0]);
        }
        let value = Tensor::raw(vec![data.len()], data);
        Ok(self.push_op(Op::StackScalars(items.to_vec()), value, &items.to_vec()))
    }

    /// Concatenate two matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = (self.value(a).rows(), self.value(a).cols());
        let (br, bc) = (self.value(b).rows(), self.value(b).cols());
        if ar != br {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut data = Vec::with_capacity(ar * (ac + bc));
        for i in 0..ar {
            data.extend_from_slice(&self.data(a)[i * ac..(i + 1) * ac]);
            data.extend_from_slice(&self.data(b)[i * bc..(i + 1) * bc]);
        }
        let shape = if self.shape(a).len() == 1 && self.shape(b).len() == 1 {
            vec![ac + bc]
        } else {
            vec![ar, ac + bc]
        };
        let value = Tensor::raw(shape, data);
        Ok(self.push_op(Op::ConcatCols(a, b), value, &[a, b]))
    }

    /// Rows `from..to` of a matrix, or elements `from..to` of a vector.
    pub fn slice_rows(&mut self, a: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let (rows, cols, vector) = match shape.as_slice() {
            [n] => (*n, 1, true),
            [r, c] => (*r, *c, false),
            _ => (0, 0, false),
        };
        if from >= to || to > rows {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: shape,
                rhs: vec![from, to],
            });
        }
        let data = self.data(a)[from * cols..to * cols].to_vec();
        let out_shape = if vector {
            vec![to - from]
        } else {
            vec![to - from, cols]
        };
        let value = Tensor::raw(out_shape, data);
        Ok(self.push_op(Op::SliceRows(a, from, to), value, &[a]))
    }

    /// Columns `from..to` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let (rows, cols) = match self.shape(a) {
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::Dimension {
                    op: "slice_cols",
                    lhs: self.shape(a).to_vec(),
                    rhs: vec![from, to],
                })
            }
        };
        if from >= to || to > cols {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: self.shape(a).to_vec(),
                rhs: vec![from, to],
            });
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(rows * (to - from));
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + from..i * cols + to]);
        }
        let value = Tensor::raw(vec![rows, to - from], data);
        Ok(self.push_op(Op::SliceCols(a, from, to), value, &[a]))
    }

    /// Gather rows of an embedding table `[V,D]` by token index.
    pub fn embed(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (v, d) = match self.shape(table) {
            [v, d] => (*v, *d),
            _ => {
                return Err(Error::Dimension {
                    op: "embed",
                    lhs: self.shape(table).to_vec(),
                    rhs: vec![indices.len()],
                })
            }
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::data(format!(
                "embedding index {bad} out of range for table with {v} rows"
            )));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::raw(vec![indices.len(), d], data);
        Ok(self.push_op(Op::Embed(table, indices.to_vec()), value, &[table]))
    }

    /// Sliding windows of `width` rows with zero padding, flattened per
    /// position: `[L,D] -> [L, width*D]`. Window `t` starts at row
    /// `t - (width-1)/2`.
    pub fn unfold(&mut self, a: NodeId, width: usize) -> Result<NodeId> {
        let (rows, cols) = match self.shape(a) {
            [r, c] if width >= 1 => (*r, *c),
            _ => {
                return Err(Error::Dimension {
                    op: "unfold",
                    lhs: self.shape(a).to_vec(),
                    rhs: vec![width],
                })
            }
        };
        let left = (width - 1) / 2;
        let src = self.data(a);
        let mut data = vec![0.0; rows * width * cols];
        for t in 0..rows {
            for w in 0..width {
                let s = t as isize - left as isize + w as isize;
                if s >= 0 && (s as usize) < rows {
                    let s = s as usize;
                    data[(t * width + w) * cols..(t * width + w + 1) * cols]
                        .copy_from_slice(&src[s * cols..(s + 1) * cols]);
                }
            }
        }
        let value = Tensor::raw(vec![rows, width * cols], data);
        Ok(self.push_op(Op::Unfold(a, width), value, &[a]))
    }

    /// Norm-bounding capsule nonlinearity: keeps direction, maps the norm
    /// `n` to `n^2/(1+n^2)`. The zero tensor maps to itself.
    pub fn squash(&mut self, a: NodeId) -> NodeId {
        let n2: f64 = self.data(a).iter().map(|x| x * x).sum();
        let factor = if n2 < NORM_GUARD * NORM_GUARD {
            0.0
        } else {
            n2.sqrt() / (1.0 + n2)
        };
        let data: Vec<f64> = self.data(a).iter().map(|x| x * factor).collect();
        let value = Tensor::raw(self.shape(a).to_vec(), data);
        self.push_op(Op::Squash(a), value, &[a])
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`, producing gradients for every
    /// node that requires them. Deterministic: repeated calls on the same
    /// graph yield bit-identical results.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.data(loss).len() != 1 {
            return Err(Error::Dimension {
                op: "backward(loss)",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor::raw(self.nodes[i].value.shape().to_vec(), data))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (am, ak) = effective_dims(self.value(*a), true);
                let (_, bn) = effective_dims(self.value(*b), false);
                if self.requires(*a) {
                    // dA = G · B^T
                    let bt = transpose_raw(self.data(*b), ak, bn);
                    let da = matmul_raw(g, &bt, am, bn, ak);
                    self.acc(grads, *a, &da);
                }
                if self.requires(*b) {
                    // dB = A^T · G
                    let at = transpose_raw(self.data(*a), am, ak);
                    let db = matmul_raw(&at, g, ak, am, bn);
                    self.acc(grads, *b, &db);
                }
            }
            Op::Dot(a, b) => {
                let gv = g[0];
                if self.requires(*a) {
                    let da: Vec<f64> = self.data(*b).iter().map(|x| gv * x).collect();
                    self.acc(grads, *a, &da);
                }
                if self.requires(*b) {
                    let db: Vec<f64> = self.data(*a).iter().map(|x| gv * x).collect();
                    self.acc(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let [r, c] = self.shape(*a) else { unreachable!() };
                let da = transpose_raw(g, *c, *r);
                self.acc(grads, *a, &da);
            }
            Op::Add(a, b) => {
                if self.requires(*a) {
                    self.acc(grads, *a, g);
                }
                if self.requires(*b) {
                    self.acc(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.requires(*a) {
                    self.acc(grads, *a, g);
                }
                if self.requires(*b) {
                    let db: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.acc(grads, *b, &db);
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let da: Vec<f64> = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    self.acc(grads, *a, &da);
                }
                if self.requires(*b) {
                    let db: Vec<f64> = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    self.acc(grads, *b, &db);
                }
            }
            Op::Div(a, b) => {
                if self.requires(*a) {
                    let da: Vec<f64> = g.iter().zip(self.data(*b)).map(|(g, y)| g / y).collect();
                    self.acc(grads, *a, &da);
                }
                if self.requires(*b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.data(*a).iter().zip(self.data(*b)))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.acc(grads, *b, &db);
                }
            }
            Op::AddRowBias(m, bias) => {
                if self.requires(*m) {
                    self.acc(grads, *m, g);
                }
                if self.requires(*bias) {
                    let cols = self.data(*bias).len();
                    let mut db = vec![0.0; cols];
                    for (i, x) in g.iter().enumerate() {
                        db[i % cols] += x;
                    }
                    self.acc(grads, *bias, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.acc(grads, *a, &da);
            }
            Op::AddConst(a) => {
                self.acc(grads, *a, g);
            }
            Op::ScaleByScalar(a, s) => {
                let sv = self.data(*s)[0];
                if self.requires(*a) {
                    let da: Vec<f64> = g.iter().map(|x| x * sv).collect();
                    self.acc(grads, *a, &da);
                }
                if self.requires(*s) {
                    let ds: f64 = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).sum();
                    self.acc(grads, *s, &[ds]);
                }
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Square(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, x)| 2.0 * g * x)
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Sqrt(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| if *y > NORM_GUARD { g / (2.0 * y) } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::LnClamped(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, x)| if *x > LOG_CLAMP { g / x } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Neg(a) => {
                let da: Vec<f64> = g.iter().map(|x| -x).collect();
                self.acc(grads, *a, &da);
            }
            Op::Softmax(a) => {
                let da = softmax_backward(node.value.data(), g);
                self.acc(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let [r, c] = self.shape(*a) else { unreachable!() };
                let y = node.value.data();
                let mut da = vec![0.0; r * c];
                for i in 0..*r {
                    let row = softmax_backward(&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    da[i * c..(i + 1) * c].copy_from_slice(&row);
                }
                self.acc(grads, *a, &da);
            }
            Op::Sum(a, axis) => {
                let da = spread_reduce_grad(self.value(*a), *axis, g, |_| 1.0);
                self.acc(grads, *a, &da);
            }
            Op::Mean(a, axis) => {
                let da = spread_reduce_grad(self.value(*a), *axis, g, |n| 1.0 / n as f64);
                self.acc(grads, *a, &da);
            }
            Op::MaxAxis(a, axis) => {
                let input = self.value(*a);
                let [r, c] = input.shape() else { unreachable!() };
                let src = input.data();
                let mut da = vec![0.0; r * c];
                if *axis == 0 {
                    for j in 0..*c {
                        let mut best = 0;
                        for i in 1..*r {
                            if src[i * c + j] > src[best * c + j] {
                                best = i;
                            }
                        }
                        da[best * c + j] = g[j];
                    }
                } else {
                    for (i, gi) in g.iter().enumerate() {
                        let row = &src[i * c..(i + 1) * c];
                        let mut best = 0;
                        for (j, x) in row.iter().enumerate().skip(1) {
                            if *x > row[best] {
                                best = j;
                            }
                        }
                        da[i * c + best] = *gi;
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::L2Norm(a) => {
                let n = node.value.item();
                let gv = g[0];
                let da: Vec<f64> = if n > NORM_GUARD {
                    self.data(*a).iter().map(|x| gv * x / n).collect()
                } else {
                    vec![0.0; self.data(*a).len()]
                };
                self.acc(grads, *a, &da);
            }
            Op::StackRows(rows) => {
                let width = self.data(rows[0]).len();
                for (i, r) in rows.iter().enumerate() {
                    if self.requires(*r) {
                        self.acc(grads, *r, &g[i * width..(i + 1) * width]);
                    }
                }
            }
            Op::StackScalars(items) => {
                for (i, s) in items.iter().enumerate() {
                    if self.requires(*s) {
                        self.acc(grads, *s, &g[i..i + 1]);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (rows, ac) = (self.value(*a).rows(), self.value(*a).cols());
                let bc = self.value(*b).cols();
                if self.requires(*a) {
                    let mut da = Vec::with_capacity(rows * ac);
                    for i in 0..rows {
                        da.extend_from_slice(&g[i * (ac + bc)..i * (ac + bc) + ac]);
                    }
                    self.acc(grads, *a, &da);
                }
                if self.requires(*b) {
                    let mut db = Vec::with_capacity(rows * bc);
                    for i in 0..rows {
                        db.extend_from_slice(&g[i * (ac + bc) + ac..(i + 1) * (ac + bc)]);
                    }
                    self.acc(grads, *b, &db);
                }
            }
            Op::SliceRows(a, from, _to) => {
                // Element stride: 1 for vectors, the row width for matrices.
                let cols = match self.shape(*a) {
                    [_, c] => *c,
                    _ => 1,
                };
                let mut da = vec![0.0; self.data(*a).len()];
                da[from * cols..from * cols + g.len()].copy_from_slice(g);
                self.acc(grads, *a, &da);
            }
            Op::SliceCols(a, from, to) => {
                let [rows, cols] = self.shape(*a) else { unreachable!() };
                let w = to - from;
                let mut da = vec![0.0; rows * cols];
                for i in 0..*rows {
                    da[i * cols + from..i * cols + to].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.acc(grads, *a, &da);
            }
            Op::Embed(table, indices) => {
                let [_, d] = self.shape(*table) else { unreachable!() };
                let mut dt = vec![0.0; self.data(*table).len()];
                for (i, &row) in indices.iter().enumerate() {
                    for j in 0..*d {
                        dt[row * d + j] += g[i * d + j];
                    }
                }
                self.acc(grads, *table, &dt);
            }
            Op::Unfold(a, width) => {
                let [rows, cols] = self.shape(*a) else { unreachable!() };
                let left = (width - 1) / 2;
                let mut da = vec![0.0; rows * cols];
                for t in 0..*rows {
                    for w in 0..*width {
                        let s = t as isize - left as isize + w as isize;
                        if s >= 0 && (s as usize) < *rows {
                            let s = s as usize;
                            for j in 0..*cols {
                                da[s * cols + j] += g[(t * width + w) * cols + j];
                            }
                        }
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::Squash(a) => {
                let s = self.data(*a);
                let n2: f64 = s.iter().map(|x| x * x).sum();
                let da: Vec<f64> = if n2 < NORM_GUARD * NORM_GUARD {
                    vec![0.0; s.len()]
                } else {
                    let n = n2.sqrt();
                    let factor = n / (1.0 + n2);
                    // d factor / d n2
                    let dfactor = (1.0 - n2) / (2.0 * n * (1.0 + n2) * (1.0 + n2));
                    let gs: f64 = g.iter().zip(s).map(|(g, x)| g * x).sum();
                    s.iter()
                        .zip(g)
                        .map(|(x, g)| g * factor + 2.0 * x * gs * dfactor)
                        .collect()
                };
                self.acc(grads, *a, &da);
            }
        }
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: &[f64]) {
        if !self.requires(id) {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.data(id).len()]);
        debug_assert_eq!(slot.len(), contribution.len());
        for (s, c) in slot.iter_mut().zip(contribution) {
            *s += c;
        }
    }
}

fn as_matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (0, 0),
    }
}

fn effective_dims(t: &Tensor, lhs: bool) -> (usize, usize) {
    match t.shape() {
        [n] if lhs => (1, *n),
        [n] => (*n, 1),
        [r, c] => (*r, *c),
        _ => (1, 1),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn softmax_raw(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softmax_backward(y: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
    y.iter().zip(g).map(|(y, g)| y * (g - dot)).collect()
}

enum ReduceKind {
    Sum,
    Mean,
    Max,
}

fn reduce_forward(
    name: &'static str,
    input: &Tensor,
    axis: Option<usize>,
    kind: ReduceKind,
) -> Result<Tensor> {
    match axis {
        None => {
            let v = match kind {
                ReduceKind::Sum => input.data().iter().sum(),
                ReduceKind::Mean => input.data().iter().sum::<f64>() / input.len() as f64,
                ReduceKind::Max => {
                    return Err(Error::Dimension {
                        op: name,
                        lhs: input.shape().to_vec(),
                        rhs: vec![],
                    })
                }
            };
            Ok(Tensor::scalar(v))
        }
        Some(axis) => {
            let (r, c) = match input.shape() {
                [r, c] => (*r, *c),
                [n] if axis == 0 => (*n, 1),
                _ => {
                    return Err(Error::Dimension {
                        op: name,
                        lhs: input.shape().to_vec(),
                        rhs: vec![axis],
                    })
                }
            };
            if axis >= 2 || (input.rank() == 1 && axis > 0) {
                return Err(Error::Dimension {
                    op: name,
                    lhs: input.shape().to_vec(),
                    rhs: vec![axis],
                });
            }
            let src = input.data();
            let (out_len, group) = if axis == 0 { (c, r) } else { (r, c) };
            let mut out = vec![
                match kind {
                    ReduceKind::Max => f64::NEG_INFINITY,
                    _ => 0.0,
                };
                out_len
            ];
            for i in 0..r {
                for j in 0..c {
                    let o = if axis == 0 { j } else { i };
                    let x = src[i * c + j];
                    match kind {
                        ReduceKind::Sum | ReduceKind::Mean => out[o] += x,
                        ReduceKind::Max => {
                            if x > out[o] {
                                out[o] = x
                            }
                        }
                    }
                }
            }
            if matches!(kind, ReduceKind::Mean) {
                for o in out.iter_mut() {
                    *o /= group as f64;
                }
            }
            if input.rank() == 1 {
                Ok(Tensor::scalar(out[0]))
            } else {
                Ok(Tensor::raw(vec![out.len()], out))
            }
        }
    }
}

/// Distribute a reduction gradient back over the input entries, scaled by
/// `weight(group_size)`.
fn spread_reduce_grad(
    input: &Tensor,
    axis: Option<usize>,
    g: &[f64],
    weight: fn(usize) -> f64,
) -> Vec<f64> {
    match axis {
        None => {
            let w = weight(input.len());
            vec![g[0] * w; input.len()]
        }
        Some(axis) => {
            let (r, c) = match input.shape() {
                [r, c] => (*r, *c),
                [n] => (*n, 1),
                _ => unreachable!(),
            };
            let group = if axis == 0 { r } else { c };
            let w = weight(group);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    let o = if axis == 0 { j } else { i };
                    out[i * c + j] = g[o] * w;
                }
            }
            out
        }
    }
}
