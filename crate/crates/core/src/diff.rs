//! Dense `f64` arrays and a reverse-mode tape.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and accumulates adjoints for
//! every node that (transitively) depends on a [`Tape::var`] leaf. Parameters
//! that must stay frozen are entered with [`Tape::constant`], which is how the
//! sampler gets gradients with respect to latent activations without touching
//! the weights.
//!
//! Broadcasting is limited to "scalar against array" and "equal shapes". The
//! row-wise ops (`linear`, `log_softmax`, `log_sum_exp`, `pick`) view an array
//! as `rows x last_dim`, so a rank-1 array behaves as a single row.

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(Error::BadShape {
                shape,
                len: data.len(),
                expected,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            shape: vec![n, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Size of the last axis (1 for a rank-0 array).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `rows x last_dim`.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.last_dim();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.last_dim();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Reinterprets a rank-1 array as a single-row matrix; other ranks are
    /// returned unchanged.
    pub fn as_batch(&self) -> Array {
        if self.shape.len() == 1 {
            Array {
                shape: vec![1, self.shape[0]],
                data: self.data.clone(),
            }
        } else {
            self.clone()
        }
    }

    /// Gathers the given rows into a new `[indices.len() x last_dim]` matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Array {
        let cols = self.last_dim();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Array {
            shape: vec![indices.len(), cols],
            data,
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Array> {
        Array::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `c = op(a) * op(b) + beta * c` for row-major buffers, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`. A transposed operand is stored as the
/// row-major transpose (`k x m` / `n x k`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the assert above bounds every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Elementwise operations selectable at runtime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Exp,
    Log,
    Negate,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    LogSoftmax(NodeId),
    LogSumExp { x: NodeId, start: usize, end: usize },
    Pick { x: NodeId, index: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LogSoftmax(a) => vec![*a],
            Op::LogSumExp { x, .. } | Op::Pick { x, .. } => vec![*x],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array,
    requires_grad: bool,
}

/// Operation record for one forward pass. Node ids are indices into the
/// record, so the tape is topologically ordered by construction.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn row_lse(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn var(&mut self, value: Array) -> NodeId {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant by [`Tape::backward`].
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Array, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id].value.data[0]
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    fn push(&mut self, op: Op, value: Array, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn elementwise(&mut self, op: Elementwise, args: &[NodeId]) -> Result<NodeId> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::IndexOutOfRange {
                index: args.len(),
                limit: arity,
            });
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Relu => self.relu(args[0]),
            Elementwise::Exp => self.exp(args[0]),
            Elementwise::Log => self.log(args[0]),
            Elementwise::Negate => self.neg(args[0]),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &av.data, false, &bv.data, false, &mut out, 0.0);
        self.push(Op::MatMul(a, b), Array::new(vec![m, n], out)?, "matmul")
    }

    /// Dense layer `x * w + b` with the bias added to every row.
    /// `x` is `[batch x in]` (or `[in]`), `w` is `[in x out]`, `b` is `[out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (
            &self.node(x)?.value,
            &self.node(w)?.value,
            &self.node(b)?.value,
        );
        let ok = wv.shape.len() == 2
            && !xv.shape.is_empty()
            && xv.shape.len() <= 2
            && xv.last_dim() == wv.shape[0]
            && bv.shape == [wv.shape[1]];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xv.shape.clone(),
                rhs: wv.shape.clone(),
            });
        }
        let (m, k, n) = (xv.rows(), wv.shape[0], wv.shape[1]);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&bv.data);
        }
        gemm(m, k, n, &xv.data, false, &wv.data, false, &mut out, 1.0);
        let shape = if xv.shape.len() == 1 {
            vec![n]
        } else {
            vec![m, n]
        };
        self.push(Op::Linear { x, w, b }, Array::new(shape, out)?, "linear")
    }

    fn broadcast(
        &self,
        a: NodeId,
        b: NodeId,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape == bv.shape {
            let data = av
                .data
                .iter()
                .zip(&bv.data)
                .map(|(&x, &y)| f(x, y))
                .collect();
            Array::new(av.shape.clone(), data)
        } else if bv.is_scalar() {
            let s = bv.data[0];
            Ok(av.map(|x| f(x, s)))
        } else if av.is_scalar() {
            let s = av.data[0];
            Ok(bv.map(|y| f(s, y)))
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            })
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.node(a)?.value.map(|x| -x);
        self.push(Op::Neg(a), v, "neg")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.node(a)?.value.map(|x| c * x);
        self.push(Op::Scale(a, c), v, "scale")
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.node(a)?.value.map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v, "relu")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.node(a)?.value.map(f64::exp);
        self.push(Op::Exp(a), v, "exp")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.node(a)?.value;
        if let Some(&bad) = av.data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::LogDomain(bad));
        }
        let v = av.map(f64::ln);
        self.push(Op::Log(a), v, "log")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Array::scalar(self.node(a)?.value.sum());
        self.push(Op::Sum(a), v, "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.node(a)?.value;
        if av.is_empty() {
            return Err(Error::Empty("mean of empty array"));
        }
        let v = Array::scalar(av.sum() / av.len() as f64);
        self.push(Op::Mean(a), v, "mean")
    }

    /// Row-wise `x - logsumexp(x)`, stabilised by max subtraction.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.node(a)?.value;
        if !av.all_finite() {
            return Err(Error::NonFinite("log_softmax input"));
        }
        let mut out = av.clone();
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            let lse = row_lse(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(Op::LogSoftmax(a), out, "log_softmax")
    }

    /// Row-wise `log sum_{start <= j < end} exp(x[j])`, giving one value per row.
    pub fn log_sum_exp(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let av = &self.node(a)?.value;
        let cols = av.last_dim();
        if start >= end || end > cols {
            return Err(Error::IndexOutOfRange {
                index: end,
                limit: cols,
            });
        }
        let data = (0..av.rows())
            .map(|r| row_lse(&av.row(r)[start..end]))
            .collect();
        let v = Array::vector(data);
        self.push(Op::LogSumExp { x: a, start, end }, v, "log_sum_exp")
    }

    /// Picks `x[r, index[r]]` from every row.
    pub fn pick(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId> {
        let av = &self.node(a)?.value;
        let cols = av.last_dim();
        if index.len() != av.rows() {
            return Err(Error::ShapeMismatch {
                op: "pick",
                lhs: av.shape.clone(),
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                limit: cols,
            });
        }
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &i)| av.row(r)[i])
            .collect();
        let v = Array::vector(data);
        self.push(
            Op::Pick {
                x: a,
                index: index.to_vec(),
            },
            v,
            "pick",
        )
    }

    /// Reverse pass from a scalar root. Only nodes that depend on a
    /// [`Tape::var`] leaf receive gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_node = self.node(root)?;
        if !root_node.value.is_scalar() {
            return Err(Error::RootNotScalar(root_node.value.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad).map(|data| Array {
                    shape: n.value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |id: NodeId| self.nodes[id].requires_grad;
        let val = |id: NodeId| &self.nodes[id].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                if wants(*a) {
                    let acc = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, &bv.data, true, acc, 1.0);
                }
                if wants(*b) {
                    let acc = slot(grads, *b, k * n);
                    gemm(k, m, n, &av.data, true, g, false, acc, 1.0);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (m, k, n) = (xv.rows(), wv.shape[0], wv.shape[1]);
                if wants(*x) {
                    let acc = slot(grads, *x, m * k);
                    gemm(m, n, k, g, false, &wv.data, true, acc, 1.0);
                }
                if wants(*w) {
                    let acc = slot(grads, *w, k * n);
                    gemm(k, m, n, &xv.data, true, g, false, acc, 1.0);
                }
                if wants(*b) {
                    let acc = slot(grads, *b, n);
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Add(a, b) => {
                for (src, _) in [(*a, *b), (*b, *a)] {
                    if wants(src) {
                        accumulate_broadcast(grads, src, val(src), g, |_| 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (src, other) in [(*a, *b), (*b, *a)] {
                    if wants(src) {
                        let ov = val(other);
                        accumulate_broadcast(grads, src, val(src), g, |i| {
                            if ov.is_scalar() {
                                ov.data[0]
                            } else {
                                ov.data[i]
                            }
                        });
                    }
                }
            }
            Op::Neg(a) => elementwise_back(grads, *a, g, |_, gi| -gi),
            Op::Scale(a, c) => elementwise_back(grads, *a, g, |_, gi| c * gi),
            Op::Relu(a) => {
                let av = val(*a);
                elementwise_back(
                    grads,
                    *a,
                    g,
                    |i, gi| if av.data[i] > 0.0 { gi } else { 0.0 },
                )
            }
            Op::Exp(a) => elementwise_back(grads, *a, g, |i, gi| gi * node.value.data[i]),
            Op::Log(a) => {
                let av = val(*a);
                elementwise_back(grads, *a, g, |i, gi| gi / av.data[i])
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = val(*a).len();
                let scale = if matches!(node.op, Op::Mean(_)) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                slot(grads, *a, n).iter_mut().for_each(|v| *v += scale);
            }
            Op::LogSoftmax(a) => {
                let cols = node.value.last_dim();
                let acc = slot(grads, *a, node.value.len());
                for ((out, gr), acc) in node
                    .value
                    .data
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(acc.chunks_mut(cols))
                {
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        acc[j] += gr[j] - out[j].exp() * total;
                    }
                }
            }
            Op::LogSumExp { x, start, end } => {
                let xv = val(*x);
                let cols = xv.last_dim();
                let acc = slot(grads, *x, xv.len());
                for (r, gr) in g.iter().enumerate() {
                    let lse = node.value.data[r];
                    let row = xv.row(r);
                    for j in *start..*end {
                        acc[r * cols + j] += gr * (row[j] - lse).exp();
                    }
                }
            }
            Op::Pick { x, index } => {
                let cols = val(*x).last_dim();
                let acc = slot(grads, *x, val(*x).len());
                for (r, &i) in index.iter().enumerate() {
                    acc[r * cols + i] += g[r];
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn elementwise_back(
    grads: &mut [Option<Vec<f64>>],
    id: NodeId,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    let acc = slot(grads, id, g.len());
    for (i, (a, &gi)) in acc.iter_mut().zip(g).enumerate() {
        *a += f(i, gi);
    }
}

/// Accumulates `g * local(i)` into `id`, summing over the broadcast when the
/// source was a scalar against a larger output.
fn accumulate_broadcast(
    grads: &mut [Option<Vec<f64>>],
    id: NodeId,
    src: &Array,
    g: &[f64],
    local: impl Fn(usize) -> f64,
) {
    if src.len() == g.len() {
        elementwise_back(grads, id, g, |i, gi| gi * local(i));
    } else {
        let total: f64 = g.iter().enumerate().map(|(i, gi)| gi * local(i)).sum();
        slot(grads, id, 1)[0] += total;
    }
}

/// Result of [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`, if `id` depends on a var.
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`], but returns zeros shaped like the node when
    /// the root does not depend on it.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Array {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Array::zeros(tape.value(id).shape()))
    }
}

/// Central differences of a scalar function at `x`.
pub fn central_differences<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-12)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, c)| (a - c).abs() / (c.abs() + 1e-12))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` at `x` against central differences with
/// step `h` and returns the maximum relative error. `f` builds a scalar graph
/// from the leaf it is handed.
pub fn finite_diff_check<F>(f: F, x: &Array, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let leaf = tape.var(x.clone());
    let root = f(&mut tape, leaf)?;
    let analytic = tape.backward(root)?.wrt(&tape, leaf);

    let numeric = central_differences(
        |probe| {
            let mut tape = Tape::new();
            let leaf = tape.constant(Array::new(x.shape().to_vec(), probe.to_vec())?);
            let root = f(&mut tape, leaf)?;
            Ok(tape.scalar_value(root))
        },
        x.data(),
        h,
    )?;
    Ok(max_relative_error(analytic.data(), &numeric))
}

/// `max_i |analytic_i - numeric_i| / max(|numeric_i|, floor)` and the index
/// where it occurs. NaN counts as the worst possible error.
pub fn floored_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = (a - n).abs() / n.abs().max(floor);
        if e.is_nan() {
            return (f64::NAN, i);
        }
        if e > worst.0 {
            worst = (e, i);
        }
    }
    worst
}

/// Fourth-order finite-difference gradient of a piecewise-smooth function.
///
/// `f` returns its value and an identifier of the smooth piece the point lies
/// on (for ReLU networks, the activation pattern). A central stencil with
/// points on another piece straddles a kink; one-sided stencils on either
/// side are tried next, then the step shrinks tenfold (down to `1e-7`, where
/// the central quotient is returned regardless).
pub fn piecewise_gradient<P, F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    P: PartialEq,
    F: FnMut(&[f64]) -> Result<(f64, P)>,
{
    const CENTRAL: [(f64, f64); 4] = [
        (-2.0, 1.0 / 12.0),
        (-1.0, -8.0 / 12.0),
        (1.0, 8.0 / 12.0),
        (2.0, -1.0 / 12.0),
    ];
    const ONE_SIDED: [(f64, f64); 5] = [
        (0.0, -25.0 / 12.0),
        (1.0, 4.0),
        (2.0, -3.0),
        (3.0, 4.0 / 3.0),
        (4.0, -0.25),
    ];

    let (_, base) = f(x)?;
    let mut probe = x.to_vec();
    let mut stencil = |i: usize, points: &[(f64, f64)], step: f64| -> Result<(f64, bool)> {
        let mut acc = 0.0;
        let mut same_piece = true;
        for &(offset, weight) in points {
            probe[i] = x[i] + offset * step;
            let (value, piece) = f(&probe)?;
            acc += weight * value;
            same_piece &= piece == base;
        }
        probe[i] = x[i];
        Ok((acc / step, same_piece))
    };
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut step = h;
        let value = 'search: loop {
            let (central, smooth) = stencil(i, &CENTRAL, step)?;
            if smooth {
                break central;
            }
            for side in [step, -step] {
                if let (v, true) = stencil(i, &ONE_SIDED, side)? {
                    break 'search v;
                }
            }
            if step <= 1e-7 {
                break central;
            }
            step /= 10.0;
        };
        out.push(value);
    }
    Ok(out)
}
