//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is an append-only record of operations. Every operation
//! evaluates eagerly, stores its forward value, and returns a [`NodeId`]
//! handle. [`Graph::backward`] walks the record in reverse and accumulates
//! gradients for every node that depends on a parameter leaf.
//!
//! Broadcasting is limited to scalar ↔ tensor. Anything else is rejected
//! with [`AutodiffError::ShapeMismatch`].

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: input {value} at index {index}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major array. A scalar has an empty shape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::Contract(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
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

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Handle into a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinaryOp, NodeId, NodeId),
    Unary(UnaryOp, NodeId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Reshape(NodeId),
    Slice {
        input: NodeId,
        offset: usize,
    },
    GatherRows {
        table: NodeId,
        indices: Vec<usize>,
    },
    LogSoftmax {
        input: NodeId,
        temperature: f64,
    },
    Pick {
        input: NodeId,
        indices: Vec<usize>,
    },
    Clip {
        input: NodeId,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Min(NodeId, NodeId),
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], keyed by node.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
thread_local! {
    // Mutation hook for the gradient-check harness tests.
    pub(crate) static CORRUPT_TANH_GRAD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

fn tanh_derivative(y: f64) -> f64 {
    #[cfg(test)]
    if CORRUPT_TANH_GRAD.with(|c| c.get()) {
        return 1.0 - 0.5 * y * y;
    }
    1.0 - y * y
}

/// Numerically stable log-softmax of one row of logits.
pub fn log_softmax_row(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &x in &scaled {
        sum += (x - max).exp();
    }
    let log_norm = max + sum.ln();
    scaled.iter().map(|&x| x - log_norm).collect()
}

fn matmul_values(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &av) in row.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in dst.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Computation record. Single owner; not shared across threads.
#[derive(Debug, Default)]
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable leaf.
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

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Tanh, a)
    }

    /// Elementwise binary operation. Shapes must match unless one side is a scalar.
    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = if va.shape == vb.shape || vb.is_scalar() {
            va.shape.clone()
        } else if va.is_scalar() {
            vb.shape.clone()
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: "elementwise",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        };
        let n: usize = shape.iter().product();
        let at = |t: &Tensor, i: usize| if t.data.len() == 1 { t.data[0] } else { t.data[i] };
        if op == BinaryOp::Div {
            for i in 0..n {
                let d = at(vb, i);
                if d == 0.0 || !d.is_finite() {
                    return Err(AutodiffError::Domain {
                        op: "divide",
                        index: i,
                        value: d,
                    });
                }
            }
        }
        let data = (0..n)
            .map(|i| {
                let (x, y) = (at(va, i), at(vb, i));
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                }
            })
            .collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Binary(op, a, b), Tensor { shape, data }, rg))
    }

    pub fn unary(&mut self, op: UnaryOp, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if op == UnaryOp::Log {
            if let Some((index, &value)) = va.data.iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
                return Err(AutodiffError::Domain {
                    op: "log",
                    index,
                    value,
                });
            }
        }
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Neg => |x| -x,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Log => f64::ln,
            UnaryOp::Tanh => f64::tanh,
        };
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Unary(op, a), value, rg))
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let data = matmul_values(&va.data, &vb.data, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Op::MatMul(a, b),
            Tensor {
                shape: vec![m, n],
                data,
            },
            rg,
        ))
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if vx.shape.len() != 2 || vb.shape.len() != 1 || vb.shape[0] != vx.shape[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: vx.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let n = vx.shape[1];
        let data = vx
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data[i % n])
            .collect();
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Op::AddBias(x, bias), value, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != vx.data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: vx.shape.clone(),
                rhs: shape,
            });
        }
        let value = Tensor {
            shape,
            data: vx.data.clone(),
        };
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// Contiguous flat window `[offset, offset + prod(shape))`, reshaped.
    pub fn slice(&mut self, x: NodeId, offset: usize, shape: Vec<usize>) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        let n: usize = shape.iter().product();
        if offset + n > vx.data.len() {
            return Err(AutodiffError::Contract(format!(
                "slice [{offset}, {}) out of range for {} values",
                offset + n,
                vx.data.len()
            )));
        }
        let value = Tensor {
            shape,
            data: vx.data[offset..offset + n].to_vec(),
        };
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Slice { input: x, offset }, value, rg))
    }

    /// Row lookup: `table[V×d]`, indices of length `n` → `[n×d]`.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vt = &self.nodes[table.0].value;
        if vt.shape.len() != 2 {
            return Err(AutodiffError::Contract("gather_rows expects a matrix".into()));
        }
        let (rows, d) = (vt.shape[0], vt.shape[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= rows {
                return Err(AutodiffError::Contract(format!(
                    "row index {ix} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&vt.data[ix * d..(ix + 1) * d]);
        }
        let value = Tensor {
            shape: vec![indices.len(), d],
            data,
        };
        let rg = self.needs(&[table]);
        Ok(self.push(
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Row-wise log-softmax of `x / temperature` over the last axis.
    pub fn log_softmax(&mut self, x: NodeId, temperature: f64) -> Result<NodeId> {
        if !(temperature > 0.0) {
            return Err(AutodiffError::Contract(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let vx = &self.nodes[x.0].value;
        let width = *vx
            .shape
            .last()
            .ok_or_else(|| AutodiffError::Contract("log_softmax of a scalar".into()))?;
        if width == 0 {
            return Err(AutodiffError::Contract("log_softmax over empty axis".into()));
        }
        let mut data = Vec::with_capacity(vx.data.len());
        for row in vx.data.chunks(width) {
            data.extend(log_softmax_row(row, temperature));
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let rg = self.needs(&[x]);
        Ok(self.push(
            Op::LogSoftmax {
                input: x,
                temperature,
            },
            value,
            rg,
        ))
    }

    /// Selects `x[i, indices[i]]` from an `[n×V]` matrix.
    pub fn pick(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if vx.shape.len() != 2 || vx.shape[0] != indices.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "pick",
                lhs: vx.shape.clone(),
                rhs: vec![indices.len()],
            });
        }
        let width = vx.shape[1];
        let mut data = Vec::with_capacity(indices.len());
        for (row, &ix) in indices.iter().enumerate() {
            if ix >= width {
                return Err(AutodiffError::Contract(format!(
                    "column {ix} out of range for width {width}"
                )));
            }
            data.push(vx.data[row * width + ix]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Op::Pick {
                input: x,
                indices: indices.to_vec(),
            },
            Tensor::vector(data),
            rg,
        ))
    }

    /// Elementwise clamp to `[lo, hi]`. Bounds are constants; the gradient
    /// passes for `lo <= x <= hi` and is zero outside.
    pub fn clip(&mut self, x: NodeId, lo: &Tensor, hi: &Tensor) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        let n = vx.data.len();
        let expand = |t: &Tensor, name: &'static str| -> Result<Vec<f64>> {
            if t.data.len() == n {
                Ok(t.data.clone())
            } else if t.data.len() == 1 {
                Ok(vec![t.data[0]; n])
            } else {
                Err(AutodiffError::ShapeMismatch {
                    op: name,
                    lhs: vx.shape.clone(),
                    rhs: t.shape.clone(),
                })
            }
        };
        let lo = expand(lo, "clip(lo)")?;
        let hi = expand(hi, "clip(hi)")?;
        if let Some(i) = (0..n).find(|&i| !(lo[i] <= hi[i])) {
            return Err(AutodiffError::Contract(format!(
                "clip band inverted at {i}: lo {} > hi {}",
                lo[i], hi[i]
            )));
        }
        let data = (0..n).map(|i| vx.data[i].clamp(lo[i], hi[i])).collect();
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Clip { input: x, lo, hi }, value, rg))
    }

    /// Elementwise minimum. Gradient goes to the smaller operand, to `a` on ties.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "minimum",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| if y < x { y } else { x })
            .collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Min(a, b), value, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        let mut total = 0.0;
        for &v in &vx.data {
            total += v;
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Sum(x), Tensor::scalar(total), rg))
    }

    /// Reverse accumulation from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.data.len() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|data| Tensor {
                    shape: node.value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut accumulate = |id: NodeId, contrib: &mut dyn FnMut(&mut [f64])| {
            let target = &self.nodes[id.0];
            if !target.requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; target.value.data.len()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                for (side, id) in [(0, *a), (1, *b)] {
                    accumulate(id, &mut |g| {
                        for (i, &u) in up.iter().enumerate() {
                            let (x, y) = (at(va, i), at(vb, i));
                            let d = match (op, side) {
                                (BinaryOp::Add, _) => u,
                                (BinaryOp::Sub, 0) => u,
                                (BinaryOp::Sub, _) => -u,
                                (BinaryOp::Mul, 0) => u * y,
                                (BinaryOp::Mul, _) => u * x,
                                (BinaryOp::Div, 0) => u / y,
                                (BinaryOp::Div, _) => -u * x / (y * y),
                            };
                            if g.len() == 1 {
                                g[0] += d;
                            } else {
                                g[i] += d;
                            }
                        }
                    });
                }
            }
            Op::Unary(op, a) => {
                let x = &self.nodes[a.0].value.data;
                let y = &node.value.data;
                accumulate(*a, &mut |g| {
                    for i in 0..up.len() {
                        g[i] += match op {
                            UnaryOp::Neg => -up[i],
                            UnaryOp::Exp => up[i] * y[i],
                            UnaryOp::Log => up[i] / x[i],
                            UnaryOp::Tanh => up[i] * tanh_derivative(y[i]),
                        };
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                // dA = up · Bᵀ
                accumulate(*a, &mut |g| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += up[i * n + j] * vb.data[p * n + j];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                // dB = Aᵀ · up
                accumulate(*b, &mut |g| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = va.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let dst = &mut g[p * n..(p + 1) * n];
                            for (d, &u) in dst.iter_mut().zip(&up[i * n..(i + 1) * n]) {
                                *d += av * u;
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, bias) => {
                accumulate(*x, &mut |g| {
                    for (d, &u) in g.iter_mut().zip(up) {
                        *d += u;
                    }
                });
                let n = self.nodes[bias.0].value.data.len();
                accumulate(*bias, &mut |g| {
                    for (i, &u) in up.iter().enumerate() {
                        g[i % n] += u;
                    }
                });
            }
            Op::Reshape(x) => accumulate(*x, &mut |g| {
                for (d, &u) in g.iter_mut().zip(up) {
                    *d += u;
                }
            }),
            Op::Slice { input, offset } => accumulate(*input, &mut |g| {
                for (d, &u) in g[*offset..*offset + up.len()].iter_mut().zip(up) {
                    *d += u;
                }
            }),
            Op::GatherRows { table, indices } => {
                let d = self.nodes[table.0].value.shape[1];
                accumulate(*table, &mut |g| {
                    for (row, &ix) in indices.iter().enumerate() {
                        for c in 0..d {
                            g[ix * d + c] += up[row * d + c];
                        }
                    }
                });
            }
            Op::LogSoftmax { input, temperature } => {
                let width = *node.value.shape.last().unwrap_or(&1);
                let y = &node.value.data;
                accumulate(*input, &mut |g| {
                    for (r, urow) in up.chunks(width).enumerate() {
                        let base = r * width;
                        let total: f64 = urow.iter().sum();
                        for j in 0..width {
                            let p = y[base + j].exp();
                            g[base + j] += (urow[j] - p * total) / temperature;
                        }
                    }
                });
            }
            Op::Pick { input, indices } => {
                let width = self.nodes[input.0].value.shape[1];
                accumulate(*input, &mut |g| {
                    for (row, &ix) in indices.iter().enumerate() {
                        g[row * width + ix] += up[row];
                    }
                });
            }
            Op::Clip { input, lo, hi } => {
                let x = &self.nodes[input.0].value.data;
                accumulate(*input, &mut |g| {
                    for i in 0..up.len() {
                        if x[i] >= lo[i] && x[i] <= hi[i] {
                            g[i] += up[i];
                        }
                    }
                });
            }
            Op::Min(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                accumulate(*a, &mut |g| {
                    for i in 0..up.len() {
                        if !(vb[i] < va[i]) {
                            g[i] += up[i];
                        }
                    }
                });
                accumulate(*b, &mut |g| {
                    for i in 0..up.len() {
                        if vb[i] < va[i] {
                            g[i] += up[i];
                        }
                    }
                });
            }
            Op::Sum(x) => accumulate(*x, &mut |g| {
                for d in g.iter_mut() {
                    *d += up[0];
                }
            }),
        }
    }
}

/// Compares reverse-mode gradients of `build` against central differences.
///
/// `build` receives a fresh graph and the parameter leaf holding `theta`, and
/// must return a scalar node. Returns the maximum over coordinates of
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn finite_diff_check<F>(build: F, theta: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    Ok(finite_diff_report(build, theta, step)?.max_error)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub max_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn finite_diff_report<F>(build: F, theta: &[f64], step: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(AutodiffError::Contract(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let eval = |point: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.param(Tensor::vector(point));
        let out = build(&mut g, leaf)?;
        g.value(out)
            .item()
            .ok_or_else(|| AutodiffError::Contract("objective is not scalar".into()))
    };

    let mut g = Graph::new();
    let leaf = g.param(Tensor::vector(theta.to_vec()));
    let out = build(&mut g, leaf)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(leaf)
        .map(|t| t.data.clone())
        .unwrap_or_else(|| vec![0.0; theta.len()]);

    let mut numeric = Vec::with_capacity(theta.len());
    let mut max_error = 0.0;
    let mut worst_index = 0;
    let mut point = theta.to_vec();
    for i in 0..theta.len() {
        let orig = point[i];
        point[i] = orig + step;
        let plus = eval(point.clone())?;
        point[i] = orig - step;
        let minus = eval(point.clone())?;
        point[i] = orig;
        let fd = (plus - minus) / (2.0 * step);
        let ad = analytic[i];
        let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
        if err > max_error {
            max_error = err;
            worst_index = i;
        }
        numeric.push(fd);
    }
    Ok(FiniteDiffReport {
        max_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_param(g: &mut Graph, v: &[f64]) -> NodeId {
        g.param(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn elementwise_definitions() {
        let mut g = Graph::new();
        let a = vec_param(&mut g, &[1.0, 2.0]);
        let b = vec_param(&mut g, &[3.0, 4.0]);
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 8.0]);
        let one = g.constant(Tensor::vector(vec![1.0]));
        let l = g.log(one).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        let zero = g.constant(Tensor::vector(vec![0.0]));
        let e = g.exp(zero).unwrap();
        assert_eq!(g.value(e).data(), &[1.0]);
    }

    #[test]
    fn elementwise_rejects_bad_shapes_and_domains() {
        let mut g = Graph::new();
        let a = vec_param(&mut g, &[1.0, 2.0]);
        let b = vec_param(&mut g, &[1.0, 2.0, 3.0]);
        assert!(matches!(g.add(a, b), Err(AutodiffError::ShapeMismatch { .. })));
        let bad = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(bad), Err(AutodiffError::Domain { index: 1, .. })));
        assert!(matches!(g.div(a, bad), Err(AutodiffError::Domain { .. })));
        let s = g.constant(Tensor::scalar(2.0));
        let d = g.div(a, s).unwrap();
        assert_eq!(g.value(d).data(), &[0.5, 1.0]);
    }

    #[test]
    fn matmul_values_and_errors() {
        let mut g = Graph::new();
        let row = g.param(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let col = g.param(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let p = g.matmul(row, col).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
        let eye = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let ix = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(ix), g.value(x));
        assert!(g.matmul(row, row).is_err());
    }

    #[test]
    fn matmul_gradient_is_column_sums_of_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (3, 4, 2);
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let build = |g: &mut Graph, theta: NodeId| {
            let am = g.reshape(theta, vec![m, k])?;
            let bm = g.constant(Tensor::matrix(k, n, b.clone())?);
            let p = g.matmul(am, bm)?;
            g.sum(p)
        };
        let report = finite_diff_report(build, &a, 1e-6).unwrap();
        assert!(report.max_error < 1e-8, "{}", report.max_error);
        for i in 0..m {
            for p in 0..k {
                let row_sum: f64 = (0..n).map(|j| b[p * n + j]).sum();
                assert!((report.analytic[i * k + p] - row_sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tanh_values_and_derivative() {
        let mut g = Graph::new();
        let x = vec_param(&mut g, &[0.0, 1.0, 30.0]);
        let y = g.tanh(x).unwrap();
        let v = g.value(y).data().to_vec();
        assert_eq!(v[0], 0.0);
        // tanh(1) = (e² − 1)/(e² + 1)
        let e2 = std::f64::consts::E * std::f64::consts::E;
        assert!((v[1] - (e2 - 1.0) / (e2 + 1.0)).abs() < 1e-15);
        assert!((v[1] - 0.761_594_155_955_764_9).abs() < 1e-15);
        assert!(v[2] <= 1.0);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[0], 1.0);
    }

    #[test]
    fn log_softmax_cases() {
        let mut g = Graph::new();
        let flat = g.constant(Tensor::vector(vec![0.7; 10]));
        let lp = g.log_softmax(flat, 1.0).unwrap();
        for &v in g.value(lp).data() {
            assert!((v + 10f64.ln()).abs() < 1e-12);
        }
        let dom = g.constant(Tensor::vector(vec![0.0, -1e9]));
        let lp = g.log_softmax(dom, 1.0).unwrap();
        let v = g.value(lp).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] + 1e9).abs() < 1.0);
        assert_eq!(v[1].exp(), 0.0);
        assert!(g.log_softmax(flat, 0.0).is_err());
    }

    #[test]
    fn selected_logprob_gradient_is_onehot_minus_probs() {
        let logits = [0.3, -1.2, 2.0, 0.1];
        let build = |g: &mut Graph, theta: NodeId| {
            let m = g.reshape(theta, vec![1, 4])?;
            let lp = g.log_softmax(m, 1.0)?;
            let picked = g.pick(lp, &[2])?;
            g.sum(picked)
        };
        let report = finite_diff_report(build, &logits, 1e-6).unwrap();
        assert!(report.max_error < 1e-8);
        let lp = log_softmax_row(&logits, 1.0);
        for j in 0..4 {
            let expected = if j == 2 { 1.0 } else { 0.0 } - lp[j].exp();
            assert!((report.analytic[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_gated_routing() {
        let mut g = Graph::new();
        let x = vec_param(&mut g, &[1.5, 1.0, 0.8]);
        let lo = Tensor::vector(vec![0.8, 0.8, 0.8]);
        let hi = Tensor::vector(vec![1.2, 1.2, 1.2]);
        let c = g.clip(x, &lo, &hi).unwrap();
        assert_eq!(g.value(c).data(), &[1.2, 1.0, 0.8]);
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        // boundary tie at 0.8 counts as interior
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = vec_param(&mut g, &[0.37]);
        let band = Tensor::vector(vec![0.37]);
        let c = g.clip(x, &band, &band).unwrap();
        assert_eq!(g.value(c).data(), &[0.37]);

        let inverted = g.clip(x, &Tensor::scalar(1.0), &Tensor::scalar(0.5));
        assert!(matches!(inverted, Err(AutodiffError::Contract(_))));
    }

    #[test]
    fn min_pair_routing() {
        let mut g = Graph::new();
        let a = vec_param(&mut g, &[1.5, -0.5, 2.0]);
        let b = vec_param(&mut g, &[1.2, -0.8, 2.0]);
        let m = g.minimum(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[1.2, -0.8, 2.0]);
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new();
        let p = vec_param(&mut g, &[1.0, -2.0, 3.0]);
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);

        let c = g.constant(Tensor::scalar(4.0));
        let doubled = g.add(c, c).unwrap();
        let grads = g.backward(doubled).unwrap();
        assert!(grads.is_empty());

        assert!(matches!(g.backward(p), Err(AutodiffError::Contract(_))));
    }

    #[test]
    fn finite_diff_on_simple_functions() {
        let theta = [0.3, -1.7, 2.2, 0.0];
        let half_norm = |g: &mut Graph, t: NodeId| {
            let sq = g.mul(t, t)?;
            let s = g.sum(sq)?;
            let half = g.constant(Tensor::scalar(0.5));
            g.mul(s, half)
        };
        assert!(finite_diff_check(half_norm, &theta, 1e-6).unwrap() < 1e-8);

        let constant = |g: &mut Graph, _t: NodeId| Ok(g.constant(Tensor::scalar(3.0)));
        let report = finite_diff_report(constant, &theta, 1e-6).unwrap();
        assert!(report.analytic.iter().all(|&v| v == 0.0));
        assert!(report.numeric.iter().all(|&v| v == 0.0));
        assert!(finite_diff_check(half_norm, &theta, 0.0).is_err());
    }

    /// Random composition over every supported op, driven by the op codes.
    fn random_composition(codes: &[u8], g: &mut Graph, t: NodeId) -> Result<NodeId> {
        let n = g.value(t).len();
        let mut cur = g.mul(t, t)?;
        let half = g.constant(Tensor::scalar(0.5));
        cur = g.mul(cur, half)?;
        let shift = g.constant(Tensor::vector((0..n).map(|i| 0.1 * i as f64).collect()));
        for &code in codes {
            cur = match code % 9 {
                0 => g.add(cur, t)?,
                1 => g.sub(cur, shift)?,
                2 => g.mul(cur, t)?,
                3 => {
                    let sq = g.mul(t, t)?;
                    let one = g.constant(Tensor::scalar(1.0));
                    let den = g.add(sq, one)?;
                    g.div(cur, den)?
                }
                4 => {
                    let th = g.tanh(cur)?;
                    g.neg(th)?
                }
                5 => {
                    let th = g.tanh(cur)?;
                    g.exp(th)?
                }
                6 => {
                    let sq = g.mul(cur, cur)?;
                    let one = g.constant(Tensor::scalar(1.0));
                    let pos = g.add(sq, one)?;
                    g.log(pos)?
                }
                7 => {
                    let m = g.reshape(cur, vec![1, n])?;
                    let lp = g.log_softmax(m, 1.3)?;
                    g.reshape(lp, vec![n])?
                }
                _ => {
                    let other = g.tanh(t)?;
                    let mn = g.minimum(cur, other)?;
                    g.clip(mn, &Tensor::scalar(-0.9), &Tensor::scalar(0.9))?
                }
            };
        }
        let w = g.constant(Tensor::vector((0..n).map(|i| 1.0 + i as f64).collect()));
        let weighted = g.mul(cur, w)?;
        g.sum(weighted)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn randomized_compositions_match_finite_differences(
            codes in proptest::collection::vec(0u8..9, 1..8),
            theta in proptest::collection::vec(-1.5f64..1.5, 3..6),
        ) {
            let build = |g: &mut Graph, t: NodeId| random_composition(&codes, g, t);
            let err = finite_diff_check(build, &theta, 1e-6).unwrap();
            prop_assert!(err < 1e-4, "error {err}");
        }

        #[test]
        fn softmax_mass_is_one(logits in proptest::collection::vec(-1e4f64..1e4, 1..32)) {
            let lp = log_softmax_row(&logits, 1.0);
            let mass: f64 = lp.iter().map(|v| v.exp()).sum();
            prop_assert!((mass - 1.0).abs() < 1e-12);
        }

        #[test]
        fn clip_and_min_match_naive(x in -3.0f64..3.0, lo in -2.0f64..1.0, width in 0.0f64..2.0, y in -3.0f64..3.0) {
            let hi = lo + width;
            let mut g = Graph::new();
            let xn = g.constant(Tensor::scalar(x));
            let yn = g.constant(Tensor::scalar(y));
            let c = g.clip(xn, &Tensor::scalar(lo), &Tensor::scalar(hi)).unwrap();
            let naive = if x < lo { lo } else if x > hi { hi } else { x };
            prop_assert_eq!(g.value(c).data()[0].to_bits(), naive.to_bits());
            let m = g.minimum(xn, yn).unwrap();
            let naive_min = if y < x { y } else { x };
            prop_assert_eq!(g.value(m).data()[0].to_bits(), naive_min.to_bits());
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let codes = [0u8, 3, 5, 7, 8, 6, 2];
        let theta = [0.4, -0.2, 1.1, 0.9];
        let run = || {
            let mut g = Graph::new();
            let t = g.param(Tensor::vector(theta.to_vec()));
            let out = random_composition(&codes, &mut g, t).unwrap();
            let grads = g.backward(out).unwrap();
            (
                g.value(out).data()[0].to_bits(),
                grads
                    .get(t)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
