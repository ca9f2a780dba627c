//! Eagerly evaluated computation tape with exact reverse-mode gradients.
//!
//! Every operation computes its forward value immediately and appends a node
//! to the tape. `backward` walks the tape once in reverse, accumulating
//! gradients for every registered parameter. A graph can be differentiated
//! once; re-recording is required for a second backward pass.

use std::collections::BTreeMap;

use crate::diffcore::tensor::{same_precision, Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Operation kinds accepted by [`Graph::record_op`].
///
/// Broadcasting is deliberately narrow: `Add` accepts a rank-1 bias against
/// the last dimension, `Scale` multiplies by a constant, everything else is
/// shape-strict.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Matmul,
    Add,
    Mul,
    Scale(f64),
    Sum,
    Mean,
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    Transpose,
    Relu,
    Gelu,
    Tanh,
    SoftmaxLastDim,
    LayerNorm,
    SquaredError,
    RowMax,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "elementwise-mul",
            OpKind::Scale(_) => "scalar-scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat(_) => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Transpose => "transpose",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Tanh => "tanh",
            OpKind::SoftmaxLastDim => "softmax-lastdim",
            OpKind::LayerNorm => "layernorm",
            OpKind::SquaredError => "squared-error",
            OpKind::RowMax => "rowmax",
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            OpKind::Matmul | OpKind::Add | OpKind::Mul | OpKind::SquaredError => n == 2,
            OpKind::Concat(_) => n >= 1,
            _ => n == 1,
        }
    }
}

const LAYERNORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044_715;

struct Node {
    op: OpKind,
    inputs: Vec<ValueId>,
    value: Tensor,
    requires_grad: bool,
    param_name: Option<String>,
}

/// Gradients keyed by parameter name, shapes matching the parameters.
pub type GradMap = BTreeMap<String, Tensor>;

/// A recorded differentiable computation.
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, ValueId>,
    precision: Precision,
    consumed: bool,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            precision,
            consumed: false,
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

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Registers a named trainable leaf. Registering the same name twice
    /// returns the original handle (so batched recordings share one leaf);
    /// the tensor must then be bit-identical.
    pub fn param(&mut self, name: &str, tensor: &Tensor) -> Result<ValueId> {
        if let Some(&id) = self.params.get(name) {
            if !crate::diffcore::tensor::bit_equal(self.value(id), tensor) {
                return Err(Error::ParamConflict { name: name.to_string() });
            }
            return Ok(id);
        }
        let id = self.push(Node {
            op: OpKind::Relu, // placeholder, never read for leaves
            inputs: vec![],
            value: tensor.to_precision(self.precision),
            requires_grad: true,
            param_name: Some(name.to_string()),
        });
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Inserts a non-trainable leaf (inputs, constants).
    pub fn input(&mut self, tensor: &Tensor) -> ValueId {
        self.push(Node {
            op: OpKind::Relu,
            inputs: vec![],
            value: tensor.to_precision(self.precision),
            requires_grad: false,
            param_name: None,
        })
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<ValueId> {
        let t = Tensor::new(shape, data, self.precision)?;
        Ok(self.input(&t))
    }

    fn push(&mut self, node: Node) -> ValueId {
        self.nodes.push(node);
        ValueId(self.nodes.len() - 1)
    }

    // ── convenience wrappers ─────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.record_op(OpKind::Matmul, &[a, b])
    }
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.record_op(OpKind::Add, &[a, b])
    }
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.record_op(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        self.record_op(OpKind::Scale(c), &[a])
    }
    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }
    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        self.record_op(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: ValueId) -> Result<ValueId> {
        self.record_op(OpKind::Mean, &[a])
    }
    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId> {
        self.record_op(OpKind::Concat(axis), parts)
    }
    pub fn slice(&mut self, a: ValueId, axis: usize, start: usize, len: usize) -> Result<ValueId> {
        self.record_op(OpKind::Slice { axis, start, len }, &[a])
    }
    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId> {
        self.record_op(OpKind::Transpose, &[a])
    }
    pub fn relu(&mut self, a: ValueId) -> Result<ValueId> {
        self.record_op(OpKind::Relu, &[a])
    }
    pub fn gelu(&mut self, a: ValueId) -> Result<ValueId> {
        self.record_op(OpKind::Gelu, &[a])
    }
    pub fn tanh(&mut self, a: ValueId) -> Result<ValueId> {
        self.record_op(OpKind::Tanh, &[a])
    }
    pub fn softmax_lastdim(&mut self, a: ValueId) -> Result<ValueId> {
        self.record_op(OpKind::SoftmaxLastDim, &[a])
    }
    pub fn layernorm(&mut self, a: ValueId) -> Result<ValueId> {
        self.record_op(OpKind::LayerNorm, &[a])
    }
    pub fn squared_error(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.record_op(OpKind::SquaredError, &[a, b])
    }
    pub fn rowmax(&mut self, a: ValueId) -> Result<ValueId> {
        self.record_op(OpKind::RowMax, &[a])
    }

    /// Records one operation, eagerly computing its forward value.
    pub fn record_op(&mut self, op: OpKind, inputs: &[ValueId]) -> Result<ValueId> {
        if !op.arity_ok(inputs.len()) {
            return Err(Error::InvalidShape {
                op: op.name(),
                shape: vec![inputs.len()],
                reason: "wrong number of inputs".to_string(),
            });
        }
        let tensors: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
        same_precision(op.name(), &tensors)?;
        let value = forward(&op, &tensors, self.precision)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            requires_grad,
            param_name: None,
        }))
    }

    /// Reverse pass from a scalar loss. Returns one gradient tensor per
    /// registered parameter; the graph is consumed.
    pub fn backward(&mut self, loss: ValueId) -> Result<GradMap> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let ls = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: ls });
        }
        self.consumed = true;

        let q = self.precision;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            // A node's accumulation is complete once we visit it; quantize
            // before propagating so Standard32 gradients live on the f32 grid.
            if q == Precision::Standard32 {
                for x in g.iter_mut() {
                    *x = *x as f32 as f64;
                }
            }
            if self.nodes[i].param_name.is_some() {
                grads[i] = Some(g);
                continue;
            }
            let node = &self.nodes[i];
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j.0].value).collect();
            let contribs = backward_op(&node.op, &inputs, &node.value, &g);
            for (slot, contrib) in node.inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                if !self.nodes[slot.0].requires_grad {
                    continue;
                }
                match &mut grads[slot.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&c) {
                            *a += v;
                        }
                    }
                    None => grads[slot.0] = Some(c),
                }
            }
        }

        let mut out = GradMap::new();
        for (name, id) in &self.params {
            let shape = self.nodes[id.0].value.shape().to_vec();
            let data = match grads[id.0].take() {
                Some(g) => g,
                None => vec![0.0; self.nodes[id.0].value.numel()],
            };
            out.insert(name.clone(), Tensor::from_raw(shape, data, q));
        }
        Ok(out)
    }
}

// ── forward kernels ──────────────────────────────────────────────────

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn forward(op: &OpKind, xs: &[&Tensor], q: Precision) -> Result<Tensor> {
    let out = match op {
        OpKind::Matmul => {
            let (a, b) = (xs[0], xs[1]);
            let (Some((m, k)), Some((k2, n))) = (a.dims2(), b.dims2()) else {
                return Err(shape_err("matmul", a, b));
            };
            if k != k2 {
                return Err(shape_err("matmul", a, b));
            }
            Tensor::from_raw(vec![m, n], matmul_nn(a.data(), b.data(), m, k, n), q)
        }
        OpKind::Add => {
            let (a, b) = (xs[0], xs[1]);
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::from_raw(a.shape().to_vec(), data, q)
            } else if b.rank() == 1 && a.shape().last() == Some(&b.numel()) && a.rank() >= 1 {
                // bias over the last dimension
                let d = b.numel();
                let mut data = a.data().to_vec();
                for (i, x) in data.iter_mut().enumerate() {
                    *x += b.data()[i % d];
                }
                Tensor::from_raw(a.shape().to_vec(), data, q)
            } else {
                return Err(shape_err("add", a, b));
            }
        }
        OpKind::Mul => {
            let (a, b) = (xs[0], xs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err("elementwise-mul", a, b));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::from_raw(a.shape().to_vec(), data, q)
        }
        OpKind::Scale(c) => {
            let a = xs[0];
            let data = a.data().iter().map(|x| x * c).collect();
            Tensor::from_raw(a.shape().to_vec(), data, q)
        }
        OpKind::Sum => Tensor::from_raw(vec![], vec![xs[0].data().iter().sum()], q),
        OpKind::Mean => {
            let n = xs[0].numel().max(1) as f64;
            Tensor::from_raw(vec![], vec![xs[0].data().iter().sum::<f64>() / n], q)
        }
        OpKind::Concat(axis) => concat_forward(xs, *axis, q)?,
        OpKind::Slice { axis, start, len } => slice_forward(xs[0], *axis, *start, *len, q)?,
        OpKind::Transpose => {
            let a = xs[0];
            let Some((m, n)) = a.dims2() else {
                return Err(Error::InvalidShape {
                    op: "transpose",
                    shape: a.shape().to_vec(),
                    reason: "expects rank 2".to_string(),
                });
            };
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    data[j * m + i] = a.data()[i * n + j];
                }
            }
            Tensor::from_raw(vec![n, m], data, q)
        }
        OpKind::Relu => {
            let data = xs[0].data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
            Tensor::from_raw(xs[0].shape().to_vec(), data, q)
        }
        OpKind::Gelu => {
            let data = xs[0].data().iter().map(|&x| gelu(x)).collect();
            Tensor::from_raw(xs[0].shape().to_vec(), data, q)
        }
        OpKind::Tanh => {
            let data = xs[0].data().iter().map(|&x| x.tanh()).collect();
            Tensor::from_raw(xs[0].shape().to_vec(), data, q)
        }
        OpKind::SoftmaxLastDim => {
            let a = xs[0];
            let d = last_dim(a, "softmax-lastdim")?;
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(d) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            Tensor::from_raw(a.shape().to_vec(), data, q)
        }
        OpKind::LayerNorm => {
            let a = xs[0];
            let d = last_dim(a, "layernorm")?;
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * inv;
                }
            }
            Tensor::from_raw(a.shape().to_vec(), data, q)
        }
        OpKind::SquaredError => {
            let (a, b) = (xs[0], xs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err("squared-error", a, b));
            }
            let n = a.numel().max(1) as f64;
            let s: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Tensor::from_raw(vec![], vec![s / n], q)
        }
        OpKind::RowMax => {
            let a = xs[0];
            let Some((m, n)) = a.dims2() else {
                return Err(Error::InvalidShape {
                    op: "rowmax",
                    shape: a.shape().to_vec(),
                    reason: "expects rank 2".to_string(),
                });
            };
            if m == 0 {
                return Err(Error::InvalidShape {
                    op: "rowmax",
                    shape: a.shape().to_vec(),
                    reason: "needs at least one row".to_string(),
                });
            }
            let mut data = a.data()[..n].to_vec();
            for i in 1..m {
                for j in 0..n {
                    let x = a.data()[i * n + j];
                    if x > data[j] {
                        data[j] = x;
                    }
                }
            }
            // keep rank 2 so pooled rows feed matmuls directly
            Tensor::from_raw(vec![1, n], data, q)
        }
    };
    // Quantize once per op so Standard32 matches f32 storage semantics.
    let out = match q {
        Precision::Standard32 => {
            let mut t = out;
            for x in t.data_mut().iter_mut() {
                *x = *x as f32 as f64;
            }
            t
        }
        Precision::Extended64 => out,
    };
    Ok(out)
}

fn last_dim(a: &Tensor, op: &'static str) -> Result<usize> {
    match a.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(Error::InvalidShape {
            op,
            shape: a.shape().to_vec(),
            reason: "needs a non-empty last dimension".to_string(),
        }),
    }
}

fn concat_forward(xs: &[&Tensor], axis: usize, q: Precision) -> Result<Tensor> {
    let rank = xs[0].rank();
    if axis >= rank.max(1) || xs.iter().any(|t| t.rank() != rank) {
        return Err(Error::InvalidShape {
            op: "concat",
            shape: xs[0].shape().to_vec(),
            reason: format!("axis {axis} out of range or mixed ranks"),
        });
    }
    for t in xs.iter().skip(1) {
        for (d, (a, b)) in xs[0].shape().iter().zip(t.shape()).enumerate() {
            if d != axis && a != b {
                return Err(shape_err("concat", xs[0], t));
            }
        }
    }
    let mut shape = xs[0].shape().to_vec();
    shape[axis] = xs.iter().map(|t| t.shape()[axis]).sum();
    // outer = product of dims before axis; inner = product after
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in xs {
            let rows = t.shape()[axis];
            let start = o * rows * inner;
            data.extend_from_slice(&t.data()[start..start + rows * inner]);
        }
    }
    Ok(Tensor::from_raw(shape, data, q))
}

fn slice_forward(a: &Tensor, axis: usize, start: usize, len: usize, q: Precision) -> Result<Tensor> {
    if axis >= a.rank() || start + len > a.shape()[axis] {
        return Err(Error::InvalidShape {
            op: "slice",
            shape: a.shape().to_vec(),
            reason: format!("range {start}..{} on axis {axis}", start + len),
        });
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let full = a.shape()[axis];
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&a.data()[base..base + len * inner]);
    }
    Ok(Tensor::from_raw(shape, data, q))
}

// ── backward kernels ─────────────────────────────────────────────────

/// Per-input gradient contributions; `None` marks a zero contribution.
fn backward_op(op: &OpKind, xs: &[&Tensor], out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    match op {
        OpKind::Matmul => {
            let (a, b) = (xs[0], xs[1]);
            let (m, k) = a.dims2().unwrap();
            let n = b.dims2().unwrap().1;
            let ga = matmul_nt(g, b.data(), m, n, k);
            let gb = matmul_tn(a.data(), g, m, k, n);
            vec![Some(ga), Some(gb)]
        }
        OpKind::Add => {
            let (a, b) = (xs[0], xs[1]);
            if a.shape() == b.shape() {
                vec![Some(g.to_vec()), Some(g.to_vec())]
            } else {
                // bias broadcast: reduce over leading dims
                let d = b.numel();
                let mut gb = vec![0.0; d];
                for (i, &x) in g.iter().enumerate() {
                    gb[i % d] += x;
                }
                vec![Some(g.to_vec()), Some(gb)]
            }
        }
        OpKind::Mul => {
            let (a, b) = (xs[0], xs[1]);
            let ga = g.iter().zip(b.data()).map(|(x, y)| x * y).collect();
            let gb = g.iter().zip(a.data()).map(|(x, y)| x * y).collect();
            vec![Some(ga), Some(gb)]
        }
        OpKind::Scale(c) => vec![Some(g.iter().map(|x| x * c).collect())],
        OpKind::Sum => vec![Some(vec![g[0]; xs[0].numel()])],
        OpKind::Mean => {
            let n = xs[0].numel().max(1) as f64;
            vec![Some(vec![g[0] / n; xs[0].numel()])]
        }
        OpKind::Concat(axis) => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[*axis + 1..].iter().product();
            let total = out.shape()[*axis];
            let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(xs.len());
            let mut offset = 0usize;
            for t in xs {
                let rows = t.shape()[*axis];
                let mut gt = Vec::with_capacity(t.numel());
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    gt.extend_from_slice(&g[base..base + rows * inner]);
                }
                offset += rows;
                grads.push(Some(gt));
            }
            grads
        }
        OpKind::Slice { axis, start, len } => {
            let a = xs[0];
            let outer: usize = a.shape()[..*axis].iter().product();
            let inner: usize = a.shape()[*axis + 1..].iter().product();
            let full = a.shape()[*axis];
            let mut ga = vec![0.0; a.numel()];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * full + start) * inner;
                ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![Some(ga)]
        }
        OpKind::Transpose => {
            let (m, n) = xs[0].dims2().unwrap();
            // out is [n, m]; gradient back to [m, n]
            let mut ga = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    ga[i * n + j] = g[j * m + i];
                }
            }
            vec![Some(ga)]
        }
        OpKind::Relu => {
            let ga = xs[0]
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gy)| if x > 0.0 { gy } else { 0.0 })
                .collect();
            vec![Some(ga)]
        }
        OpKind::Gelu => {
            let ga = xs[0].data().iter().zip(g).map(|(&x, &gy)| gy * gelu_deriv(x)).collect();
            vec![Some(ga)]
        }
        OpKind::Tanh => {
            let ga = out.data().iter().zip(g).map(|(&y, &gy)| gy * (1.0 - y * y)).collect();
            vec![Some(ga)]
        }
        OpKind::SoftmaxLastDim => {
            let d = *out.shape().last().unwrap();
            let mut ga = vec![0.0; out.numel()];
            for (row, (y, gy)) in out.data().chunks(d).zip(g.chunks(d)).enumerate() {
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    ga[row * d + j] = y[j] * (gy[j] - dot);
                }
            }
            vec![Some(ga)]
        }
        OpKind::LayerNorm => {
            let x = xs[0];
            let d = *x.shape().last().unwrap();
            let df = d as f64;
            let mut ga = vec![0.0; x.numel()];
            for (row, (xr, gy)) in x.data().chunks(d).zip(g.chunks(d)).enumerate() {
                let mean = xr.iter().sum::<f64>() / df;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                let gmean = gy.iter().sum::<f64>() / df;
                let gxdot = gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / df;
                for j in 0..d {
                    ga[row * d + j] = inv * (gy[j] - gmean - xhat[j] * gxdot);
                }
            }
            vec![Some(ga)]
        }
        OpKind::SquaredError => {
            let (a, b) = (xs[0], xs[1]);
            let n = a.numel().max(1) as f64;
            let c = 2.0 * g[0] / n;
            let ga: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| c * (x - y)).collect();
            let gb: Vec<f64> = ga.iter().map(|x| -x).collect();
            vec![Some(ga), Some(gb)]
        }
        OpKind::RowMax => {
            let a = xs[0];
            let (m, n) = a.dims2().unwrap();
            let mut ga = vec![0.0; a.numel()];
            for j in 0..n {
                // ties resolve to the lowest row index (scan order)
                let mut win = 0usize;
                let mut best = a.data()[j];
                for i in 1..m {
                    let x = a.data()[i * n + j];
                    if x > best {
                        best = x;
                        win = i;
                    }
                }
                ga[win * n + j] = g[j];
            }
            vec![Some(ga)]
        }
    }
}

// ── scalar math ──────────────────────────────────────────────────────

fn gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_C * x * x)
}

// ── matmul kernels (row-major) ───────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// C[m,k] = G[m,n] · B[k,n]ᵀ   (rows of G dotted with rows of B)
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C[k,n] = A[m,k]ᵀ · G[m,n]
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, &gj) in crow.iter_mut().zip(grow) {
                *cj += aip * gj;
            }
        }
    }
    c
}
