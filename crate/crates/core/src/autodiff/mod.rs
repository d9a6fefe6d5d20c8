//! Minimal reverse-mode differentiation engine.
//!
//! A [`Tape`] owns an arena of node buffers and a topologically ordered list
//! of primitive records. Forward calls push nodes (and records whenever any
//! input needs gradients); [`Tape::backward`] replays the records in reverse.
//! Everything is f64; tensors are 1-D or 2-D which is all the models here
//! need.

mod adam;
mod checkpoint;
mod gaussian;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gaussian::{kl_diag_gaussians, DiagGaussian};

use crate::error::{CoreError, Result};

pub type NodeId = usize;

const LN_2PI: f64 = 1.8378770664093453;

/// Bounds applied to every log-variance head before exponentiation.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 4.0;

/// A dense tensor participating in differentiation.
///
/// `node` is populated while the tensor is registered as a leaf on an active
/// tape and is cleared the next time it is registered elsewhere.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "tensor shape/value length mismatch"
        );
        Tensor {
            shape,
            values,
            requires_grad: false,
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Primitive kinds the tape understands.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    /// A · Bᵀ with B given as [n, k]; the layout attention scores want.
    MatMulTB,
    Tanh,
    Relu,
    Exp,
    Log,
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    /// Softmax over the last axis.
    Softmax,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Broadcast { shape: Vec<usize> },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::MatMulTB => "matmul_tb",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sum { .. } => "sum",
            OpKind::Mean { .. } => "mean",
            OpKind::Softmax => "softmax",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Broadcast { .. } => "broadcast",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    needs_grad: bool,
}

#[derive(Debug, Clone)]
struct Record {
    kind: OpKind,
    inputs: Vec<NodeId>,
    output: NodeId,
}

/// Gradient map produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node, or `None` if no gradient flowed.
    pub fn of(&self, node: NodeId) -> Option<&[f64]> {
        self.by_node.get(node).and_then(|g| g.as_deref())
    }

    /// Gradient for a leaf; unreached leaves get zeros of the right length.
    pub fn of_or_zeros(&self, node: NodeId, len: usize) -> Vec<f64> {
        match self.of(node) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

/// Recording tape: arena of node buffers plus the primitive program.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    records: Vec<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn push_node(&mut self, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            values,
            needs_grad,
        });
        id
    }

    /// Register a tensor as a leaf, snapshotting its values. The tensor's
    /// `node` field is updated so later lookups can find its gradient.
    pub fn leaf(&mut self, t: &mut Tensor) -> NodeId {
        let id = self.push_node(t.shape.clone(), t.values.clone(), t.requires_grad);
        t.node = Some(id);
        id
    }

    /// Node id a tensor was registered under on this tape, if any.
    pub fn leafed(&self, t: &Tensor) -> Option<NodeId> {
        t.node.filter(|&id| id < self.nodes.len())
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.push_node(shape, values, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(vec![1], vec![v])
    }

    /// Execute a primitive, recording it when any input needs gradients.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let (shape, values) = self.forward(&kind, inputs)?;
        let needs = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let out = self.push_node(shape, values, needs);
        if needs {
            self.records.push(Record {
                kind,
                inputs: inputs.to_vec(),
                output: out,
            });
        }
        Ok(out)
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> CoreError {
        CoreError::ShapeMismatch {
            op,
            lhs: self.nodes[a].shape.clone(),
            rhs: self.nodes[b].shape.clone(),
        }
    }

    fn forward(&self, kind: &OpKind, inputs: &[NodeId]) -> Result<(Vec<usize>, Vec<f64>)> {
        let arity_ok = match kind {
            OpKind::Concat { .. } => inputs.len() >= 2,
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul | OpKind::MatMulTB => {
                inputs.len() == 2
            }
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(CoreError::InvalidArgument(format!(
                "{} got {} inputs",
                kind.name(),
                inputs.len()
            )));
        }
        match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let (a, b) = (&self.nodes[inputs[0]], &self.nodes[inputs[1]]);
                if a.shape != b.shape {
                    return Err(self.shape_err(kind.name(), inputs[0], inputs[1]));
                }
                let vals = a
                    .values
                    .iter()
                    .zip(b.values.iter())
                    .map(|(x, y)| match kind {
                        OpKind::Add => x + y,
                        OpKind::Sub => x - y,
                        _ => x * y,
                    })
                    .collect();
                Ok((a.shape.clone(), vals))
            }
            OpKind::MatMul => {
                let (a, b) = (&self.nodes[inputs[0]], &self.nodes[inputs[1]]);
                if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                    return Err(self.shape_err("matmul", inputs[0], inputs[1]));
                }
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a.values[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            out[i * n + j] += av * b.values[p * n + j];
                        }
                    }
                }
                Ok((vec![m, n], out))
            }
            OpKind::MatMulTB => {
                let (a, b) = (&self.nodes[inputs[0]], &self.nodes[inputs[1]]);
                if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
                    return Err(self.shape_err("matmul_tb", inputs[0], inputs[1]));
                }
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let a_row = &a.values[i * k..(i + 1) * k];
                    for j in 0..n {
                        let b_row = &b.values[j * k..(j + 1) * k];
                        let mut s = 0.0;
                        for p in 0..k {
                            s += a_row[p] * b_row[p];
                        }
                        out[i * n + j] = s;
                    }
                }
                Ok((vec![m, n], out))
            }
            OpKind::Tanh | OpKind::Relu | OpKind::Exp | OpKind::Log => {
                let a = &self.nodes[inputs[0]];
                let vals = a
                    .values
                    .iter()
                    .map(|&x| match kind {
                        OpKind::Tanh => x.tanh(),
                        OpKind::Relu => x.max(0.0),
                        OpKind::Exp => x.exp(),
                        _ => x.ln(),
                    })
                    .collect();
                Ok((a.shape.clone(), vals))
            }
            OpKind::Sum { axis } | OpKind::Mean { axis } => {
                let a = &self.nodes[inputs[0]];
                let mean = matches!(kind, OpKind::Mean { .. });
                self.reduce(a, *axis, mean)
            }
            OpKind::Softmax => {
                let a = &self.nodes[inputs[0]];
                let cols = *a.shape.last().ok_or_else(|| {
                    CoreError::InvalidArgument("softmax of empty shape".into())
                })?;
                if cols == 0 {
                    return Err(CoreError::InvalidArgument("softmax over zero-width axis".into()));
                }
                let mut vals = a.values.clone();
                for row in vals.chunks_mut(cols) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= sum;
                    }
                }
                Ok((a.shape.clone(), vals))
            }
            OpKind::Concat { axis } => self.concat_forward(inputs, *axis),
            OpKind::Slice { axis, start, len } => {
                let a = &self.nodes[inputs[0]];
                self.slice_forward(a, *axis, *start, *len)
            }
            OpKind::Broadcast { shape } => {
                let a = &self.nodes[inputs[0]];
                self.broadcast_forward(a, shape)
            }
        }
    }

    fn reduce(&self, a: &Node, axis: Option<usize>, mean: bool) -> Result<(Vec<usize>, Vec<f64>)> {
        match axis {
            None => {
                let mut s: f64 = a.values.iter().sum();
                if mean && !a.values.is_empty() {
                    s /= a.values.len() as f64;
                }
                Ok((vec![1], vec![s]))
            }
            Some(ax) => {
                if a.shape.len() != 2 || ax > 1 {
                    return Err(CoreError::InvalidArgument(format!(
                        "axis reduction needs a 2-D input and axis 0/1, got shape {:?} axis {}",
                        a.shape, ax
                    )));
                }
                let (m, n) = (a.shape[0], a.shape[1]);
                if ax == 0 {
                    let mut out = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            out[c] += a.values[r * n + c];
                        }
                    }
                    if mean && m > 0 {
                        out.iter_mut().for_each(|x| *x /= m as f64);
                    }
                    Ok((vec![1, n], out))
                } else {
                    let mut out = vec![0.0; m];
                    for r in 0..m {
                        out[r] = a.values[r * n..(r + 1) * n].iter().sum();
                        if mean && n > 0 {
                            out[r] /= n as f64;
                        }
                    }
                    Ok((vec![m, 1], out))
                }
            }
        }
    }

    fn concat_forward(&self, inputs: &[NodeId], axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let first = &self.nodes[inputs[0]];
        let rank = first.shape.len();
        if axis >= rank {
            return Err(CoreError::InvalidArgument(format!(
                "concat axis {} out of range for rank {}",
                axis, rank
            )));
        }
        let mut out_shape = first.shape.clone();
        for &i in &inputs[1..] {
            let s = &self.nodes[i].shape;
            if s.len() != rank
                || (0..rank).any(|d| d != axis && s[d] != first.shape[d])
            {
                return Err(self.shape_err("concat", inputs[0], i));
            }
            out_shape[axis] += s[axis];
        }
        if rank == 1 {
            let mut vals = Vec::with_capacity(out_shape[0]);
            for &i in inputs {
                vals.extend_from_slice(&self.nodes[i].values);
            }
            return Ok((out_shape, vals));
        }
        // rank 2
        if axis == 0 {
            let mut vals = Vec::with_capacity(out_shape[0] * out_shape[1]);
            for &i in inputs {
                vals.extend_from_slice(&self.nodes[i].values);
            }
            Ok((out_shape, vals))
        } else {
            let rows = first.shape[0];
            let total_cols = out_shape[1];
            let mut vals = vec![0.0; rows * total_cols];
            for r in 0..rows {
                let mut off = 0;
                for &i in inputs {
                    let node = &self.nodes[i];
                    let c = node.shape[1];
                    vals[r * total_cols + off..r * total_cols + off + c]
                        .copy_from_slice(&node.values[r * c..(r + 1) * c]);
                    off += c;
                }
            }
            Ok((out_shape, vals))
        }
    }

    fn slice_forward(
        &self,
        a: &Node,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        if axis >= a.shape.len() || start + len > a.shape[axis] {
            return Err(CoreError::InvalidArgument(format!(
                "slice [{}, {}+{}] out of bounds for shape {:?}",
                axis, start, len, a.shape
            )));
        }
        if a.shape.len() == 1 {
            return Ok((vec![len], a.values[start..start + len].to_vec()));
        }
        let (m, n) = (a.shape[0], a.shape[1]);
        if axis == 0 {
            Ok((vec![len, n], a.values[start * n..(start + len) * n].to_vec()))
        } else {
            let mut vals = Vec::with_capacity(m * len);
            for r in 0..m {
                vals.extend_from_slice(&a.values[r * n + start..r * n + start + len]);
            }
            Ok((vec![m, len], vals))
        }
    }

    fn broadcast_forward(&self, a: &Node, to: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
        let n_out: usize = to.iter().product();
        // [1] -> anything
        if a.values.len() == 1 {
            return Ok((to.to_vec(), vec![a.values[0]; n_out]));
        }
        if a.shape.len() == 2 && to.len() == 2 {
            let (m, n) = (to[0], to[1]);
            if a.shape == [1, n] {
                let mut vals = Vec::with_capacity(m * n);
                for _ in 0..m {
                    vals.extend_from_slice(&a.values);
                }
                return Ok((to.to_vec(), vals));
            }
            if a.shape == [m, 1] {
                let mut vals = Vec::with_capacity(m * n);
                for r in 0..m {
                    vals.extend(std::iter::repeat(a.values[r]).take(n));
                }
                return Ok((to.to_vec(), vals));
            }
        }
        Err(CoreError::InvalidArgument(format!(
            "broadcast {:?} -> {:?} unsupported",
            a.shape, to
        )))
    }

    /// Reverse pass from a scalar loss node. Returns the gradient map.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let ln = &self.nodes[loss];
        if ln.values.len() != 1 {
            return Err(CoreError::NotScalar {
                op: "backward",
                shape: ln.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for rec in self.records.iter().rev() {
            let d_out = match &grads[rec.output] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backward_record(rec, &d_out, &mut grads);
        }
        Ok(Gradients { by_node: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], node: NodeId, delta: &[f64]) {
        if !self.nodes[node].needs_grad {
            return;
        }
        match &mut grads[node] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta.iter()) {
                    *gi += di;
                }
            }
            None => grads[node] = Some(delta.to_vec()),
        }
    }

    fn backward_record(&self, rec: &Record, d_out: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &rec.kind {
            OpKind::Add => {
                self.accumulate(grads, rec.inputs[0], d_out);
                self.accumulate(grads, rec.inputs[1], d_out);
            }
            OpKind::Sub => {
                self.accumulate(grads, rec.inputs[0], d_out);
                let neg: Vec<f64> = d_out.iter().map(|x| -x).collect();
                self.accumulate(grads, rec.inputs[1], &neg);
            }
            OpKind::Mul => {
                let a = &self.nodes[rec.inputs[0]].values;
                let b = &self.nodes[rec.inputs[1]].values;
                let da: Vec<f64> = d_out.iter().zip(b.iter()).map(|(d, y)| d * y).collect();
                let db: Vec<f64> = d_out.iter().zip(a.iter()).map(|(d, x)| d * x).collect();
                self.accumulate(grads, rec.inputs[0], &da);
                self.accumulate(grads, rec.inputs[1], &db);
            }
            OpKind::MatMul => {
                let a = &self.nodes[rec.inputs[0]];
                let b = &self.nodes[rec.inputs[1]];
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                // dA = dC B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += d_out[i * n + j] * b.values[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                // dB = A^T dC
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let av = a.values[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * d_out[i * n + j];
                        }
                    }
                }
                self.accumulate(grads, rec.inputs[0], &da);
                self.accumulate(grads, rec.inputs[1], &db);
            }
            OpKind::MatMulTB => {
                // C = A B^T, A [m,k], B [n,k]: dA = dC B, dB = dC^T A.
                let a = &self.nodes[rec.inputs[0]];
                let b = &self.nodes[rec.inputs[1]];
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let d = d_out[i * n + j];
                        if d == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += d * b.values[j * k + p];
                        }
                    }
                }
                let mut db = vec![0.0; n * k];
                for j in 0..n {
                    for i in 0..m {
                        let d = d_out[i * n + j];
                        if d == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            db[j * k + p] += d * a.values[i * k + p];
                        }
                    }
                }
                self.accumulate(grads, rec.inputs[0], &da);
                self.accumulate(grads, rec.inputs[1], &db);
            }
            OpKind::Tanh => {
                let y = &self.nodes[rec.output].values;
                let dx: Vec<f64> = d_out
                    .iter()
                    .zip(y.iter())
                    .map(|(d, y)| d * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, rec.inputs[0], &dx);
            }
            OpKind::Relu => {
                let x = &self.nodes[rec.inputs[0]].values;
                let dx: Vec<f64> = d_out
                    .iter()
                    .zip(x.iter())
                    .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(grads, rec.inputs[0], &dx);
            }
            OpKind::Exp => {
                let y = &self.nodes[rec.output].values;
                let dx: Vec<f64> = d_out.iter().zip(y.iter()).map(|(d, y)| d * y).collect();
                self.accumulate(grads, rec.inputs[0], &dx);
            }
            OpKind::Log => {
                let x = &self.nodes[rec.inputs[0]].values;
                let dx: Vec<f64> = d_out.iter().zip(x.iter()).map(|(d, x)| d / x).collect();
                self.accumulate(grads, rec.inputs[0], &dx);
            }
            OpKind::Sum { axis } | OpKind::Mean { axis } => {
                let a = &self.nodes[rec.inputs[0]];
                let mean = matches!(rec.kind, OpKind::Mean { .. });
                let mut dx = vec![0.0; a.values.len()];
                match axis {
                    None => {
                        let mut d = d_out[0];
                        if mean && !a.values.is_empty() {
                            d /= a.values.len() as f64;
                        }
                        dx.iter_mut().for_each(|x| *x = d);
                    }
                    Some(0) => {
                        let (m, n) = (a.shape[0], a.shape[1]);
                        let scale = if mean && m > 0 { 1.0 / m as f64 } else { 1.0 };
                        for r in 0..m {
                            for c in 0..n {
                                dx[r * n + c] = d_out[c] * scale;
                            }
                        }
                    }
                    Some(_) => {
                        let (m, n) = (a.shape[0], a.shape[1]);
                        let scale = if mean && n > 0 { 1.0 / n as f64 } else { 1.0 };
                        for r in 0..m {
                            for c in 0..n {
                                dx[r * n + c] = d_out[r] * scale;
                            }
                        }
                    }
                }
                self.accumulate(grads, rec.inputs[0], &dx);
            }
            OpKind::Softmax => {
                let y = &self.nodes[rec.output];
                let cols = *y.shape.last().unwrap();
                let mut dx = vec![0.0; y.values.len()];
                for (row_idx, (yr, dr)) in y
                    .values
                    .chunks(cols)
                    .zip(d_out.chunks(cols))
                    .enumerate()
                {
                    let dot: f64 = yr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[row_idx * cols + c] = yr[c] * (dr[c] - dot);
                    }
                }
                self.accumulate(grads, rec.inputs[0], &dx);
            }
            OpKind::Concat { axis } => {
                let rank = self.nodes[rec.inputs[0]].shape.len();
                if rank == 1 || *axis == 0 {
                    let mut off = 0;
                    for &i in &rec.inputs {
                        let n = self.nodes[i].values.len();
                        self.accumulate(grads, i, &d_out[off..off + n]);
                        off += n;
                    }
                } else {
                    let rows = self.nodes[rec.inputs[0]].shape[0];
                    let total_cols: usize =
                        rec.inputs.iter().map(|&i| self.nodes[i].shape[1]).sum();
                    let mut off = 0;
                    for &i in &rec.inputs {
                        let c = self.nodes[i].shape[1];
                        let mut di = vec![0.0; rows * c];
                        for r in 0..rows {
                            di[r * c..(r + 1) * c].copy_from_slice(
                                &d_out[r * total_cols + off..r * total_cols + off + c],
                            );
                        }
                        self.accumulate(grads, i, &di);
                        off += c;
                    }
                }
            }
            OpKind::Slice { axis, start, len } => {
                let a = &self.nodes[rec.inputs[0]];
                let mut dx = vec![0.0; a.values.len()];
                if a.shape.len() == 1 {
                    dx[*start..start + len].copy_from_slice(d_out);
                } else {
                    let (m, n) = (a.shape[0], a.shape[1]);
                    if *axis == 0 {
                        dx[start * n..(start + len) * n].copy_from_slice(d_out);
                    } else {
                        for r in 0..m {
                            dx[r * n + start..r * n + start + len]
                                .copy_from_slice(&d_out[r * len..(r + 1) * len]);
                        }
                    }
                }
                self.accumulate(grads, rec.inputs[0], &dx);
            }
            OpKind::Broadcast { shape } => {
                let a = &self.nodes[rec.inputs[0]];
                let mut dx = vec![0.0; a.values.len()];
                if a.values.len() == 1 {
                    dx[0] = d_out.iter().sum();
                } else {
                    let (m, n) = (shape[0], shape[1]);
                    if a.shape == [1, n] {
                        for r in 0..m {
                            for c in 0..n {
                                dx[c] += d_out[r * n + c];
                            }
                        }
                    } else {
                        for r in 0..m {
                            dx[r] = d_out[r * n..(r + 1) * n].iter().sum();
                        }
                    }
                }
                self.accumulate(grads, rec.inputs[0], &dx);
            }
        }
    }

    /// Recompute every recorded output from current node values and check
    /// bit-exact agreement. Exercised by the determinism tests.
    pub fn verify_replay(&self) -> bool {
        for rec in &self.records {
            match self.forward(&rec.kind, &rec.inputs) {
                Ok((_, vals)) => {
                    if vals != self.nodes[rec.output].values {
                        return false;
                    }
                }
                Err(_) => return false,
            }
        }
        true
    }

    // ── Composite builders ───────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMulTB, &[a, b])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum { axis: None }, &[a])
    }
    pub fn mean_axis0(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean { axis: Some(0) }, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Softmax, &[a])
    }
    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        self.apply(OpKind::Concat { axis: 1 }, inputs)
    }
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.apply(OpKind::Slice { axis: 1, start, len }, &[a])
    }
    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(OpKind::Broadcast { shape: shape.to_vec() }, &[a])
    }

    /// x * c for a constant scalar.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let s = self.scalar(c);
        let b = self.broadcast_to(s, &self.nodes[a].shape.clone())?;
        self.mul(a, b)
    }

    /// x + c for a constant scalar.
    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let s = self.scalar(c);
        let b = self.broadcast_to(s, &self.nodes[a].shape.clone())?;
        self.add(a, b)
    }

    /// Differentiable clamp: lo + relu(x - lo) - relu(x - hi).
    /// Gradient is 1 inside [lo, hi] and 0 outside.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let x_lo = self.add_const(x, -lo)?;
        let t1 = self.relu(x_lo)?;
        let x_hi = self.add_const(x, -hi)?;
        let t2 = self.relu(x_hi)?;
        let diff = self.sub(t1, t2)?;
        self.add_const(diff, lo)
    }

    /// mu + exp(log_sigma) ⊙ noise; differentiable w.r.t. mu and log_sigma.
    pub fn reparam_sample(
        &mut self,
        mu: NodeId,
        log_sigma: NodeId,
        noise: NodeId,
    ) -> Result<NodeId> {
        if self.nodes[mu].shape != self.nodes[log_sigma].shape {
            return Err(self.shape_err("reparam_sample", mu, log_sigma));
        }
        if self.nodes[mu].shape != self.nodes[noise].shape {
            return Err(self.shape_err("reparam_sample", mu, noise));
        }
        let sigma = self.exp(log_sigma)?;
        let scaled = self.mul(sigma, noise)?;
        self.add(mu, scaled)
    }

    /// Scalar Gaussian negative log-likelihood summed over all entries:
    /// 0.5 * Σ [(y-mu)^2 exp(-lv) + lv + ln 2π].
    pub fn gaussian_nll(&mut self, mu: NodeId, log_var: NodeId, target: NodeId) -> Result<NodeId> {
        if self.nodes[mu].shape != self.nodes[target].shape {
            return Err(self.shape_err("gaussian_nll", mu, target));
        }
        let diff = self.sub(target, mu)?;
        let sq = self.mul(diff, diff)?;
        let neg_lv = self.scale(log_var, -1.0)?;
        let inv_var = self.exp(neg_lv)?;
        let mahal = self.mul(sq, inv_var)?;
        let with_lv = self.add(mahal, log_var)?;
        let with_c = self.add_const(with_lv, LN_2PI)?;
        let total = self.sum_all(with_c)?;
        self.scale(total, 0.5)
    }

    /// KL(p ‖ q) between factorized Gaussians given by mean and log-variance
    /// nodes, summed over dimensions:
    /// 0.5 * Σ [exp(lp - lq) + (mp - mq)^2 exp(-lq) - 1 + (lq - lp)].
    pub fn kl_diag_gaussians(
        &mut self,
        mu_p: NodeId,
        log_var_p: NodeId,
        mu_q: NodeId,
        log_var_q: NodeId,
    ) -> Result<NodeId> {
        if self.nodes[mu_p].shape != self.nodes[mu_q].shape {
            return Err(self.shape_err("kl_diag_gaussians", mu_p, mu_q));
        }
        let lv_diff = self.sub(log_var_p, log_var_q)?;
        let ratio = self.exp(lv_diff)?;
        let mdiff = self.sub(mu_p, mu_q)?;
        let msq = self.mul(mdiff, mdiff)?;
        let neg_lq = self.scale(log_var_q, -1.0)?;
        let inv_q = self.exp(neg_lq)?;
        let mterm = self.mul(msq, inv_q)?;
        let a = self.add(ratio, mterm)?;
        let b = self.sub(log_var_q, log_var_p)?;
        let c = self.add(a, b)?;
        let d = self.add_const(c, -1.0)?;
        let total = self.sum_all(d)?;
        self.scale(total, 0.5)
    }
}
