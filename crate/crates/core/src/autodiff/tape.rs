use std::collections::HashMap;

use super::{AutodiffError, Tensor, TensorId, LOG_FLOOR};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Vector-Jacobian product of a custom operation: maps the gradient of the
/// output to the gradient of its single input.
pub type VectorJacobian = Box<dyn Fn(&[f64]) -> Vec<f64> + Send>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// `b` has length equal to the last dimension of `a`.
    Row(usize),
    /// `b` is `[rows, 1]` against a 2-D `a` with `cols` columns.
    Col(usize),
}

impl Broadcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Row(c) => i % c,
            Broadcast::Col(c) => i / c,
        }
    }
}

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Div(Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Sum {
        input: Var,
        outer: usize,
        dim: usize,
        inner: usize,
    },
    SumAll(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    GatherRows {
        input: Var,
        indices: Vec<usize>,
        row_len: usize,
    },
    Select {
        input: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    L2Norm(Var),
    Custom(Var, VectorJacobian),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Ordered record of one forward pass. Node order is execution order, which
/// is a topological order of the graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<TensorId, Var>,
}

/// Gradients produced by one backward traversal.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<TensorId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a bound parameter tensor, if it was reached.
    pub fn of(&self, t: &Tensor) -> Option<&[f64]> {
        self.params.get(&t.id()).and_then(|v| self.get(*v))
    }

    /// Adds this traversal's gradient for `t` into `t.grad`. Parameters not
    /// reached by the loss get an explicit zero gradient.
    pub fn accumulate_into(&self, t: &mut Tensor) -> Result<(), AutodiffError> {
        match self.of(t) {
            Some(g) => {
                let g = g.to_vec();
                t.accumulate_grad(&g)
            }
            None => {
                if t.grad().is_none() {
                    t.zero_grad();
                }
                Ok(())
            }
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Copies the node's value out as a constant tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone())
            .expect("node value matches its shape")
            .into_constant()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let op = if tracked { op } else { Op::Constant };
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter tensor. Binding the same tensor twice returns the
    /// same node.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(v) = self.params.get(&t.id()) {
            return *v;
        }
        let tracked = !t.is_constant();
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, tracked);
        if tracked {
            self.params.insert(t.id(), v);
        }
        v
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, AutodiffError> {
        if numel(&shape) != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push(shape, data, Op::Constant, false))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Constant, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(vec![], vec![x], Op::Constant, false)
    }

    /// Stop-gradient: a constant copy of `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Constant, false)
    }

    fn dims2(&self, op: &'static str, a: Var) -> Result<(usize, usize), AutodiffError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), tracked))
    }

    /// `a · bᵀ` for `a: [m × k]`, `b: [n × k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.dims2("matmul_t", a)?;
        let (n, k2) = self.dims2("matmul_t", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(vec![m, n], out, Op::MatMulT(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims2("transpose", a)?;
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let tracked = self.is_tracked(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), tracked))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        let nb = numel(sb);
        if nb == 1 {
            return Ok(Broadcast::Scalar);
        }
        if sa.len() >= 2 {
            let c = sa[sa.len() - 1];
            let row_like = (sb.len() == 1 && sb[0] == c) || (sb.len() == 2 && sb[0] == 1 && sb[1] == c);
            if row_like {
                return Ok(Broadcast::Row(c));
            }
            if sa.len() == 2 && sb.len() == 2 && sb[0] == sa[0] && sb[1] == 1 {
                return Ok(Broadcast::Col(c));
            }
        }
        Err(self.mismatch(op, a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var, Broadcast) -> Op,
    ) -> Result<Var, AutodiffError> {
        let bc = self.broadcast(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, bv[bc.index(i)]))
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(shape, out, op(a, b, bc), tracked))
    }

    /// Elementwise `a + b`; `b` may be a scalar, a row vector over the last
    /// axis, or a `[rows, 1]` column.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise `a / b`. Any exact zero in `b` is an error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.value(b).contains(&0.0) {
            return Err(AutodiffError::DivisionByZero { op: "div" });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.is_tracked(a);
        self.push(shape, out, op, tracked)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// `c - a`.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log with the argument clamped to at least [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    /// Square root of `max(a, 0)`.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0).sqrt(), Op::Sqrt(a))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.mul(a, a)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "sum_axis",
                axis,
                shape,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let av = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                for i in 0..inner {
                    out[o * inner + i] += av[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let tracked = self.is_tracked(a);
        Ok(self.push(
            out_shape,
            out,
            Op::Sum {
                input: a,
                outer,
                dim,
                inner,
            },
            tracked,
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let dim = *self.shape(a).get(axis).ok_or_else(|| AutodiffError::InvalidAxis {
            op: "mean_axis",
            axis,
            shape: self.shape(a).to_vec(),
        })?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / dim as f64))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        let tracked = self.is_tracked(a);
        self.push(vec![], vec![total], Op::SumAll(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    fn last_dim(&self, a: Var) -> usize {
        *self.shape(a).last().unwrap_or(&1)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let c = self.last_dim(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let shape = self.shape(a).to_vec();
        let tracked = self.is_tracked(a);
        self.push(shape, out, Op::Softmax(a), tracked)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let c = self.last_dim(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = self.shape(a).to_vec();
        let tracked = self.is_tracked(a);
        self.push(shape, out, Op::LogSoftmax(a), tracked)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = *inputs.first().ok_or(AutodiffError::InvalidAxis {
            op: "concat",
            axis,
            shape: vec![],
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut chunks = Vec::with_capacity(inputs.len());
        let mut total_dim = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(self.mismatch("concat", first, v));
            }
            total_dim += s[axis];
            chunks.push(s[axis] * inner);
        }
        let mut out = Vec::with_capacity(outer * total_dim * inner);
        for o in 0..outer {
            for (&v, &chunk) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total_dim;
        let tracked = inputs.iter().any(|v| self.is_tracked(*v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            tracked,
        ))
    }

    /// Row lookup: output row `i` is input row `indices[i]` (first axis).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let rows = *shape.first().unwrap_or(&1);
        let row_len: usize = shape.iter().skip(1).product();
        let mut out = Vec::with_capacity(indices.len() * row_len);
        let av = self.value(a);
        for &i in indices {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            out.extend_from_slice(&av[i * row_len..(i + 1) * row_len]);
        }
        let mut out_shape = shape;
        if out_shape.is_empty() {
            out_shape.push(indices.len());
        } else {
            out_shape[0] = indices.len();
        }
        let tracked = self.is_tracked(a);
        Ok(self.push(
            out_shape,
            out,
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
                row_len,
            },
            tracked,
        ))
    }

    /// Picks flat elements into a 1-D tensor.
    pub fn select(&mut self, a: Var, flat: &[usize]) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let mut out = Vec::with_capacity(flat.len());
        for &i in flat {
            out.push(*av.get(i).ok_or(AutodiffError::IndexOutOfRange {
                op: "select",
                index: i,
                extent: av.len(),
            })?);
        }
        let tracked = self.is_tracked(a);
        Ok(self.push(
            vec![flat.len()],
            out,
            Op::Select {
                input: a,
                indices: flat.to_vec(),
            },
            tracked,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        if numel(&shape) != self.value(a).len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let out = self.value(a).to_vec();
        let tracked = self.is_tracked(a);
        Ok(self.push(shape, out, Op::Reshape(a), tracked))
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let c = self.last_dim(a);
        let out: Vec<f64> = self
            .value(a)
            .chunks(c)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let mut shape = self.shape(a).to_vec();
        shape.pop();
        let tracked = self.is_tracked(a);
        self.push(shape, out, Op::L2Norm(a), tracked)
    }

    /// Records an operation computed outside the tape, with its own
    /// vector-Jacobian product.
    pub fn custom(
        &mut self,
        input: Var,
        shape: Vec<usize>,
        value: Vec<f64>,
        vjp: VectorJacobian,
    ) -> Result<Var, AutodiffError> {
        if numel(&shape) != value.len() {
            return Err(AutodiffError::DataLength {
                shape,
                len: value.len(),
            });
        }
        let tracked = self.is_tracked(input);
        Ok(self.push(shape, value, Op::Custom(input, vjp), tracked))
    }

    /// Reverse traversal from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if numel(self.shape(loss)) != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only leaves and reachable nodes keep entries; intermediate grads are
        // retained for inspection.
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut add = |v: Var, delta: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            delta(slot);
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G · Bᵀ
                add(*a, &|ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · G
                add(*b, &|gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G · B
                add(*a, &|ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let brow = &bv[j * k..(j + 1) * k];
                            for (o, y) in ga[i * k..(i + 1) * k].iter_mut().zip(brow) {
                                *o += gij * y;
                            }
                        }
                    }
                });
                // dB = Gᵀ · A
                add(*b, &|gb| {
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for (o, x) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *o += gij * x;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                add(*a, &|ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b, bc) => {
                add(*a, &|ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                add(*b, &|gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[bc.index(i)] += gi;
                    }
                });
            }
            Op::Sub(a, b, bc) => {
                add(*a, &|ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                add(*b, &|gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[bc.index(i)] -= gi;
                    }
                });
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                add(*a, &|ga| {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * bv[bc.index(i)];
                    }
                });
                add(*b, &|gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[bc.index(i)] += gi * av[i];
                    }
                });
            }
            Op::Div(a, b, bc) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                add(*a, &|ga| {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi / bv[bc.index(i)];
                    }
                });
                add(*b, &|gb| {
                    for (i, gi) in g.iter().enumerate() {
                        let y = bv[bc.index(i)];
                        gb[bc.index(i)] -= gi * av[i] / (y * y);
                    }
                });
            }
            Op::Scale(a, c) => {
                add(*a, &|ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                add(*a, &|ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Tanh(a) => {
                let out = &node.value;
                add(*a, &|ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = &node.value;
                add(*a, &|ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let out = &node.value;
                add(*a, &|ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i];
                    }
                });
            }
            Op::Log(a) => {
                let av = self.value(*a);
                add(*a, &|ga| {
                    for i in 0..g.len() {
                        if av[i] > LOG_FLOOR {
                            ga[i] += g[i] / av[i];
                        }
                    }
                });
            }
            Op::Sqrt(a) => {
                let out = &node.value;
                add(*a, &|ga| {
                    for i in 0..g.len() {
                        if out[i] > 0.0 {
                            ga[i] += g[i] * 0.5 / out[i];
                        }
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let av = self.value(*a);
                add(*a, &|ga| {
                    for i in 0..g.len() {
                        if av[i] > *floor {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum {
                input,
                outer,
                dim,
                inner,
            } => {
                add(*input, &|ga| {
                    for o in 0..*outer {
                        for d in 0..*dim {
                            let base = (o * dim + d) * inner;
                            for i in 0..*inner {
                                ga[base + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                add(*a, &|ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Softmax(a) => {
                let c = self.last_dim(*a);
                let out = &node.value;
                add(*a, &|ga| {
                    for r in 0..out.len() / c {
                        let (y, gy) = (&out[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[r * c + j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = self.last_dim(*a);
                let out = &node.value;
                add(*a, &|ga| {
                    for r in 0..out.len() / c {
                        let gy = &g[r * c..(r + 1) * c];
                        let total: f64 = gy.iter().sum();
                        for j in 0..c {
                            ga[r * c + j] += gy[j] - out[r * c + j].exp() * total;
                        }
                    }
                });
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let row: usize = chunks.iter().sum();
                let mut offset = 0;
                for (v, &chunk) in inputs.iter().zip(chunks) {
                    add(*v, &|gv| {
                        for o in 0..*outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            for (x, y) in gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::GatherRows {
                input,
                indices,
                row_len,
            } => {
                add(*input, &|ga| {
                    for (r, &i) in indices.iter().enumerate() {
                        let src = &g[r * row_len..(r + 1) * row_len];
                        for (x, y) in ga[i * row_len..(i + 1) * row_len].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Select { input, indices } => {
                add(*input, &|ga| {
                    for (r, &i) in indices.iter().enumerate() {
                        ga[i] += g[r];
                    }
                });
            }
            Op::L2Norm(a) => {
                let c = self.last_dim(*a);
                let av = self.value(*a);
                let out = &node.value;
                add(*a, &|ga| {
                    for r in 0..out.len() {
                        if out[r] == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            ga[r * c + j] += g[r] * av[r * c + j] / out[r];
                        }
                    }
                });
            }
            Op::Custom(a, vjp) => {
                let delta = vjp(g);
                add(*a, &|ga| ga.iter_mut().zip(&delta).for_each(|(x, y)| *x += y));
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
