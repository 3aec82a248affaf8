use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::gemm::gemm;
use super::{invalid, Result, Tensor, TensorError};

/// Sentinel in a gather index meaning "emit zero".
pub(crate) const GATHER_ZERO: usize = usize::MAX;

const DEFAULT_NODE_LIMIT: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Tanh(usize),
    Sqrt(usize),
    Exp(usize),
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Sum(usize),
    SumAxis {
        a: usize,
        axis: usize,
    },
    Reshape(usize),
    Gather {
        a: usize,
        index: Rc<[usize]>,
    },
    Bilinear {
        grid: usize,
        coords: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Single-threaded record of primitive operations.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    limit: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_limit(DEFAULT_NODE_LIMIT)
    }

    /// A tape that refuses to record more than `limit` nodes.
    pub fn with_limit(limit: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            limit,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tracked leaf; its adjoint is reported by [`Tape::backward`].
    pub fn param(&self, value: &Tensor) -> Result<Var<'_>> {
        self.leaf(value.clone(), true)
    }

    /// Registers an untracked leaf.
    pub fn constant(&self, value: &Tensor) -> Result<Var<'_>> {
        self.leaf(value.clone(), false)
    }

    pub fn constant_owned(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Result<Var<'_>> {
        self.leaf(Tensor::scalar(value), false)
    }

    fn leaf(&self, value: Tensor, tracked: bool) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.push_node(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            tracked,
        })
    }

    fn push_node(&self, node: Node) -> Result<Var<'_>> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes.len() >= self.limit {
            return Err(TensorError::TapeExhausted { limit: self.limit });
        }
        nodes.push(node);
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn record(&self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let tracked = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].tracked)
        };
        let op = if tracked { op } else { Op::Leaf };
        self.push_node(Node {
            value: Rc::new(value),
            op,
            tracked,
        })
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn value(&self, id: NodeId) -> Rc<Tensor> {
        self.value_of(id.0)
    }

    /// Concatenates `parts` along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?
            .value();
        let nd = first.ndim();
        if axis >= nd {
            return Err(invalid("concat", format!("axis {axis} out of range for rank {nd}")));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values[1..] {
            let ok = v.ndim() == nd
                && (0..nd).all(|d| d == axis || v.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.record(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Reverse pass from a scalar `loss`. Does not consume the tape, so calling
    /// it twice yields identical adjoints.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 || root.value.shape().iter().any(|&d| d != 1) {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.tracked {
            return Err(TensorError::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let mut out = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let out_val = &node.value;
            let mut acc = |target: usize, contrib: Vec<f64>| {
                if !nodes[target].tracked {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(&contrib) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |i: usize| nodes[i].value.clone();
            match &node.op {
                Op::Leaf => {
                    out.insert(id, Tensor::new(out_val.shape().to_vec(), g)?);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|v| -v).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let da = g.iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                    let db = g.iter().zip(av.data()).map(|(g, a)| g * a).collect();
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let da = g.iter().zip(bv.data()).map(|(g, b)| g / b).collect();
                    let db = g
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect();
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
                Op::Offset(a) => acc(*a, g),
                Op::Tanh(a) => {
                    let d = g
                        .iter()
                        .zip(out_val.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    acc(*a, d);
                }
                Op::Sqrt(a) => {
                    // subgradient 0 at the origin
                    let d = g
                        .iter()
                        .zip(out_val.data())
                        .map(|(g, y)| if *y == 0.0 { 0.0 } else { g * 0.5 / y })
                        .collect();
                    acc(*a, d);
                }
                Op::Exp(a) => {
                    let d = g.iter().zip(out_val.data()).map(|(g, y)| g * y).collect();
                    acc(*a, d);
                }
                &Op::MatMul {
                    a,
                    b,
                    trans_b,
                    shared_b,
                    batch,
                    m,
                    k,
                    n,
                } => {
                    let (av, bv) = (val(a), val(b));
                    let (ad, bd) = (av.data(), bv.data());
                    let mut da = vec![0.0; ad.len()];
                    let mut db = vec![0.0; bd.len()];
                    let (bsz, rows) = if shared_b { (1, batch * m) } else { (batch, m) };
                    for i in 0..bsz {
                        let gs = &g[i * rows * n..(i + 1) * rows * n];
                        let a_s = &ad[i * rows * k..(i + 1) * rows * k];
                        let b_s = &bd[i * k * n..(i + 1) * k * n];
                        let da_s = &mut da[i * rows * k..(i + 1) * rows * k];
                        if trans_b {
                            // C = A·Bᵀ with B stored n×k
                            gemm(rows, n, k, gs, false, b_s, false, da_s, false);
                            let db_s = &mut db[i * k * n..(i + 1) * k * n];
                            gemm(n, rows, k, gs, true, a_s, false, db_s, true);
                        } else {
                            gemm(rows, n, k, gs, false, b_s, true, da_s, false);
                            let db_s = &mut db[i * k * n..(i + 1) * k * n];
                            gemm(k, rows, n, a_s, true, gs, false, db_s, true);
                        }
                    }
                    acc(a, da);
                    acc(b, db);
                }
                Op::Softmax(a) => {
                    let y = out_val.data();
                    let width = *out_val.shape().last().unwrap_or(&1);
                    let mut d = vec![0.0; y.len()];
                    if width > 0 {
                        for ((ys, gs), ds) in y
                            .chunks(width)
                            .zip(g.chunks(width))
                            .zip(d.chunks_mut(width))
                        {
                            let s: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                            for ((dv, yv), gv) in ds.iter_mut().zip(ys).zip(gs) {
                                *dv = yv * (gv - s);
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::Concat { inputs, axis } => {
                    let shape = out_val.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis];
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = nodes[inp].value.shape()[*axis];
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            part.extend_from_slice(&g[start..start + len * inner]);
                        }
                        offset += len;
                        acc(inp, part);
                    }
                }
                &Op::Slice { a, axis, start } => {
                    let src = val(a);
                    let shape = src.shape();
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let len = out_val.shape()[axis];
                    let mut d = vec![0.0; src.len()];
                    for o in 0..outer {
                        let dst = (o * shape[axis] + start) * inner;
                        d[dst..dst + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(a, d);
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.len();
                    acc(*a, vec![g[0]; n]);
                }
                &Op::SumAxis { a, axis } => {
                    let src = val(a);
                    let shape = src.shape();
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let len = shape[axis];
                    let mut d = vec![0.0; src.len()];
                    for o in 0..outer {
                        for j in 0..len {
                            let dst = (o * len + j) * inner;
                            d[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                        }
                    }
                    acc(a, d);
                }
                Op::Reshape(a) => acc(*a, g),
                Op::Gather { a, index } => {
                    let mut d = vec![0.0; nodes[*a].value.len()];
                    for (gv, &ix) in g.iter().zip(index.iter()) {
                        if ix != GATHER_ZERO {
                            d[ix] += gv;
                        }
                    }
                    acc(*a, d);
                }
                &Op::Bilinear { grid, coords } => {
                    let (gv, cv) = (val(grid), val(coords));
                    let (dg, dc) = bilinear_backward(&gv, &cv, &g);
                    acc(grid, dg);
                    acc(coords, dc);
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Adjoints of tracked leaves produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    /// Adjoint of `var`, zero when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.grads
            .get(&var.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape().to_vec()))
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked")
}

// Fallible ops, so not the std operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        NodeId(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        self.tape
            .record(name, zip_map(&a, &b, f), op(self.id, other.id), &[self.id, other.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |x, y| x / y, Op::Div)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x * c);
        self.tape.record("scale", v, Op::Scale(self.id, c), &[self.id])
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn offset(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x + c);
        self.tape.record("offset", v, Op::Offset(self.id), &[self.id])
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::tanh);
        self.tape.record("tanh", v, Op::Tanh(self.id), &[self.id])
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let src = self.value();
        if src.data().iter().any(|&x| x < 0.0) {
            return Err(TensorError::NonFinite { op: "sqrt" });
        }
        self.tape
            .record("sqrt", src.map(f64::sqrt), Op::Sqrt(self.id), &[self.id])
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::exp);
        self.tape.record("exp", v, Op::Exp(self.id), &[self.id])
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// `[.., m, k] · [k, n]` (shared right operand) or `[B.., m, k] · [B.., k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ`, with `other` shaped `[n, k]` or `[B.., n, k]`.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        let name = if trans_b { "matmul_t" } else { "matmul" };
        let (a, b) = (self.value(), other.value());
        let mismatch = || TensorError::ShapeMismatch {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.ndim() < 2 || b.ndim() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a.shape()[a.ndim() - 2], a.shape()[a.ndim() - 1]);
        let (bk, n) = if trans_b {
            (b.shape()[b.ndim() - 1], b.shape()[b.ndim() - 2])
        } else {
            (b.shape()[b.ndim() - 2], b.shape()[b.ndim() - 1])
        };
        if bk != k {
            return Err(mismatch());
        }
        let lead = &a.shape()[..a.ndim() - 2];
        let batch: usize = lead.iter().product();
        let shared_b = b.ndim() == 2;
        if !shared_b && &b.shape()[..b.ndim() - 2] != lead {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        if shared_b {
            gemm(batch * m, k, n, a.data(), false, b.data(), trans_b, &mut out, false);
        } else {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        self.tape.record(
            name,
            Tensor::new(shape, out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
                shared_b,
                batch,
                m,
                k,
                n,
            },
            &[self.id, other.id],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let src = self.value();
        if src.ndim() == 0 {
            return Err(invalid("softmax", "needs at least one axis"));
        }
        let width = src.shape()[src.ndim() - 1];
        let mut out = src.data().to_vec();
        if width > 0 {
            for row in out.chunks_mut(width) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        self.tape.record(
            "softmax",
            Tensor::new(src.shape().to_vec(), out)?,
            Op::Softmax(self.id),
            &[self.id],
        )
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let src = self.value();
        let shape = src.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src.data()[s..s + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.tape.record(
            "slice",
            Tensor::new(out_shape, data)?,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let total = self.value().data().iter().sum();
        self.tape
            .record("sum", Tensor::scalar(total), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len();
        if n == 0 {
            return Err(invalid("mean", "empty input"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let src = self.value();
        let shape = src.shape();
        if axis >= shape.len() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let s = (o * len + j) * inner;
                for (d, v) in data[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(&src.data()[s..s + inner])
                {
                    *d += v;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        self.tape.record(
            "sum_axis",
            Tensor::new(out_shape, data)?,
            Op::SumAxis { a: self.id, axis },
            &[self.id],
        )
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = self.value().shape().get(axis).copied().unwrap_or(0);
        if len == 0 {
            return Err(invalid("mean_axis", format!("axis {axis} is empty or missing")));
        }
        self.sum_axis(axis)?.scale(1.0 / len as f64)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        self.tape.record("reshape", v, Op::Reshape(self.id), &[self.id])
    }

    /// `out[i] = self[index[i]]`, zero where the index is the gather sentinel.
    pub(crate) fn gather(self, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Var<'t>> {
        let src = self.value();
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(invalid("gather", "index length does not match output shape"));
        }
        let mut data = Vec::with_capacity(n);
        for &ix in index.iter() {
            if ix == GATHER_ZERO {
                data.push(0.0);
            } else if ix < src.len() {
                data.push(src.data()[ix]);
            } else {
                return Err(invalid("gather", format!("index {ix} out of bounds {}", src.len())));
            }
        }
        self.tape.record(
            "gather",
            Tensor::new(shape, data)?,
            Op::Gather { a: self.id, index },
            &[self.id],
        )
    }

    /// Numpy-style broadcast of trailing-aligned extents.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let src = self.value();
        let ss = src.shape();
        let mismatch = || TensorError::ShapeMismatch {
            op: "broadcast",
            lhs: ss.to_vec(),
            rhs: shape.to_vec(),
        };
        if ss.len() > shape.len() {
            return Err(mismatch());
        }
        if ss == shape {
            return Ok(self);
        }
        let pad = shape.len() - ss.len();
        let mut src_strides = vec![0usize; shape.len()];
        let strides = Tensor::strides_of(ss);
        for (d, &n) in ss.iter().enumerate() {
            if n != shape[pad + d] && n != 1 {
                return Err(mismatch());
            }
            src_strides[pad + d] = if n == 1 { 0 } else { strides[d] };
        }
        let index = strided_index(shape, &src_strides);
        self.gather(index, shape.to_vec())
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let src = self.value();
        let ss = src.shape();
        let mut seen = vec![false; ss.len()];
        if axes.len() != ss.len() || axes.iter().any(|&a| a >= ss.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("{axes:?} is not a permutation of rank {}", ss.len())));
        }
        let strides = Tensor::strides_of(ss);
        let out_shape: Vec<usize> = axes.iter().map(|&a| ss[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
        let index = strided_index(&out_shape, &src_strides);
        self.gather(index, out_shape)
    }

    /// Bilinear lookup of `grid` (`[H, W, C]`) at continuous index-space
    /// positions `coords` (`[.., 2]`); integer positions hit cell centers,
    /// samples outside the grid read zero.
    pub fn bilinear_sample(grid: Var<'t>, coords: Var<'t>) -> Result<Var<'t>> {
        let (gv, cv) = (grid.value(), coords.value());
        if gv.ndim() != 3 || cv.ndim() == 0 || cv.shape()[cv.ndim() - 1] != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_sample",
                lhs: gv.shape().to_vec(),
                rhs: cv.shape().to_vec(),
            });
        }
        let out = bilinear_forward(&gv, &cv);
        grid.tape.record(
            "bilinear_sample",
            out,
            Op::Bilinear {
                grid: grid.id,
                coords: coords.id,
            },
            &[grid.id, coords.id],
        )
    }
}

fn strided_index(shape: &[usize], src_strides: &[usize]) -> Rc<[usize]> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; shape.len()];
    for _ in 0..n {
        out.push(counter.iter().zip(src_strides).map(|(c, s)| c * s).sum());
        for d in (0..shape.len()).rev() {
            counter[d] += 1;
            if counter[d] < shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    out.into()
}

struct Corner {
    offset: Option<usize>,
    weight: f64,
}

/// Four bilinear taps with their weights and partial derivatives.
fn taps(h: usize, w: usize, c: usize, x: f64, y: f64) -> [(Corner, f64, f64); 4] {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let cell = |dx: i64, dy: i64| -> Option<usize> {
        let (i, j) = (x0 as i64 + dx, y0 as i64 + dy);
        (i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w).then(|| (i as usize * w + j as usize) * c)
    };
    [
        (Corner { offset: cell(0, 0), weight: (1.0 - fx) * (1.0 - fy) }, -(1.0 - fy), -(1.0 - fx)),
        (Corner { offset: cell(1, 0), weight: fx * (1.0 - fy) }, 1.0 - fy, -fx),
        (Corner { offset: cell(0, 1), weight: (1.0 - fx) * fy }, -fy, 1.0 - fx),
        (Corner { offset: cell(1, 1), weight: fx * fy }, fy, fx),
    ]
}

fn bilinear_forward(grid: &Tensor, coords: &Tensor) -> Tensor {
    let (h, w, c) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let q = coords.len() / 2;
    let mut out = vec![0.0; q * c];
    for i in 0..q {
        let (x, y) = (coords.data()[2 * i], coords.data()[2 * i + 1]);
        let dst = &mut out[i * c..(i + 1) * c];
        for (corner, _, _) in taps(h, w, c, x, y) {
            if let Some(off) = corner.offset {
                for (d, g) in dst.iter_mut().zip(&grid.data()[off..off + c]) {
                    *d += corner.weight * g;
                }
            }
        }
    }
    let mut shape = coords.shape()[..coords.ndim() - 1].to_vec();
    shape.push(c);
    Tensor::new(shape, out).expect("consistent bilinear shape")
}

fn bilinear_backward(grid: &Tensor, coords: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (h, w, c) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let q = coords.len() / 2;
    let mut dgrid = vec![0.0; grid.len()];
    let mut dcoords = vec![0.0; coords.len()];
    for i in 0..q {
        let (x, y) = (coords.data()[2 * i], coords.data()[2 * i + 1]);
        let gi = &g[i * c..(i + 1) * c];
        for (corner, dwdx, dwdy) in taps(h, w, c, x, y) {
            if let Some(off) = corner.offset {
                let cell = &grid.data()[off..off + c];
                let dot: f64 = cell.iter().zip(gi).map(|(a, b)| a * b).sum();
                dcoords[2 * i] += dwdx * dot;
                dcoords[2 * i + 1] += dwdy * dot;
                for (d, gv) in dgrid[off..off + c].iter_mut().zip(gi) {
                    *d += corner.weight * gv;
                }
            }
        }
    }
    (dgrid, dcoords)
}
