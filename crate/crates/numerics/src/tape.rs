//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends a node holding its inputs and output value; the
//! node order is therefore topological. Under a reduced [`PrecisionMode`]
//! leaf values, primitive outputs and backward accumulations are all
//! rounded, which emulates low-precision training end to end.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{NumericsError, Result};
use crate::kernels;
use crate::precision::{quantize, PrecisionMode};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Identifier of a differentiable leaf, in registration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Constant,
    Parameter(ParamId),
    /// Registered like a parameter but never receives gradient.
    Frozen(ParamId),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf(LeafKind),
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Mean(usize),
    Relu(usize),
    Softmax(usize),
    Log(usize),
    Gather(usize, Vec<usize>),
    Reshape(usize),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Mean(_) => "mean",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::Log(_) => "log",
            Op::Gather(..) => "gather",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    precision: PrecisionMode,
    nodes: Vec<Node>,
    leaves: Vec<usize>,
}

/// Gradients of one scalar output with respect to every registered leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.by_param.iter()
    }

    pub fn into_map(self) -> BTreeMap<ParamId, Tensor> {
        self.by_param
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(PrecisionMode::EXACT)
    }

    pub fn with_precision(precision: PrecisionMode) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            precision,
            nodes: Vec::new(),
            leaves: Vec::new(),
        }
    }

    pub fn precision(&self) -> PrecisionMode {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ops(&self) -> impl Iterator<Item = &Op> {
        self.nodes.iter().map(|n| &n.op)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let value = quantize(&value, self.precision);
        self.nodes.push(Node { op, value });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(NumericsError::ForeignVar);
        }
        Ok(v.index)
    }

    fn leaf(&mut self, value: Tensor, kind: impl FnOnce(ParamId) -> LeafKind) -> Var {
        let id = ParamId(self.leaves.len());
        let kind = kind(id);
        let var = self.push(Op::Leaf(kind), value);
        if kind != LeafKind::Constant {
            self.leaves.push(var.index);
        }
        var
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, |_| LeafKind::Constant)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Parameter)
    }

    /// A leaf that is tracked for reporting but is excluded from
    /// differentiation; its gradient is always reported as zeros.
    pub fn frozen(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Frozen)
    }

    pub fn param_id(&self, v: Var) -> Option<ParamId> {
        let i = self.index(v).ok()?;
        match self.nodes[i].op {
            Op::Leaf(LeafKind::Parameter(id)) | Op::Leaf(LeafKind::Frozen(id)) => Some(id),
            _ => None,
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = kernels::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(Op::MatMul(ia, ib), out))
    }

    /// Elementwise sum; `b` may broadcast when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = kernels::elementwise(
            "add",
            &self.nodes[ia].value,
            &self.nodes[ib].value,
            |x, y| x + y,
        )?;
        Ok(self.push(Op::Add(ia, ib), out))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = kernels::elementwise(
            "mul",
            &self.nodes[ia].value,
            &self.nodes[ib].value,
            |x, y| x * y,
        )?;
        Ok(self.push(Op::Mul(ia, ib), out))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = kernels::mean(&self.nodes[ia].value);
        Ok(self.push(Op::Mean(ia), out))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.nodes[ia].value.map(|x| if x > 0.0 { x } else { 0.0 });
        Ok(self.push(Op::Relu(ia), out))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = kernels::softmax(&self.nodes[ia].value);
        Ok(self.push(Op::Softmax(ia), out))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.nodes[ia].value.map(f64::ln);
        Ok(self.push(Op::Log(ia), out))
    }

    /// Picks `a[i, indices[i]]` from each row (last axis), dropping that axis.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let out = kernels::gather(&self.nodes[ia].value, indices)?;
        Ok(self.push(Op::Gather(ia, indices.to_vec()), out))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.nodes[ia].value.reshape(shape)?;
        Ok(self.push(Op::Reshape(ia), out))
    }

    // Composites built from the primitives above.

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let s = self.scalar(factor);
        self.mul(a, s)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a)?.len() as f64;
        let m = self.mean(a)?;
        self.scale(m, n)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Mean squared difference between two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Backpropagate from the scalar `output` to every registered leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.index(output)?;
        let out_value = &self.nodes[out].value;
        if !out_value.is_scalar() {
            return Err(NumericsError::NotScalar(out_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out + 1];
        grads[out] = Some(vec![1.0]);
        let p = self.precision;

        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf(_) => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let (ad, bd) = (av.data(), bv.data());
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..n {
                            let gv = g[r * n + c];
                            for q in 0..k {
                                ga[r * k + q] += gv * bd[q * n + c];
                                gb[q * n + c] += ad[r * k + q] * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga, p);
                    accumulate(&mut grads, *b, gb, p);
                }
                Op::Add(a, b) => {
                    let gb = reduce_broadcast(&g, self.nodes[*b].value.len());
                    accumulate(&mut grads, *a, g, p);
                    accumulate(&mut grads, *b, gb, p);
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    let nb = bd.len();
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(j, gv)| gv * bd[j % nb])
                        .collect();
                    let full: Vec<f64> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
                    let gb = reduce_broadcast(&full, nb);
                    accumulate(&mut grads, *a, ga, p);
                    accumulate(&mut grads, *b, gb, p);
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len();
                    let share = g[0] / n as f64;
                    accumulate(&mut grads, *a, vec![share; n], p);
                }
                Op::Relu(a) => {
                    let ad = self.nodes[*a].value.data();
                    let ga = g
                        .iter()
                        .zip(ad)
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, ga, p);
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let (r, w) = kernels::rows(node.value.shape());
                    let mut ga = vec![0.0; y.len()];
                    for row in 0..r {
                        let span = row * w..(row + 1) * w;
                        let dot: f64 = g[span.clone()]
                            .iter()
                            .zip(&y[span.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in span {
                            ga[j] = y[j] * (g[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga, p);
                }
                Op::Log(a) => {
                    let ad = self.nodes[*a].value.data();
                    let ga = g.iter().zip(ad).map(|(gv, x)| gv / x).collect();
                    accumulate(&mut grads, *a, ga, p);
                }
                Op::Gather(a, indices) => {
                    let (_, w) = kernels::rows(self.nodes[*a].value.shape());
                    let mut ga = vec![0.0; self.nodes[*a].value.len()];
                    for (row, &idx) in indices.iter().enumerate() {
                        ga[row * w + idx] += g[row];
                    }
                    accumulate(&mut grads, *a, ga, p);
                }
                Op::Reshape(a) => {
                    accumulate(&mut grads, *a, g, p);
                }
            }
        }

        let mut by_param = BTreeMap::new();
        for &leaf in &self.leaves {
            let value = &self.nodes[leaf].value;
            let (id, data) = match self.nodes[leaf].op {
                Op::Leaf(LeafKind::Parameter(id)) => {
                    let data = if leaf <= out {
                        grads[leaf].take()
                    } else {
                        None
                    };
                    (id, data.unwrap_or_else(|| vec![0.0; value.len()]))
                }
                Op::Leaf(LeafKind::Frozen(id)) => (id, vec![0.0; value.len()]),
                _ => continue,
            };
            by_param.insert(id, Tensor::from_parts(value.shape().to_vec(), data));
        }
        Ok(Gradients { by_param })
    }

    /// Recompute every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf(_) => node.value.clone(),
                Op::MatMul(a, b) => kernels::matmul(&values[*a], &values[*b])?,
                Op::Add(a, b) => {
                    kernels::elementwise("add", &values[*a], &values[*b], |x, y| x + y)?
                }
                Op::Mul(a, b) => {
                    kernels::elementwise("mul", &values[*a], &values[*b], |x, y| x * y)?
                }
                Op::Mean(a) => kernels::mean(&values[*a]),
                Op::Relu(a) => values[*a].map(|x| if x > 0.0 { x } else { 0.0 }),
                Op::Softmax(a) => kernels::softmax(&values[*a]),
                Op::Log(a) => values[*a].map(f64::ln),
                Op::Gather(a, idx) => kernels::gather(&values[*a], idx)?,
                Op::Reshape(a) => values[*a].reshape(node.value.shape())?,
            };
            values.push(quantize(&v, self.precision));
        }
        Ok(values)
    }

    /// Whether replaying the tape reproduces every recorded value bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let replayed = self.replay()?;
        Ok(replayed
            .iter()
            .zip(&self.nodes)
            .all(|(r, n)| r.bit_eq(&n.value)))
    }
}

fn reduce_broadcast(g: &[f64], target_len: usize) -> Vec<f64> {
    if g.len() == target_len {
        return g.to_vec();
    }
    let mut out = vec![0.0; target_len];
    for (j, v) in g.iter().enumerate() {
        out[j % target_len] += v;
    }
    out
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    target: usize,
    mut g: Vec<f64>,
    precision: PrecisionMode,
) {
    precision.quantize_slice(&mut g);
    match &mut grads[target] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(&g) {
                *e += v;
            }
            precision.quantize_slice(existing);
        }
        slot @ None => *slot = Some(g),
    }
}
