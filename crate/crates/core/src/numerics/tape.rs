//! Dynamic reverse-mode tape.
//!
//! Every primitive appends one node holding its output value plus whatever
//! activations its backward rule needs. Node order is creation order, so it
//! is already topological; [`Tape::backward`] walks it once in reverse and
//! then frees every non-leaf value.

use super::kernels::{self, Layout};
use super::tensor::ensure_finite;
use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Silu,
    EluPlusOne,
    Scale(f64),
    /// Pass-through gradient strictly inside `(lo, hi)`, zero outside.
    Clamp {
        lo: f64,
        hi: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// A fused primitive whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (same order as recorded), `None` for
    /// inputs that receive no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    SoftmaxRows {
        input: Var,
    },
    RmsNorm {
        input: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Unary(..) => "unary",
            Op::Binary(..) => "binary",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// The recorded computation graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    /// Registers an input. It is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let tracked = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracked)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    /// Gradient stored on a leaf by [`Tape::backward`].
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].value.grad()
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Vec<f64>> {
        self.nodes[var.0].value.take_grad()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var, NumericsError> {
        if self.consumed {
            return Err(NumericsError::Usage(
                "tape already consumed by backward".into(),
            ));
        }
        ensure_finite(op.name(), value.data())?;
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        Ok(self.push(value, op, tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = kernels::matmul(m, k, n, self.value(a).data(), self.value(b).data());
        let value = Tensor::new(vec![m, n], out)?;
        self.record(Op::Matmul(a, b), value, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.value(a).dims2()?;
        let data = transpose(r, c, self.value(a).data());
        let value = Tensor::new(vec![c, r], data)?;
        self.record(Op::Transpose(a), value, &[a])
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if let UnaryOp::Log = op {
            if let Some(i) = x.data().iter().position(|v| *v <= 0.0) {
                return Err(NumericsError::Domain {
                    op: "log",
                    detail: format!("non-positive input {} at index {i}", x.data()[i]),
                });
            }
        }
        let f: fn(f64, UnaryOp) -> f64 = |v, op| match op {
            UnaryOp::Neg => -v,
            UnaryOp::Exp => v.exp(),
            UnaryOp::Log => v.ln(),
            UnaryOp::Sigmoid => kernels::sigmoid(v),
            UnaryOp::Silu => kernels::silu(v),
            UnaryOp::EluPlusOne => kernels::elu_plus_one(v),
            UnaryOp::Scale(c) => c * v,
            UnaryOp::Clamp { lo, hi } => v.clamp(lo, hi),
        };
        let data = x.data().iter().map(|&v| f(v, op)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.record(Op::Unary(op, a), value, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnaryOp::Silu, a)
    }

    pub fn elu_plus_one(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnaryOp::EluPlusOne, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.unary(UnaryOp::Scale(c), a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, NumericsError> {
        self.unary(UnaryOp::Clamp { lo, hi }, a)
    }

    /// Elementwise binary op. Shapes must match, or one side must hold a
    /// single element, which is broadcast.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        let f = |p: f64, q: f64| match op {
            BinaryOp::Add => p + q,
            BinaryOp::Sub => p - q,
            BinaryOp::Mul => p * q,
        };
        let (shape, data): (Vec<usize>, Vec<f64>) = if x.shape() == y.shape() {
            let d = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| f(*p, *q))
                .collect();
            (x.shape().to_vec(), d)
        } else if y.numel() == 1 {
            let q = y.data()[0];
            (
                x.shape().to_vec(),
                x.data().iter().map(|p| f(*p, q)).collect(),
            )
        } else if x.numel() == 1 {
            let p = x.data()[0];
            (
                y.shape().to_vec(),
                y.data().iter().map(|q| f(p, *q)).collect(),
            )
        } else {
            return Err(NumericsError::ShapeMismatch {
                op: "elementwise",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        };
        let value = Tensor::new(shape, data)?;
        self.record(Op::Binary(op, a, b), value, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// Row softmax of a rank-2 tensor; `causal` zeroes weights for `j > i`.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let (m, n) = x.dims2()?;
        let mut out = x.data().to_vec();
        for (i, row) in out.chunks_exact_mut(n).enumerate() {
            let valid = if causal { (i + 1).min(n) } else { n };
            kernels::softmax_in_place(row, valid);
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.record(Op::SoftmaxRows { input: a }, value, &[a])
    }

    /// `x ⊙ gain / sqrt(mean(x²) + eps)` along the last dimension.
    pub fn rms_norm(&mut self, a: Var, gain: Var, eps: f64) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let g = self.value(gain);
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 || g.shape() != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "rms_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let inv_rms: Vec<f64> = x
            .data()
            .chunks_exact(d)
            .map(|r| kernels::inv_rms(r, eps))
            .collect();
        let out = kernels::rms_norm_rows(x.data(), g.data(), eps);
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.record(
            Op::RmsNorm {
                input: a,
                gain,
                inv_rms,
            },
            value,
            &[a, gain],
        )
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(table);
        let (rows, d) = t.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::Index {
                    op: "gather",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.record(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value,
            &[table],
        )
    }

    /// Mean cross-entropy of `logits` rows against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let l = self.value(logits);
        let (r, v) = l.dims2()?;
        if targets.len() != r || r == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![r, v],
                rhs: vec![targets.len()],
            });
        }
        let mut probs = l.data().to_vec();
        let mut total = 0.0;
        for (i, (row, &t)) in probs.chunks_exact_mut(v).zip(targets).enumerate() {
            if t >= v {
                return Err(NumericsError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            total += kernels::log_sum_exp(l.row(i)) - l.row(i)[t];
            kernels::softmax_in_place(row, v);
        }
        let value = Tensor::scalar(total / r as f64);
        self.record(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            value,
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).data().iter().sum();
        self.record(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    /// Records a fused op whose forward `output` the caller already computed.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<Var, NumericsError> {
        self.record(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            output,
            inputs,
        )
    }

    /// Populates `grad` on every tracked leaf reachable from `loss`, then
    /// frees all intermediate values. The tape cannot be extended afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.consumed {
            return Err(NumericsError::Usage(
                "backward called twice on one tape".into(),
            ));
        }
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(NumericsError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.tracked {
            return Err(NumericsError::Usage(
                "backward on a value that does not depend on any tracked leaf".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &node.value;
            let mut acc = |var: Var, delta: Vec<f64>| {
                if !self.nodes[var.0].tracked {
                    return;
                }
                match &mut grads[var.0] {
                    Some(existing) => {
                        for (e, d) in existing.iter_mut().zip(&delta) {
                            *e += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Matmul(a, b) => {
                    let (m, k) = self.nodes[a.0].value.dims2()?;
                    let n = out.shape()[1];
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    if self.nodes[a.0].tracked {
                        let mut da = vec![0.0; m * k];
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g,
                            Layout::Normal,
                            bv,
                            Layout::Transposed,
                            &mut da,
                            false,
                        );
                        acc(*a, da);
                    }
                    if self.nodes[b.0].tracked {
                        let mut db = vec![0.0; k * n];
                        kernels::gemm(
                            k,
                            m,
                            n,
                            av,
                            Layout::Transposed,
                            &g,
                            Layout::Normal,
                            &mut db,
                            false,
                        );
                        acc(*b, db);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = out.dims2()?;
                    acc(*a, transpose(r, c, &g));
                }
                Op::Unary(op, a) => {
                    let x = self.nodes[a.0].value.data();
                    let y = out.data();
                    let d: Vec<f64> = match *op {
                        UnaryOp::Neg => g.iter().map(|v| -v).collect(),
                        UnaryOp::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                        UnaryOp::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                        UnaryOp::Sigmoid => {
                            g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()
                        }
                        UnaryOp::Silu => g
                            .iter()
                            .zip(x)
                            .map(|(g, x)| g * kernels::silu_grad(*x))
                            .collect(),
                        UnaryOp::EluPlusOne => g
                            .iter()
                            .zip(x)
                            .map(|(g, x)| g * kernels::elu_plus_one_grad(*x))
                            .collect(),
                        UnaryOp::Scale(c) => g.iter().map(|v| c * v).collect(),
                        UnaryOp::Clamp { lo, hi } => g
                            .iter()
                            .zip(x)
                            .map(|(g, x)| if *x > lo && *x < hi { *g } else { 0.0 })
                            .collect(),
                    };
                    acc(*a, d);
                }
                Op::Binary(op, a, b) => {
                    let xa = self.nodes[a.0].value.data();
                    let xb = self.nodes[b.0].value.data();
                    let n = g.len();
                    let pick = |x: &[f64], j: usize| if x.len() == 1 { x[0] } else { x[j] };
                    let reduce = |len: usize, d: Vec<f64>| {
                        if len == 1 && n != 1 {
                            vec![d.iter().sum()]
                        } else {
                            d
                        }
                    };
                    let (da, db): (Vec<f64>, Vec<f64>) = match op {
                        BinaryOp::Add => (g.clone(), g.clone()),
                        BinaryOp::Sub => (g.clone(), g.iter().map(|v| -v).collect()),
                        BinaryOp::Mul => (
                            (0..n).map(|j| g[j] * pick(xb, j)).collect(),
                            (0..n).map(|j| g[j] * pick(xa, j)).collect(),
                        ),
                    };
                    let (la, lb) = (xa.len(), xb.len());
                    acc(*a, reduce(la, da));
                    acc(*b, reduce(lb, db));
                }
                Op::SoftmaxRows { input } => {
                    let n = out.shape()[1];
                    let mut d = vec![0.0; g.len()];
                    for ((dr, yr), gr) in d
                        .chunks_exact_mut(n)
                        .zip(out.data().chunks_exact(n))
                        .zip(g.chunks_exact(n))
                    {
                        let s = kernels::dot(gr, yr);
                        for ((dv, y), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv = y * (gv - s);
                        }
                    }
                    acc(*input, d);
                }
                Op::RmsNorm {
                    input,
                    gain,
                    inv_rms,
                } => {
                    let x = self.nodes[input.0].value.data();
                    let gw = self.nodes[gain.0].value.data();
                    let d = gw.len();
                    let mut dx = vec![0.0; x.len()];
                    let mut dgain = vec![0.0; d];
                    for (((xr, gr), dxr), &r) in x
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(dx.chunks_exact_mut(d))
                        .zip(inv_rms)
                    {
                        let mut s = 0.0;
                        for j in 0..d {
                            s += gr[j] * gw[j] * xr[j];
                            dgain[j] += gr[j] * xr[j] * r;
                        }
                        let c = s * r * r * r / d as f64;
                        for j in 0..d {
                            dxr[j] = r * gw[j] * gr[j] - xr[j] * c;
                        }
                    }
                    acc(*input, dx);
                    acc(*gain, dgain);
                }
                Op::Gather { table, ids } => {
                    let t = &self.nodes[table.0].value;
                    let d = t.shape()[1];
                    let mut dt = vec![0.0; t.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, b) in dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                        {
                            *a += b;
                        }
                    }
                    acc(*table, dt);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let v = self.nodes[logits.0].value.shape()[1];
                    let scale = g[0] / targets.len() as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * v + t] -= scale;
                    }
                    acc(*logits, d);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.numel();
                    acc(*a, vec![g[0]; n]);
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Tensor> =
                        inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let ds = op.backward(&vals, out, &g);
                    debug_assert_eq!(ds.len(), inputs.len());
                    for (v, d) in inputs.iter().zip(ds) {
                        if let Some(d) = d {
                            debug_assert_eq!(
                                d.len(),
                                self.nodes[v.0].value.numel(),
                                "{}",
                                op.name()
                            );
                            acc(*v, d);
                        }
                    }
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            match node.op {
                Op::Leaf => {
                    if node.tracked {
                        if let Some(Some(g)) = grads.get_mut(i).map(Option::take) {
                            node.value.set_grad(g);
                        } else {
                            node.value.set_grad(vec![0.0; node.value.numel()]);
                        }
                    }
                }
                _ => {
                    node.value = Tensor::zeros(&[0]);
                    node.op = Op::Leaf;
                    node.tracked = false;
                }
            }
        }
        self.consumed = true;
        Ok(())
    }
}

pub(crate) fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = x[i * c + j];
        }
    }
    t
}
