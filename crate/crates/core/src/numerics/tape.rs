//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation on a [`Var`]
//! evaluates eagerly and appends a node; [`Var::backward`] walks the nodes in
//! reverse insertion order, which is a valid topological order because every
//! node only references earlier ones.

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use super::ops::{
    gelu_derivative, gelu_scalar, layer_norm_row_in_place, log_softmax_row_in_place, matmul_at_kernel,
    matmul_bt_kernel, matmul_kernel, sigmoid, softmax_row_in_place, GeluMode,
};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MulScalarVar(usize, usize),
    Gelu(usize, GeluMode),
    Sigmoid(usize),
    Relu(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows { x: usize, inv_std: Vec<T> },
    L2NormalizeRows { x: usize, eps: T, norms: Vec<T> },
    Sum(usize),
    Mean(usize),
    Diag(usize),
    GatherRows { x: usize, index: Vec<usize> },
    ConcatRows(Vec<usize>),
    SegmentMean { x: usize, group: usize },
    SegmentMax { x: usize, argmax: Vec<usize> },
    HardestNegative { x: usize, argmax: Vec<usize> },
    Attention(Box<AttentionSaved<T>>),
    Reshape(usize),
}

struct AttentionSaved<T> {
    q: usize,
    k: usize,
    v: usize,
    group: usize,
    heads: usize,
    probs: Vec<T>,
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, usize)>,
}

/// Recording context for one forward pass.
#[derive(Clone)]
pub struct Tape<T> {
    inner: Rc<RefCell<Inner<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var<T> {
    tape: Tape<T>,
    id: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Inner {
                nodes: Vec::new(),
                params: Vec::new(),
            })),
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var<T> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, t: &Tensor<T>) -> Var<T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Records a leaf that receives a gradient when `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a named trainable leaf; [`Grads::named`] reports its gradient.
    pub fn param(&self, name: impl Into<String>, t: &Tensor<T>) -> Var<T> {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.inner.borrow_mut().params.push((name.into(), v.id));
        v
    }

    pub fn scalar(&self, value: T) -> Var<T> {
        self.constant(&Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hash of every discrete decision taken during the forward pass: argmax
    /// selections and the sign pattern of hinge inputs. Two evaluations with the
    /// same signature lie on the same smooth piece of a piecewise function.
    pub fn branch_signature(&self) -> u64 {
        let inner = self.inner.borrow();
        let mut h = DefaultHasher::new();
        for node in &inner.nodes {
            match &node.op {
                Op::SegmentMax { argmax, .. } | Op::HardestNegative { argmax, .. } => argmax.hash(&mut h),
                Op::Relu(x) => {
                    for v in &inner.nodes[*x].value {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Registered trainable parameter names, in registration order.
    pub fn param_names(&self) -> Vec<String> {
        self.inner.borrow().params.iter().map(|(n, _)| n.clone()).collect()
    }
}

/// Gradients produced by one backward pass.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, usize)>,
}

impl<T: Scalar> Grads<T> {
    /// `None` when the loss does not depend on `v` or `v` is a constant.
    pub fn get(&self, v: &Var<T>) -> Option<Tensor<T>> {
        let g = self.grads.get(v.id)?.as_ref()?;
        Tensor::new(self.shapes[v.id].clone(), g.clone()).ok()
    }

    pub fn get_slice(&self, v: &Var<T>) -> Option<&[T]> {
        self.grads.get(v.id)?.as_deref()
    }

    /// Gradient of the parameter registered under `name`.
    pub fn named(&self, name: &str) -> Option<&[T]> {
        let (_, id) = self.params.iter().find(|(n, _)| n == name)?;
        self.grads[*id].as_deref()
    }

    /// Populates `target.grad` with the gradient of `v`, replacing any previous
    /// gradient unless `accumulate`. Leaves the target untouched when `v` has no
    /// gradient.
    pub fn write(&self, v: &Var<T>, target: &mut Tensor<T>, accumulate: bool) -> Result<()> {
        match self.get_slice(v) {
            Some(g) => target.set_grad(g, accumulate),
            None => {
                if !accumulate {
                    target.clear_grad();
                }
                Ok(())
            }
        }
    }
}

/// Runs a backward pass from `loss` and writes `∂loss/∂leaf` into each paired
/// tensor.
pub fn grad<T: Scalar>(loss: &Var<T>, leaves: &mut [(&Var<T>, &mut Tensor<T>)], accumulate: bool) -> Result<()> {
    let grads = loss.backward()?;
    for (v, t) in leaves.iter_mut() {
        grads.write(v, t, accumulate)?;
    }
    Ok(())
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, a, b));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n, m] => Ok((*n, *m)),
        _ => Err(Error::Shape(format!("{op} needs a matrix, got {shape:?}"))),
    }
}

impl<T: Scalar> Var<T> {
    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn value(&self) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node holds a consistent tensor")
    }

    pub fn item(&self) -> Result<T> {
        self.value().item()
    }

    fn needs_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs_grad
    }

    fn with<R>(&self, f: impl FnOnce(&Node<T>) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id])
    }

    fn unary(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var<T> {
        let ng = self.needs_grad();
        self.tape.push(shape, value, op, ng)
    }

    fn binary(&self, other: &Var<T>, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var<T> {
        let ng = self.needs_grad() || other.needs_grad();
        self.tape.push(shape, value, op, ng)
    }

    pub fn matmul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        {
            let inner = self.tape.inner.borrow();
            matmul_kernel(&inner.nodes[self.id].value, &inner.nodes[rhs.id].value, &mut out, n, k, m);
        }
        Ok(self.binary(rhs, vec![n, m], out, Op::MatMul(self.id, rhs.id)))
    }

    pub fn transpose(&self) -> Result<Var<T>> {
        let t = self.value().transpose()?;
        Ok(self.unary(t.shape().to_vec(), t.into_data(), Op::Transpose(self.id)))
    }

    fn zip_with(&self, rhs: &Var<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.id], &inner.nodes[rhs.id]);
        check_same(name, &a.shape, &b.shape)?;
        Ok(a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let v = self.zip_with(rhs, "add", |a, b| a + b)?;
        Ok(self.binary(rhs, self.shape(), v, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let v = self.zip_with(rhs, "sub", |a, b| a - b)?;
        Ok(self.binary(rhs, self.shape(), v, Op::Sub(self.id, rhs.id)))
    }

    pub fn mul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let v = self.zip_with(rhs, "mul", |a, b| a * b)?;
        Ok(self.binary(rhs, self.shape(), v, Op::Mul(self.id, rhs.id)))
    }

    /// `x[n×m] + b[m]` broadcast over rows.
    pub fn add_bias(&self, bias: &Var<T>) -> Result<Var<T>> {
        let (sx, sb) = (self.shape(), bias.shape());
        let (_, m) = matrix_dims("add_bias", &sx)?;
        if sb != [m] {
            return Err(Error::dim("add_bias", &sx, &sb));
        }
        let out = {
            let inner = self.tape.inner.borrow();
            let b = &inner.nodes[bias.id].value;
            inner.nodes[self.id]
                .value
                .chunks(m)
                .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
                .collect()
        };
        Ok(self.binary(bias, sx, out, Op::AddBias(self.id, bias.id)))
    }

    /// `x · W + b`.
    pub fn linear(&self, weight: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        self.matmul(weight)?.add_bias(bias)
    }

    pub fn scale(&self, c: T) -> Var<T> {
        let v = self.with(|n| n.value.iter().map(|&x| x * c).collect());
        self.unary(self.shape(), v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        let v = self.with(|n| n.value.iter().map(|&x| x + c).collect());
        self.unary(self.shape(), v, Op::AddScalar(self.id))
    }

    /// Multiplies every entry by a one-element variable.
    pub fn mul_scalar_var(&self, s: &Var<T>) -> Result<Var<T>> {
        let sv = s.with(|n| n.value.clone());
        if sv.len() != 1 {
            return Err(Error::Shape(format!("mul_scalar_var by shape {:?}", s.shape())));
        }
        let v = self.with(|n| n.value.iter().map(|&x| x * sv[0]).collect());
        Ok(self.binary(s, self.shape(), v, Op::MulScalarVar(self.id, s.id)))
    }

    pub fn gelu(&self, mode: GeluMode) -> Var<T> {
        let v = self.with(|n| n.value.iter().map(|&x| gelu_scalar(x, mode)).collect());
        self.unary(self.shape(), v, Op::Gelu(self.id, mode))
    }

    pub fn sigmoid(&self) -> Var<T> {
        let v = self.with(|n| n.value.iter().map(|&x| sigmoid(x)).collect());
        self.unary(self.shape(), v, Op::Sigmoid(self.id))
    }

    pub fn relu(&self) -> Var<T> {
        let v = self.with(|n| n.value.iter().map(|&x| x.max(T::zero())).collect());
        self.unary(self.shape(), v, Op::Relu(self.id))
    }

    pub fn softmax_rows(&self) -> Result<Var<T>> {
        let shape = self.shape();
        let m = *shape.last().ok_or_else(|| Error::Shape("softmax of scalar".into()))?;
        let mut v = self.with(|n| n.value.clone());
        v.chunks_mut(m).for_each(softmax_row_in_place);
        Ok(self.unary(shape, v, Op::SoftmaxRows(self.id)))
    }

    pub fn log_softmax_rows(&self) -> Result<Var<T>> {
        let shape = self.shape();
        let m = *shape.last().ok_or_else(|| Error::Shape("log_softmax of scalar".into()))?;
        let mut v = self.with(|n| n.value.clone());
        v.chunks_mut(m).for_each(log_softmax_row_in_place);
        Ok(self.unary(shape, v, Op::LogSoftmaxRows(self.id)))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&self, eps: T) -> Result<Var<T>> {
        let shape = self.shape();
        let (_, m) = matrix_dims("layer_norm_rows", &shape)?;
        let mut v = self.with(|n| n.value.clone());
        let inv_std = v.chunks_mut(m).map(|r| layer_norm_row_in_place(r, eps)).collect();
        Ok(self.unary(shape, v, Op::LayerNormRows { x: self.id, inv_std }))
    }

    /// `row / (‖row‖₂ + eps)` for every row (a vector counts as one row).
    pub fn l2_normalize_rows(&self, eps: T) -> Var<T> {
        let shape = self.shape();
        let m = shape.last().copied().unwrap_or(1);
        let mut v = self.with(|n| n.value.clone());
        let norms = v
            .chunks_mut(m)
            .map(|r| super::ops::l2_normalize_in_place(r, eps))
            .collect();
        self.unary(shape, v, Op::L2NormalizeRows { x: self.id, eps, norms })
    }

    pub fn sum(&self) -> Var<T> {
        let s = self.with(|n| n.value.iter().copied().sum());
        self.unary(vec![], vec![s], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<T> {
        let s = self.with(|n| n.value.iter().copied().sum::<T>() / T::from_usize_lossy(n.value.len()));
        self.unary(vec![], vec![s], Op::Mean(self.id))
    }

    /// Diagonal of a square matrix as a vector.
    pub fn diag(&self) -> Result<Var<T>> {
        let shape = self.shape();
        let (n, m) = matrix_dims("diag", &shape)?;
        if n != m {
            return Err(Error::Shape(format!("diag of non-square {shape:?}")));
        }
        let v = self.with(|node| (0..n).map(|i| node.value[i * n + i]).collect());
        Ok(self.unary(vec![n], v, Op::Diag(self.id)))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<T>> {
        let shape = self.shape();
        let (n, m) = matrix_dims("gather_rows", &shape)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Argument(format!("row index {bad} out of {n}")));
        }
        if index.is_empty() {
            return Err(Error::Argument("gather of zero rows".into()));
        }
        let v = self.with(|node| index.iter().flat_map(|&i| node.value[i * m..(i + 1) * m].to_vec()).collect());
        Ok(self.unary(
            vec![index.len(), m],
            v,
            Op::GatherRows {
                x: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// Vertically stacks matrices with equal column counts.
    pub fn concat_rows(parts: &[Var<T>]) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| Error::Argument("concat of zero parts".into()))?;
        let tape = first.tape.clone();
        let (_, m) = matrix_dims("concat_rows", &first.shape())?;
        let mut rows = 0;
        let mut v = Vec::new();
        let mut ng = false;
        {
            let inner = tape.inner.borrow();
            for p in parts {
                let node = &inner.nodes[p.id];
                let (r, c) = matrix_dims("concat_rows", &node.shape)?;
                if c != m {
                    return Err(Error::dim("concat_rows", &first.shape(), &node.shape));
                }
                rows += r;
                v.extend_from_slice(&node.value);
                ng |= node.needs_grad;
            }
        }
        Ok(tape.push(vec![rows, m], v, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), ng))
    }

    /// Means over consecutive blocks of `group` rows: `[G·group × m] → [G × m]`.
    pub fn segment_mean(&self, group: usize) -> Result<Var<T>> {
        let shape = self.shape();
        let (n, m) = matrix_dims("segment_mean", &shape)?;
        if group == 0 || n % group != 0 {
            return Err(Error::Argument(format!("{n} rows not divisible into groups of {group}")));
        }
        let inv = T::one() / T::from_usize_lossy(group);
        let v = self.with(|node| {
            let mut out = vec![T::zero(); (n / group) * m];
            for (r, row) in node.value.chunks(m).enumerate() {
                let o = &mut out[(r / group) * m..(r / group + 1) * m];
                for (a, &b) in o.iter_mut().zip(row) {
                    *a += b;
                }
            }
            out.iter_mut().for_each(|x| *x *= inv);
            out
        });
        Ok(self.unary(vec![n / group, m], v, Op::SegmentMean { x: self.id, group }))
    }

    /// Column-wise maximum over consecutive blocks of `group` rows. Ties go to
    /// the lowest row within the block.
    pub fn segment_max(&self, group: usize) -> Result<Var<T>> {
        let shape = self.shape();
        let (n, m) = matrix_dims("segment_max", &shape)?;
        if group == 0 || n % group != 0 {
            return Err(Error::Argument(format!("{n} rows not divisible into groups of {group}")));
        }
        let g = n / group;
        let (v, argmax) = self.with(|node| {
            let mut out = Vec::with_capacity(g * m);
            let mut arg = Vec::with_capacity(g * m);
            for b in 0..g {
                for j in 0..m {
                    let mut best = b * group;
                    for r in b * group + 1..(b + 1) * group {
                        if node.value[r * m + j] > node.value[best * m + j] {
                            best = r;
                        }
                    }
                    out.push(node.value[best * m + j]);
                    arg.push(best);
                }
            }
            (out, arg)
        });
        Ok(self.unary(vec![g, m], v, Op::SegmentMax { x: self.id, argmax }))
    }

    /// For a square matrix, `out[i] = max_{j≠i} x[i][j]` (ties to lowest `j`).
    pub fn hardest_negative(&self) -> Result<Var<T>> {
        let shape = self.shape();
        let (n, m) = matrix_dims("hardest_negative", &shape)?;
        if n != m || n < 2 {
            return Err(Error::Shape(format!("hardest_negative needs square B×B with B ≥ 2, got {shape:?}")));
        }
        let (v, argmax) = self.with(|node| {
            let mut out = Vec::with_capacity(n);
            let mut arg = Vec::with_capacity(n);
            for i in 0..n {
                let row = &node.value[i * n..(i + 1) * n];
                let mut best = usize::MAX;
                for (j, &s) in row.iter().enumerate() {
                    if j != i && (best == usize::MAX || s > row[best]) {
                        best = j;
                    }
                }
                out.push(row[best]);
                arg.push(best);
            }
            (out, arg)
        });
        Ok(self.unary(vec![n], v, Op::HardestNegative { x: self.id, argmax }))
    }

    /// Multi-head scaled dot-product attention over independent token groups.
    ///
    /// `q`, `k`, `v` are `[G·group × d]`; each consecutive block of `group` rows is
    /// one sequence. Channels are split into `heads` contiguous slices of width
    /// `d/heads`, attended with scale `1/√(d/heads)`, and concatenated back.
    pub fn attention(q: &Var<T>, k: &Var<T>, v: &Var<T>, group: usize, heads: usize) -> Result<Var<T>> {
        let shape = q.shape();
        let (n, d) = matrix_dims("attention", &shape)?;
        check_same("attention", &shape, &k.shape())?;
        check_same("attention", &shape, &v.shape())?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        if group == 0 || n % group != 0 {
            return Err(Error::Argument(format!("{n} tokens not divisible into sequences of {group}")));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut out = vec![T::zero(); n * d];
        let mut probs = vec![T::zero(); (n / group) * heads * group * group];
        {
            let inner = q.tape.inner.borrow();
            let (qv, kv, vv) = (&inner.nodes[q.id].value, &inner.nodes[k.id].value, &inner.nodes[v.id].value);
            for g in 0..n / group {
                for h in 0..heads {
                    let p = &mut probs[(g * heads + h) * group * group..(g * heads + h + 1) * group * group];
                    for i in 0..group {
                        let qi = &qv[(g * group + i) * d + h * dh..(g * group + i) * d + (h + 1) * dh];
                        let row = &mut p[i * group..(i + 1) * group];
                        for (j, r) in row.iter_mut().enumerate() {
                            let kj = &kv[(g * group + j) * d + h * dh..(g * group + j) * d + (h + 1) * dh];
                            *r = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        }
                        softmax_row_in_place(row);
                        let o = &mut out[(g * group + i) * d + h * dh..(g * group + i) * d + (h + 1) * dh];
                        for (j, &w) in row.iter().enumerate() {
                            let vj = &vv[(g * group + j) * d + h * dh..(g * group + j) * d + (h + 1) * dh];
                            for (a, &b) in o.iter_mut().zip(vj) {
                                *a += w * b;
                            }
                        }
                    }
                }
            }
        }
        let ng = q.needs_grad() || k.needs_grad() || v.needs_grad();
        Ok(q.tape.push(
            shape,
            out,
            Op::Attention(Box::new(AttentionSaved {
                q: q.id,
                k: k.id,
                v: v.id,
                group,
                heads,
                probs,
            })),
            ng,
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<T>> {
        let old = self.shape();
        if numel(&old) != numel(&shape) {
            return Err(Error::dim("reshape", &old, &shape));
        }
        let v = self.with(|n| n.value.clone());
        Ok(self.unary(shape, v, Op::Reshape(self.id)))
    }

    /// Reverse-mode pass from this scalar. Every call starts from fresh zero
    /// gradients.
    pub fn backward(&self) -> Result<Grads<T>> {
        let inner = self.tape.inner.borrow();
        let nodes = &inner.nodes;
        if nodes[self.id].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar of shape {:?}",
                nodes[self.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![T::one()]);

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            backprop_node(nodes, node, &gy, &mut grads);
            grads[id] = Some(gy);
        }

        Ok(Grads {
            grads,
            shapes: nodes.iter().map(|n| n.shape.clone()).collect(),
            params: inner.params.clone(),
        })
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, f: impl FnOnce(&mut [T])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]);
    f(slot);
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (n, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let m = nodes[*b].shape[1];
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(nodes, grads, *a, |g| matmul_bt_kernel(gy, bv, g, n, m, k));
            accumulate(nodes, grads, *b, |g| matmul_at_kernel(av, gy, g, n, k, m));
        }
        Op::Transpose(a) => {
            let (n, m) = (node.shape[0], node.shape[1]);
            accumulate(nodes, grads, *a, |g| {
                for i in 0..n {
                    for j in 0..m {
                        g[j * n + i] += gy[i * m + j];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |g| add_into(g, gy));
            accumulate(nodes, grads, *b, |g| add_into(g, gy));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |g| add_into(g, gy));
            accumulate(nodes, grads, *b, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(nodes, grads, *a, |g| {
                for ((g, &d), &o) in g.iter_mut().zip(gy).zip(bv) {
                    *g += d * o;
                }
            });
            accumulate(nodes, grads, *b, |g| {
                for ((g, &d), &o) in g.iter_mut().zip(gy).zip(av) {
                    *g += d * o;
                }
            });
        }
        Op::AddBias(x, b) => {
            let m = node.shape[1];
            accumulate(nodes, grads, *x, |g| add_into(g, gy));
            accumulate(nodes, grads, *b, |g| {
                for row in gy.chunks(m) {
                    add_into(g, row);
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(nodes, grads, *a, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *c));
        }
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, |g| add_into(g, gy)),
        Op::MulScalarVar(x, s) => {
            let sv = nodes[*s].value[0];
            let xv = &nodes[*x].value;
            accumulate(nodes, grads, *x, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * sv));
            accumulate(nodes, grads, *s, |g| {
                g[0] += xv.iter().zip(gy).map(|(&a, &d)| a * d).sum::<T>();
            });
        }
        Op::Gelu(a, mode) => {
            let xv = &nodes[*a].value;
            accumulate(nodes, grads, *a, |g| {
                for ((g, &d), &x) in g.iter_mut().zip(gy).zip(xv) {
                    *g += d * gelu_derivative(x, *mode);
                }
            });
        }
        Op::Sigmoid(a) => accumulate(nodes, grads, *a, |g| {
            for ((g, &d), &s) in g.iter_mut().zip(gy).zip(y) {
                *g += d * s * (T::one() - s);
            }
        }),
        Op::Relu(a) => {
            let xv = &nodes[*a].value;
            accumulate(nodes, grads, *a, |g| {
                for ((g, &d), &x) in g.iter_mut().zip(gy).zip(xv) {
                    if x > T::zero() {
                        *g += d;
                    }
                }
            });
        }
        Op::SoftmaxRows(a) => {
            let m = *node.shape.last().unwrap();
            accumulate(nodes, grads, *a, |g| {
                for ((g, d), s) in g.chunks_mut(m).zip(gy.chunks(m)).zip(y.chunks(m)) {
                    let dot: T = d.iter().zip(s).map(|(&a, &b)| a * b).sum();
                    for k in 0..m {
                        g[k] += s[k] * (d[k] - dot);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(a) => {
            let m = *node.shape.last().unwrap();
            accumulate(nodes, grads, *a, |g| {
                for ((g, d), ls) in g.chunks_mut(m).zip(gy.chunks(m)).zip(y.chunks(m)) {
                    let total: T = d.iter().copied().sum();
                    for k in 0..m {
                        g[k] += d[k] - ls[k].exp() * total;
                    }
                }
            });
        }
        Op::LayerNormRows { x, inv_std } => {
            let m = node.shape[1];
            let mf = T::from_usize_lossy(m);
            accumulate(nodes, grads, *x, |g| {
                for (((g, d), xh), &is) in g.chunks_mut(m).zip(gy.chunks(m)).zip(y.chunks(m)).zip(inv_std) {
                    let sd: T = d.iter().copied().sum();
                    let sdx: T = d.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    for k in 0..m {
                        g[k] += is / mf * (mf * d[k] - sd - xh[k] * sdx);
                    }
                }
            });
        }
        Op::L2NormalizeRows { x, eps, norms } => {
            let m = node.shape.last().copied().unwrap_or(1);
            let xv = &nodes[*x].value;
            accumulate(nodes, grads, *x, |g| {
                for (((g, d), xr), &r) in g.chunks_mut(m).zip(gy.chunks(m)).zip(xv.chunks(m)).zip(norms) {
                    let s = r + *eps;
                    if r == T::zero() {
                        for k in 0..m {
                            g[k] += d[k] / s;
                        }
                        continue;
                    }
                    let xd: T = xr.iter().zip(d).map(|(&a, &b)| a * b).sum();
                    let c = xd / (s * s * r);
                    for k in 0..m {
                        g[k] += d[k] / s - xr[k] * c;
                    }
                }
            });
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, |g| g.iter_mut().for_each(|g| *g += gy[0])),
        Op::Mean(a) => {
            let inv = gy[0] / T::from_usize_lossy(nodes[*a].value.len());
            accumulate(nodes, grads, *a, |g| g.iter_mut().for_each(|g| *g += inv));
        }
        Op::Diag(a) => {
            let n = node.shape[0];
            accumulate(nodes, grads, *a, |g| {
                for i in 0..n {
                    g[i * n + i] += gy[i];
                }
            });
        }
        Op::GatherRows { x, index } => {
            let m = node.shape[1];
            accumulate(nodes, grads, *x, |g| {
                for (r, &i) in index.iter().enumerate() {
                    add_into(&mut g[i * m..(i + 1) * m], &gy[r * m..(r + 1) * m]);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                accumulate(nodes, grads, p, |g| add_into(g, &gy[offset..offset + len]));
                offset += len;
            }
        }
        Op::SegmentMean { x, group } => {
            let m = node.shape[1];
            let inv = T::one() / T::from_usize_lossy(*group);
            accumulate(nodes, grads, *x, |g| {
                for (r, row) in g.chunks_mut(m).enumerate() {
                    let src = &gy[(r / group) * m..(r / group + 1) * m];
                    for (a, &b) in row.iter_mut().zip(src) {
                        *a += b * inv;
                    }
                }
            });
        }
        Op::SegmentMax { x, argmax, .. } => {
            let m = node.shape[1];
            accumulate(nodes, grads, *x, |g| {
                for (o, &r) in argmax.iter().enumerate() {
                    g[r * m + o % m] += gy[o];
                }
            });
        }
        Op::HardestNegative { x, argmax } => {
            let n = node.shape[0];
            accumulate(nodes, grads, *x, |g| {
                for (i, &j) in argmax.iter().enumerate() {
                    g[i * n + j] += gy[i];
                }
            });
        }
        Op::Attention(saved) => attention_backward(nodes, node, saved, gy, grads),
    }
}

fn add_into<T: Scalar>(g: &mut [T], d: &[T]) {
    for (a, &b) in g.iter_mut().zip(d) {
        *a += b;
    }
}

fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    s: &AttentionSaved<T>,
    gy: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (n, d) = (node.shape[0], node.shape[1]);
    let (group, heads) = (s.group, s.heads);
    let dh = d / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let (qv, kv, vv) = (&nodes[s.q].value, &nodes[s.k].value, &nodes[s.v].value);
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut ds = vec![T::zero(); group];
    let span = |row: usize, h: usize| row * d + h * dh..row * d + (h + 1) * dh;
    for g in 0..n / group {
        for h in 0..heads {
            let p = &s.probs[(g * heads + h) * group * group..(g * heads + h + 1) * group * group];
            for i in 0..group {
                let gi = &gy[span(g * group + i, h)];
                let prow = &p[i * group..(i + 1) * group];
                // dP[i][j] = dO_i · V_j ; dV_j += P[i][j] dO_i
                for j in 0..group {
                    let vr = span(g * group + j, h);
                    ds[j] = gi.iter().zip(&vv[vr.clone()]).map(|(&a, &b)| a * b).sum();
                    let w = prow[j];
                    for (a, &b) in dv[vr].iter_mut().zip(gi) {
                        *a += w * b;
                    }
                }
                let dot: T = ds.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for j in 0..group {
                    let dsj = prow[j] * (ds[j] - dot) * scale;
                    if dsj == T::zero() {
                        continue;
                    }
                    let qr = span(g * group + i, h);
                    let kr = span(g * group + j, h);
                    for t in 0..dh {
                        dq[qr.start + t] += dsj * kv[kr.start + t];
                        dk[kr.start + t] += dsj * qv[qr.start + t];
                    }
                }
            }
        }
    }
    accumulate(nodes, grads, s.q, |g| add_into(g, &dq));
    accumulate(nodes, grads, s.k, |g| add_into(g, &dk));
    accumulate(nodes, grads, s.v, |g| add_into(g, &dv));
}
