//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape of operation nodes. Nodes are appended during the
//! forward pass in program order, which is already a topological order, and
//! [`Graph::backward`] walks them in reverse. All loops run in a fixed
//! left-to-right order over flat buffers, so evaluating the same graph on the
//! same inputs is bit-identical, in both precisions.
//!
//! Broadcasting is deliberately narrow: a binary operand may be a scalar or
//! its shape may be a suffix of the other operand's shape (leading-axis
//! expansion). Anything else is a shape error; callers reshape explicitly.

use crate::error::{Result, RiaError};
use crate::tensor::{Elem, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op<E: Elem> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, E),
    Clamp(TensorId, E, E),
    Sigmoid(TensorId),
    Silu(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Reshape(TensorId),
    ConcatLast(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    NarrowLast {
        input: TensorId,
        start: usize,
    },
    Sum(TensorId),
    Mean(TensorId),
    SoftmaxLast {
        input: TensorId,
        keep: Option<Vec<bool>>,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: E,
    },
    GatherRows {
        input: TensorId,
        indices: Vec<usize>,
    },
    RepeatRows(TensorId, usize),
    TileRows(TensorId, usize),
    SumRowGroups(TensorId, usize),
}

struct Node<E: Elem> {
    op: Op<E>,
    value: Tensor<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

/// Tape of operations; owns every intermediate value and gradient buffer.
///
/// A graph is confined to one thread for the duration of a forward/backward
/// pass. Distinct graphs are independent.
pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a node, if backward reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> TensorId {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Leaf that never receives gradient (masks, labels, constants).
    pub fn constant(&mut self, value: Tensor<E>) -> TensorId {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, v: E) -> TensorId {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, op: Op<E>, value: Tensor<E>, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ---- binary elementwise with leading-axis broadcast ----

    fn broadcast_out_shape(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<Vec<usize>> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            return Ok(sa.to_vec());
        }
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if nb == 1 {
            return Ok(sa.to_vec());
        }
        if na == 1 {
            return Ok(sb.to_vec());
        }
        if sa.len() > sb.len() && sa[sa.len() - sb.len()..] == *sb {
            return Ok(sa.to_vec());
        }
        if sb.len() > sa.len() && sb[sb.len() - sa.len()..] == *sa {
            return Ok(sb.to_vec());
        }
        Err(RiaError::Shape {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(E, E) -> E,
        make: impl Fn(TensorId, TensorId) -> Op<E>,
    ) -> Result<TensorId> {
        let shape = self.broadcast_out_shape(name, a, b)?;
        let numel: usize = shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (na, nb) = (da.len(), db.len());
        let mut out = Vec::with_capacity(numel);
        if na == numel && nb == numel {
            for (&x, &y) in da.iter().zip(db) {
                out.push(f(x, y));
            }
        } else {
            for i in 0..numel {
                out.push(f(da[i % na], db[i % nb]));
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(make(a, b), Tensor::new(&shape, out)?, rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    // ---- unary ----

    fn unary(
        &mut self,
        a: TensorId,
        f: impl Fn(E) -> E,
        op: Op<E>,
    ) -> TensorId {
        let data: Vec<E> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(op, Tensor::new(&shape, data).expect("unary preserves shape"), rg)
    }

    pub fn scale(&mut self, a: TensorId, c: E) -> TensorId {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn clamp(&mut self, a: TensorId, lo: E, hi: E) -> TensorId {
        self.unary(
            a,
            |x| {
                if x < lo {
                    lo
                } else if x > hi {
                    hi
                } else {
                    x
                }
            },
            Op::Clamp(a, lo, hi),
        )
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x * sigmoid_scalar(x), Op::Silu(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if let Some(&bad) = self
            .value(a)
            .data()
            .iter()
            .find(|&&x| !(x > E::zero()))
        {
            return Err(RiaError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, |x| x.ln(), Op::Log(a)))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(RiaError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), r, k, c);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Matmul(a, b), Tensor::new(&[r, c], out)?, rg))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.value(a).shape();
        if sa.len() != 2 {
            return Err(RiaError::Shape {
                op: "transpose",
                lhs: sa.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let out = transpose_raw(self.value(a).data(), r, c);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Transpose(a), Tensor::new(&[c, r], out)?, rg))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(RiaError::Shape {
                op: "reshape",
                lhs: self.value(a).shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(a).data().to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Reshape(a), Tensor::new(shape, data)?, rg))
    }

    // ---- structural ----

    pub fn concat_last(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(RiaError::Contract {
                module: "graph",
                detail: "concat-last-axis of zero inputs".into(),
            });
        }
        let lead_shape: Vec<usize> = {
            let s = self.value(inputs[0]).shape();
            s[..s.len() - 1].to_vec()
        };
        let rows = self.value(inputs[0]).leading();
        let mut widths = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let s = self.value(id).shape();
            if s[..s.len() - 1] != lead_shape[..] {
                return Err(RiaError::Shape {
                    op: "concat-last-axis",
                    lhs: self.value(inputs[0]).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(self.value(id).last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for row in 0..rows {
            for (&id, &w) in inputs.iter().zip(&widths) {
                let d = self.value(id).data();
                out.extend_from_slice(&d[row * w..(row + 1) * w]);
            }
        }
        let mut shape = lead_shape;
        shape.push(total);
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Op::ConcatLast(inputs.to_vec()),
            Tensor::new(&shape, out)?,
            rg,
        ))
    }

    /// Stack along axis 0; inputs agree on all trailing axes.
    pub fn concat_rows(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(RiaError::Contract {
                module: "graph",
                detail: "concat-rows of zero inputs".into(),
            });
        }
        let tail: Vec<usize> = self.value(inputs[0]).shape()[1..].to_vec();
        let mut rows = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s[1..] != tail[..] {
                return Err(RiaError::Shape {
                    op: "concat-rows",
                    lhs: self.value(inputs[0]).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * tail.iter().product::<usize>().max(1));
        for &id in inputs {
            out.extend_from_slice(self.value(id).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Op::ConcatRows(inputs.to_vec()),
            Tensor::new(&shape, out)?,
            rg,
        ))
    }

    pub fn narrow_last(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let last = self.value(a).last_dim();
        if len == 0 || start + len > last {
            return Err(RiaError::Shape {
                op: "narrow-last-axis",
                lhs: self.value(a).shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let rows = self.value(a).leading();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for row in 0..rows {
            out.extend_from_slice(&d[row * last + start..row * last + start + len]);
        }
        let mut shape = self.value(a).shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::NarrowLast { input: a, start }, Tensor::new(&shape, out)?, rg))
    }

    /// Even split of the last axis into `parts` tensors; inverse of
    /// [`Graph::concat_last`] on equal widths.
    pub fn split_last(&mut self, a: TensorId, parts: usize) -> Result<Vec<TensorId>> {
        let last = self.value(a).last_dim();
        if parts == 0 || last % parts != 0 {
            return Err(RiaError::Shape {
                op: "split-last-axis",
                lhs: self.value(a).shape().to_vec(),
                rhs: vec![parts],
            });
        }
        let w = last / parts;
        (0..parts).map(|p| self.narrow_last(a, p * w, w)).collect()
    }

    // ---- reductions (left-to-right over the flat buffer) ----

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut acc = E::zero();
        for &v in self.value(a).data() {
            acc = acc + v;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Sum(a), Tensor::scalar(acc), rg)
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).numel();
        let mut acc = E::zero();
        for &v in self.value(a).data() {
            acc = acc + v;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            Op::Mean(a),
            Tensor::scalar(acc / E::from_f64(n as f64)),
            rg,
        )
    }

    // ---- fused rows ----

    pub fn softmax_last(&mut self, a: TensorId) -> Result<TensorId> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last axis restricted to positions where `keep` is
    /// true; dropped positions get probability exactly zero.
    pub fn softmax_last_masked(&mut self, a: TensorId, keep: &[bool]) -> Result<TensorId> {
        self.softmax_impl(a, Some(keep.to_vec()))
    }

    fn softmax_impl(&mut self, a: TensorId, keep: Option<Vec<bool>>) -> Result<TensorId> {
        let last = self.value(a).last_dim();
        if let Some(k) = &keep {
            if k.len() != last {
                return Err(RiaError::Shape {
                    op: "softmax-mask",
                    lhs: self.value(a).shape().to_vec(),
                    rhs: vec![k.len()],
                });
            }
            if !k.iter().any(|&b| b) {
                return Err(RiaError::Domain {
                    op: "softmax",
                    detail: "mask drops every position".into(),
                });
            }
        }
        let rows = self.value(a).leading();
        let d = self.value(a).data();
        let kept = |j: usize| keep.as_ref().map_or(true, |k| k[j]);
        let mut out = vec![E::zero(); rows * last];
        for r in 0..rows {
            let row = &d[r * last..(r + 1) * last];
            let mut mx: Option<E> = None;
            for (j, &v) in row.iter().enumerate() {
                if kept(j) && mx.map_or(true, |m| v > m) {
                    mx = Some(v);
                }
            }
            let mx = mx.expect("mask keeps at least one position");
            let mut denom = E::zero();
            for (j, &v) in row.iter().enumerate() {
                if kept(j) {
                    let e = (v - mx).exp();
                    out[r * last + j] = e;
                    denom = denom + e;
                }
            }
            for j in 0..last {
                if kept(j) {
                    out[r * last + j] = out[r * last + j] / denom;
                }
            }
        }
        let shape = self.value(a).shape().to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            Op::SoftmaxLast { input: a, keep },
            Tensor::new(&shape, out)?,
            rg,
        ))
    }

    /// Normalize the last axis to zero mean and unit (eps-regularized)
    /// variance, then apply the affine map `gamma, beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: E,
    ) -> Result<TensorId> {
        let d = self.value(x).last_dim();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(RiaError::Shape {
                op: "layer-norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let rows = self.value(x).leading();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let (mean, inv_std) = row_moments(row, eps);
            for j in 0..d {
                out.push((row[j] - mean) * inv_std * g[j] + b[j]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, eps },
            Tensor::new(&shape, out)?,
            rg,
        ))
    }

    // ---- row selection / expansion ----

    /// Select rows (slices along axis 0) in the given order; duplicates allowed.
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let shape = self.value(a).shape();
        let rows = shape[0];
        let rowlen: usize = shape[1..].iter().product();
        if indices.is_empty() {
            return Err(RiaError::Contract {
                module: "graph",
                detail: "gather of zero rows".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(RiaError::Lookup {
                field: "gather-rows".into(),
                index: bad,
                vocab: rows,
            });
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * rowlen);
        for &i in indices {
            out.extend_from_slice(&d[i * rowlen..(i + 1) * rowlen]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[0] = indices.len();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
            Tensor::new(&new_shape, out)?,
            rg,
        ))
    }

    /// `[r, ...] -> [r*k, ...]`, each row repeated `k` times consecutively.
    pub fn repeat_rows(&mut self, a: TensorId, k: usize) -> Result<TensorId> {
        if k == 0 {
            return Err(RiaError::Contract {
                module: "graph",
                detail: "repeat_rows with k = 0".into(),
            });
        }
        let shape = self.value(a).shape().to_vec();
        let rows = shape[0];
        let rowlen: usize = shape[1..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(rows * k * rowlen);
        for r in 0..rows {
            for _ in 0..k {
                out.extend_from_slice(&d[r * rowlen..(r + 1) * rowlen]);
            }
        }
        let mut new_shape = shape;
        new_shape[0] = rows * k;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::RepeatRows(a, k), Tensor::new(&new_shape, out)?, rg))
    }

    /// `[r, ...] -> [r*k, ...]`, the whole block tiled `k` times.
    pub fn tile_rows(&mut self, a: TensorId, k: usize) -> Result<TensorId> {
        if k == 0 {
            return Err(RiaError::Contract {
                module: "graph",
                detail: "tile_rows with k = 0".into(),
            });
        }
        let shape = self.value(a).shape().to_vec();
        let rows = shape[0];
        let rowlen: usize = shape[1..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(rows * k * rowlen);
        for _ in 0..k {
            out.extend_from_slice(d);
        }
        let mut new_shape = shape;
        new_shape[0] = rows * k;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::TileRows(a, k), Tensor::new(&new_shape, out)?, rg))
    }

    /// `[r*k, ...] -> [r, ...]`, summing each consecutive group of `k` rows;
    /// the reduction dual of [`Graph::repeat_rows`].
    pub fn sum_row_groups(&mut self, a: TensorId, k: usize) -> Result<TensorId> {
        let shape = self.value(a).shape().to_vec();
        if k == 0 || shape[0] % k != 0 {
            return Err(RiaError::Shape {
                op: "sum-row-groups",
                lhs: shape,
                rhs: vec![k],
            });
        }
        let rows = shape[0] / k;
        let rowlen: usize = shape[1..].iter().product::<usize>().max(1);
        let d = self.value(a).data();
        let mut out = vec![E::zero(); rows * rowlen];
        for r in 0..rows {
            for g in 0..k {
                let src = (r * k + g) * rowlen;
                for j in 0..rowlen {
                    out[r * rowlen + j] = out[r * rowlen + j] + d[src + j];
                }
            }
        }
        let mut new_shape = shape;
        new_shape[0] = rows;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::SumRowGroups(a, k), Tensor::new(&new_shape, out)?, rg))
    }

    // ---- backward ----

    /// Reverse-mode pass from a scalar loss. Gradients accumulate by
    /// summation over fan-out; leaves created with `requires_grad` end up
    /// with a populated [`Graph::grad`] buffer.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(RiaError::Contract {
                module: "graph",
                detail: format!(
                    "backward from non-scalar loss of shape {:?}",
                    self.value(loss).shape()
                ),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let go = self.nodes[i].grad.take().expect("checked above");
            self.propagate(i, &go);
            self.nodes[i].grad = Some(go);
        }
        Ok(())
    }

    fn accum(&mut self, id: TensorId, contrib: impl FnOnce(&mut [E])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        if self.nodes[id.0].grad.is_none() {
            let n = self.nodes[id.0].value.numel();
            self.nodes[id.0].grad = Some(vec![E::zero(); n]);
        }
        contrib(self.nodes[id.0].grad.as_mut().expect("just allocated"));
    }

    fn propagate(&mut self, i: usize, go: &[E]) {
        // Ops are moved out to appease the borrow checker, then restored.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum_broadcast(*a, go, |_, g| g);
                self.accum_broadcast(*b, go, |_, g| g);
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(*a, go, |_, g| g);
                self.accum_broadcast(*b, go, |_, g| -g);
            }
            Op::Mul(a, b) => {
                let db = self.nodes[b.0].value.data().to_vec();
                let da = self.nodes[a.0].value.data().to_vec();
                let nb = db.len();
                let na = da.len();
                self.accum_broadcast(*a, go, |i, g| g * db[i % nb]);
                self.accum_broadcast(*b, go, |i, g| g * da[i % na]);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(*a, |acc| {
                    for (dst, &g) in acc.iter_mut().zip(go) {
                        *dst = *dst + g * c;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let xv = self.nodes[a.0].value.data().to_vec();
                self.accum(*a, |acc| {
                    for ((dst, &g), &x) in acc.iter_mut().zip(go).zip(&xv) {
                        if x > lo && x < hi {
                            *dst = *dst + g;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[i].value.data().to_vec();
                self.accum(*a, |acc| {
                    for ((dst, &g), &y) in acc.iter_mut().zip(go).zip(&yv) {
                        *dst = *dst + g * y * (E::one() - y);
                    }
                });
            }
            Op::Silu(a) => {
                let xv = self.nodes[a.0].value.data().to_vec();
                self.accum(*a, |acc| {
                    for ((dst, &g), &x) in acc.iter_mut().zip(go).zip(&xv) {
                        let s = sigmoid_scalar(x);
                        *dst = *dst + g * (s + x * s * (E::one() - s));
                    }
                });
            }
            Op::Exp(a) => {
                let yv = self.nodes[i].value.data().to_vec();
                self.accum(*a, |acc| {
                    for ((dst, &g), &y) in acc.iter_mut().zip(go).zip(&yv) {
                        *dst = *dst + g * y;
                    }
                });
            }
            Op::Log(a) => {
                let xv = self.nodes[a.0].value.data().to_vec();
                self.accum(*a, |acc| {
                    for ((dst, &g), &x) in acc.iter_mut().zip(go).zip(&xv) {
                        *dst = *dst + g / x;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                if self.nodes[a.0].requires_grad {
                    // dA = go · Bᵀ
                    let bt = transpose_raw(&bv, k, c);
                    let da = matmul_raw(go, &bt, r, c, k);
                    self.accum(*a, |acc| {
                        for (dst, g) in acc.iter_mut().zip(da) {
                            *dst = *dst + g;
                        }
                    });
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · go
                    let at = transpose_raw(&av, r, k);
                    let db = matmul_raw(&at, go, k, r, c);
                    self.accum(*b, |acc| {
                        for (dst, g) in acc.iter_mut().zip(db) {
                            *dst = *dst + g;
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let s = self.nodes[i].value.shape().to_vec();
                let gt = transpose_raw(go, s[0], s[1]);
                self.accum(*a, |acc| {
                    for (dst, g) in acc.iter_mut().zip(gt) {
                        *dst = *dst + g;
                    }
                });
            }
            Op::Reshape(a) => {
                self.accum(*a, |acc| {
                    for (dst, &g) in acc.iter_mut().zip(go) {
                        *dst = *dst + g;
                    }
                });
            }
            Op::ConcatLast(inputs) => {
                let widths: Vec<usize> =
                    inputs.iter().map(|&id| self.nodes[id.0].value.last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = go.len() / total;
                let mut offset = 0;
                for (&id, &w) in inputs.iter().zip(&widths) {
                    let off = offset;
                    self.accum(id, |acc| {
                        for row in 0..rows {
                            for j in 0..w {
                                acc[row * w + j] = acc[row * w + j] + go[row * total + off + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(inputs) => {
                let mut offset = 0;
                for &id in inputs {
                    let n = self.nodes[id.0].value.numel();
                    let off = offset;
                    self.accum(id, |acc| {
                        for j in 0..n {
                            acc[j] = acc[j] + go[off + j];
                        }
                    });
                    offset += n;
                }
            }
            Op::NarrowLast { input, start } => {
                let last = self.nodes[input.0].value.last_dim();
                let len = self.nodes[i].value.last_dim();
                let rows = go.len() / len;
                let (start, _) = (*start, ());
                self.accum(*input, |acc| {
                    for row in 0..rows {
                        for j in 0..len {
                            acc[row * last + start + j] =
                                acc[row * last + start + j] + go[row * len + j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g = go[0];
                self.accum(*a, |acc| {
                    for dst in acc.iter_mut() {
                        *dst = *dst + g;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                let g = go[0] / E::from_f64(n as f64);
                self.accum(*a, |acc| {
                    for dst in acc.iter_mut() {
                        *dst = *dst + g;
                    }
                });
            }
            Op::SoftmaxLast { input, keep } => {
                let last = self.nodes[i].value.last_dim();
                let rows = go.len() / last;
                let yv = self.nodes[i].value.data().to_vec();
                let kept: Vec<bool> = match keep {
                    Some(k) => k.clone(),
                    None => vec![true; last],
                };
                self.accum(*input, |acc| {
                    for r in 0..rows {
                        let y = &yv[r * last..(r + 1) * last];
                        let g = &go[r * last..(r + 1) * last];
                        let mut dot = E::zero();
                        for j in 0..last {
                            if kept[j] {
                                dot = dot + g[j] * y[j];
                            }
                        }
                        for j in 0..last {
                            if kept[j] {
                                acc[r * last + j] = acc[r * last + j] + y[j] * (g[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = self.nodes[x.0].value.last_dim();
                let rows = go.len() / d;
                let xv = self.nodes[x.0].value.data().to_vec();
                let gv = self.nodes[gamma.0].value.data().to_vec();
                let eps = *eps;
                let dim = E::from_f64(d as f64);
                if self.nodes[x.0].requires_grad {
                    self.accum(*x, |acc| {
                        for r in 0..rows {
                            let row = &xv[r * d..(r + 1) * d];
                            let g = &go[r * d..(r + 1) * d];
                            let (mean, inv_std) = row_moments(row, eps);
                            let mut sum_gg = E::zero();
                            let mut sum_ggx = E::zero();
                            for j in 0..d {
                                let xhat = (row[j] - mean) * inv_std;
                                let gg = g[j] * gv[j];
                                sum_gg = sum_gg + gg;
                                sum_ggx = sum_ggx + gg * xhat;
                            }
                            let m1 = sum_gg / dim;
                            let m2 = sum_ggx / dim;
                            for j in 0..d {
                                let xhat = (row[j] - mean) * inv_std;
                                let gg = g[j] * gv[j];
                                acc[r * d + j] =
                                    acc[r * d + j] + (gg - m1 - xhat * m2) * inv_std;
                            }
                        }
                    });
                }
                if self.nodes[gamma.0].requires_grad {
                    self.accum(*gamma, |acc| {
                        for r in 0..rows {
                            let row = &xv[r * d..(r + 1) * d];
                            let (mean, inv_std) = row_moments(row, eps);
                            for j in 0..d {
                                let xhat = (row[j] - mean) * inv_std;
                                acc[j] = acc[j] + go[r * d + j] * xhat;
                            }
                        }
                    });
                }
                if self.nodes[beta.0].requires_grad {
                    self.accum(*beta, |acc| {
                        for r in 0..rows {
                            for j in 0..d {
                                acc[j] = acc[j] + go[r * d + j];
                            }
                        }
                    });
                }
            }
            Op::GatherRows { input, indices } => {
                let rowlen: usize = self.nodes[input.0].value.shape()[1..].iter().product::<usize>().max(1);
                self.accum(*input, |acc| {
                    for (k, &src) in indices.iter().enumerate() {
                        for j in 0..rowlen {
                            acc[src * rowlen + j] = acc[src * rowlen + j] + go[k * rowlen + j];
                        }
                    }
                });
            }
            Op::RepeatRows(a, k) => {
                let k = *k;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let rows = shape[0];
                let rowlen: usize = shape[1..].iter().product::<usize>().max(1);
                self.accum(*a, |acc| {
                    for r in 0..rows {
                        for rep in 0..k {
                            let src = (r * k + rep) * rowlen;
                            for j in 0..rowlen {
                                acc[r * rowlen + j] = acc[r * rowlen + j] + go[src + j];
                            }
                        }
                    }
                });
            }
            Op::TileRows(a, k) => {
                let k = *k;
                let n = self.nodes[a.0].value.numel();
                self.accum(*a, |acc| {
                    for t in 0..k {
                        for j in 0..n {
                            acc[j] = acc[j] + go[t * n + j];
                        }
                    }
                });
            }
            Op::SumRowGroups(a, k) => {
                let k = *k;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let rowlen: usize = shape[1..].iter().product::<usize>().max(1);
                let rows = shape[0] / k;
                self.accum(*a, |acc| {
                    for r in 0..rows {
                        for g in 0..k {
                            let dst = (r * k + g) * rowlen;
                            for j in 0..rowlen {
                                acc[dst + j] = acc[dst + j] + go[r * rowlen + j];
                            }
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }

    /// Accumulate `map(i, go[i])` into the gradient of `target`, folding the
    /// broadcast: the target buffer may be shorter than `go`, in which case
    /// contributions wrap modulo its length (exactly undoing leading-axis
    /// expansion).
    fn accum_broadcast(&mut self, target: TensorId, go: &[E], map: impl Fn(usize, E) -> E) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let n = self.nodes[target.0].value.numel();
        self.accum(target, |acc| {
            if n == go.len() {
                for (i, (dst, &g)) in acc.iter_mut().zip(go).enumerate() {
                    *dst = *dst + map(i, g);
                }
            } else {
                for (i, &g) in go.iter().enumerate() {
                    acc[i % n] = acc[i % n] + map(i, g);
                }
            }
        });
    }
}

fn sigmoid_scalar<E: Elem>(x: E) -> E {
    // Split by sign so exp never overflows.
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

fn row_moments<E: Elem>(row: &[E], eps: E) -> (E, E) {
    let d = E::from_f64(row.len() as f64);
    let mut mean = E::zero();
    for &v in row {
        mean = mean + v;
    }
    mean = mean / d;
    let mut var = E::zero();
    for &v in row {
        let c = v - mean;
        var = var + c * c;
    }
    var = var / d;
    (mean, E::one() / (var + eps).sqrt())
}

fn matmul_raw<E: Elem>(a: &[E], b: &[E], r: usize, k: usize, c: usize) -> Vec<E> {
    let mut out = vec![E::zero(); r * c];
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * c..(kk + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<E: Elem>(a: &[E], r: usize, c: usize) -> Vec<E> {
    let mut out = vec![E::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
