//! Reverse-mode differentiation over a dynamic tape.
//!
//! Each forward call records one node; `backward` replays the record in
//! reverse, accumulating gradients. Reductions run in fixed index order, so
//! a forward/backward pass is bit-deterministic for fixed inputs. Sparse
//! matrices participate as constant left operands only: gradients flow to
//! the dense right operand through the precomputed transpose.

use std::collections::HashMap;
use std::sync::Arc;

use crate::diffengine::optim::{ParamId, ParamStore};
use crate::diffengine::tensor::Tensor;
use crate::scalar::Scalar;
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// A sparse matrix paired with its transpose so both multiplication
/// directions stream over CSR rows.
#[derive(Debug)]
pub struct SparseOperator<T> {
    mat: SparseMatrix<T>,
    mat_t: SparseMatrix<T>,
}

impl<T: Scalar> SparseOperator<T> {
    pub fn new(mat: SparseMatrix<T>) -> Self {
        let mat_t = mat.transpose();
        Self { mat, mat_t }
    }

    pub fn matrix(&self) -> &SparseMatrix<T> {
        &self.mat
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param { id: ParamId, trainable: bool },
    Matmul { a: NodeId, b: NodeId },
    SparseMatmul { operator: Arc<SparseOperator<T>>, x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    Abs { x: NodeId },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Concat { a: NodeId, b: NodeId },
    SliceLast { x: NodeId, start: usize, len: usize },
    Embedding { table: NodeId, ids: Vec<usize> },
    Attention { q: NodeId, k: NodeId, v: NodeId },
    SplitHeads { x: NodeId, heads: usize },
    MergeHeads { x: NodeId, heads: usize },
    RepeatRows { x: NodeId, times: usize },
    TileRows { x: NodeId, times: usize },
    StackSteps { xs: Vec<NodeId> },
    Reshape { x: NodeId },
    Sum { x: NodeId },
    Scale { x: NodeId, factor: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Saved forward intermediates needed by the backward rule.
    aux: Vec<Tensor<T>>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Define-by-run record of one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, aux: Vec<Tensor<T>>) -> NodeId {
        self.nodes.push(Node { value, op, aux });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input, vec![])
    }

    /// Leaf bound to a stored parameter; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let p = store.get(id);
        let node = self.push(
            p.value.clone(),
            Op::Param {
                id,
                trainable: p.trainable,
            },
            vec![],
        );
        self.param_nodes.insert(id, node);
        node
    }

    /// `a · b` where `b` is 2D and `a`'s leading axes collapse to rows.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(bv.rank(), 2, "matmul: rhs must be 2D, got {:?}", bv.shape());
        let k = bv.shape()[0];
        let n = bv.shape()[1];
        assert_eq!(
            av.last_dim(),
            k,
            "matmul: {:?} x {:?} inner mismatch",
            av.shape(),
            bv.shape()
        );
        let m = av.leading();
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), false, bv.data(), false, false, &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::from_vec(&shape, out), Op::Matmul { a, b }, vec![])
    }

    /// `A · x` with a constant sparse operator; `x`'s first axis must be a
    /// multiple of the operator width and is processed block-wise, so a
    /// stack of windows shares one operator.
    pub fn sparse_matmul(&mut self, operator: Arc<SparseOperator<T>>, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert!(xv.rank() >= 1, "sparse_matmul: input must have rows");
        let rows = xv.shape()[0];
        let cols = xv.numel() / rows;
        assert!(
            rows % operator.mat.n_cols() == 0,
            "sparse_matmul: {:?} rows not a multiple of operator width {}",
            xv.shape(),
            operator.mat.n_cols()
        );
        let blocks = rows / operator.mat.n_cols();
        let mut out = vec![T::zero(); blocks * operator.mat.n_rows() * cols];
        operator.mat.matmul_dense(xv.data(), rows, cols, &mut out);
        let mut shape = xv.shape().to_vec();
        shape[0] = blocks * operator.mat.n_rows();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::SparseMatmul { operator, x },
            vec![],
        )
    }

    fn broadcast_compatible(a: &[usize], b: &[usize]) -> bool {
        b.len() <= a.len() && a[a.len() - b.len()..] == *b
    }

    /// `a + b`; `b` may broadcast over `a`'s leading axes (its shape must
    /// be a suffix of `a`'s shape).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(
            Self::broadcast_compatible(av.shape(), bv.shape()),
            "add: {:?} + {:?}",
            av.shape(),
            bv.shape()
        );
        let bn = bv.numel();
        let mut out = av.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o += bv.data()[i % bn];
        }
        let value = Tensor::from_vec(av.shape(), out);
        self.push(value, Op::Add { a, b }, vec![])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "sub: {:?} - {:?}", av.shape(), bv.shape());
        let value = av.zip_map(bv, |x, y| x - y);
        self.push(value, Op::Sub { a, b }, vec![])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "mul: {:?} * {:?}", av.shape(), bv.shape());
        let value = av.zip_map(bv, |x, y| x * y);
        self.push(value, Op::Mul { a, b }, vec![])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0]
            .value
            .map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(value, Op::Sigmoid { x }, vec![])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v.tanh());
        self.push(value, Op::Tanh { x }, vec![])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v.max(T::zero()));
        self.push(value, Op::Relu { x }, vec![])
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v.abs());
        self.push(value, Op::Abs { x }, vec![])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let value = softmax_last_axis(xv);
        self.push(value, Op::Softmax { x }, vec![])
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let d = xv.last_dim();
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        assert_eq!(gv.shape(), &[d], "layer_norm: gain shape {:?}", gv.shape());
        assert_eq!(bv.shape(), &[d], "layer_norm: bias shape {:?}", bv.shape());
        let rows = xv.leading();
        let eps = T::from_f64(LAYER_NORM_EPS);
        let dn = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                let h = (row[c] - mean) * istd;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let aux = vec![
            Tensor::from_vec(xv.shape(), xhat),
            Tensor::from_vec(&[rows], inv_std),
        ];
        self.push(
            Tensor::from_vec(xv.shape(), out),
            Op::LayerNorm { x, gain, bias },
            aux,
        )
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            av.shape()[..av.rank() - 1],
            bv.shape()[..bv.rank() - 1],
            "concat: {:?} ++ {:?}",
            av.shape(),
            bv.shape()
        );
        let (da, db) = (av.last_dim(), bv.last_dim());
        let rows = av.leading();
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * da..(r + 1) * da]);
            out.extend_from_slice(&bv.data()[r * db..(r + 1) * db]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = da + db;
        self.push(Tensor::from_vec(&shape, out), Op::Concat { a, b }, vec![])
    }

    /// `len` channels of the last axis starting at `start`.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let d = xv.last_dim();
        assert!(start + len <= d, "slice: {start}+{len} beyond {d}");
        let rows = xv.leading();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push(
            Tensor::from_vec(&shape, out),
            Op::SliceLast { x, start, len },
            vec![],
        )
    }

    /// Rows of a 2D table selected by index.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let tv = &self.nodes[table.0].value;
        assert_eq!(tv.rank(), 2, "embedding_lookup: table must be 2D");
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in &ids {
            assert!(id < v, "embedding_lookup: id {id} beyond table {v}");
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let shape = [ids.len(), d];
        self.push(
            Tensor::from_vec(&shape, out),
            Op::Embedding { table, ids },
            vec![],
        )
    }

    /// Scaled dot-product attention: softmax(q·kT / sqrt(d)) · v over
    /// batched 3D operands `(B, L, d)`. With `causal`, query position i
    /// attends to key positions <= i (square L only).
    pub fn scaled_dot_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, causal: bool) -> NodeId {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        assert_eq!(qv.rank(), 3, "attention: q must be (B, L, d)");
        assert_eq!(kv.rank(), 3, "attention: k must be (B, L, d)");
        assert_eq!(kv.shape(), vv.shape(), "attention: k/v shapes {:?} vs {:?}", kv.shape(), vv.shape());
        let (b, lq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let lk = kv.shape()[1];
        assert_eq!(kv.shape()[0], b, "attention: batch mismatch");
        assert_eq!(kv.shape()[2], d, "attention: key dim mismatch");
        if causal {
            assert_eq!(lq, lk, "attention: causal mask needs square lengths");
        }
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let neg_inf = T::from_f64(f64::NEG_INFINITY);
        let mut weights = vec![T::zero(); b * lq * lk];
        let mut out = vec![T::zero(); b * lq * d];
        for bi in 0..b {
            let qb = &qv.data()[bi * lq * d..(bi + 1) * lq * d];
            let kb = &kv.data()[bi * lk * d..(bi + 1) * lk * d];
            let vb = &vv.data()[bi * lk * d..(bi + 1) * lk * d];
            let wb = &mut weights[bi * lq * lk..(bi + 1) * lq * lk];
            T::gemm(lq, d, lk, qb, false, kb, true, false, wb);
            for (i, row) in wb.chunks_mut(lk).enumerate() {
                for (j, s) in row.iter_mut().enumerate() {
                    *s = *s * scale;
                    if causal && j > i {
                        *s = neg_inf;
                    }
                }
            }
            let soft = softmax_last_axis(&Tensor::from_vec(&[lq, lk], wb.to_vec()));
            wb.copy_from_slice(soft.data());
            let ob = &mut out[bi * lq * d..(bi + 1) * lq * d];
            T::gemm(lq, lk, d, wb, false, vb, false, false, ob);
        }
        let aux = vec![Tensor::from_vec(&[b, lq, lk], weights)];
        self.push(
            Tensor::from_vec(&[b, lq, d], out),
            Op::Attention { q, k, v },
            aux,
        )
    }

    /// `(B, L, H*d) -> (B*H, L, d)`: heads become independent batch entries.
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.rank(), 3, "split_heads: input must be (B, L, D)");
        let (b, l, dm) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(dm % heads == 0, "split_heads: {dm} channels not divisible by {heads}");
        let d = dm / heads;
        let mut out = vec![T::zero(); xv.numel()];
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let src = &xv.data()[(bi * l + li) * dm + h * d..(bi * l + li) * dm + (h + 1) * d];
                    let dst_row = (bi * heads + h) * l + li;
                    out[dst_row * d..(dst_row + 1) * d].copy_from_slice(src);
                }
            }
        }
        let shape = [b * heads, l, d];
        self.push(Tensor::from_vec(&shape, out), Op::SplitHeads { x, heads }, vec![])
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.rank(), 3, "merge_heads: input must be (B*H, L, d)");
        let (bh, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(bh % heads == 0, "merge_heads: {bh} rows not divisible by {heads}");
        let b = bh / heads;
        let dm = heads * d;
        let mut out = vec![T::zero(); xv.numel()];
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let src_row = (bi * heads + h) * l + li;
                    let src = &xv.data()[src_row * d..(src_row + 1) * d];
                    out[(bi * l + li) * dm + h * d..(bi * l + li) * dm + (h + 1) * d]
                        .copy_from_slice(src);
                }
            }
        }
        let shape = [b, l, dm];
        self.push(Tensor::from_vec(&shape, out), Op::MergeHeads { x, heads }, vec![])
    }

    /// Repeats each leading-axis entry `times` times consecutively:
    /// `(B, ...) -> (B*times, ...)` with entry `b` at rows `b*times..`.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let b = xv.shape()[0];
        let entry = xv.numel() / b;
        let mut out = Vec::with_capacity(xv.numel() * times);
        for bi in 0..b {
            let src = &xv.data()[bi * entry..(bi + 1) * entry];
            for _ in 0..times {
                out.extend_from_slice(src);
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = b * times;
        self.push(Tensor::from_vec(&shape, out), Op::RepeatRows { x, times }, vec![])
    }

    /// Stacks the whole tensor `times` times along the leading axis:
    /// `(B, ...) -> (times*B, ...)` with copy `t` at rows `t*B..`.
    pub fn tile_rows(&mut self, x: NodeId, times: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(xv.numel() * times);
        for _ in 0..times {
            out.extend_from_slice(xv.data());
        }
        let mut shape = xv.shape().to_vec();
        shape[0] *= times;
        self.push(Tensor::from_vec(&shape, out), Op::TileRows { x, times }, vec![])
    }

    /// Stacks L same-shaped `(R, D)` tensors into `(R, L, D)`.
    pub fn stack_steps(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "stack_steps: empty input");
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        assert_eq!(first.len(), 2, "stack_steps: inputs must be 2D");
        let (r, d) = (first[0], first[1]);
        let l = xs.len();
        let mut out = vec![T::zero(); r * l * d];
        for (li, &x) in xs.iter().enumerate() {
            let xv = &self.nodes[x.0].value;
            assert_eq!(xv.shape(), &first[..], "stack_steps: mismatched step shape");
            for ri in 0..r {
                out[(ri * l + li) * d..(ri * l + li + 1) * d]
                    .copy_from_slice(&xv.data()[ri * d..(ri + 1) * d]);
            }
        }
        let shape = [r, l, d];
        self.push(
            Tensor::from_vec(&shape, out),
            Op::StackSteps { xs: xs.to_vec() },
            vec![],
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let value = self.nodes[x.0].value.reshaped(shape);
        self.push(value, Op::Reshape { x }, vec![])
    }

    /// Sum of all elements, as a `[1]` scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.nodes[x.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, vec![])
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, vec![])
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.numel();
        let s = self.sum(x);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// Reverse sweep from a scalar loss; returns the gradient per trainable
    /// parameter used on this tape, in parameter-id order.
    pub fn backward(&mut self, loss: NodeId) -> Vec<(ParamId, Tensor<T>)> {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }

        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param { id, trainable: true } = node.op {
                if let Some(g) = grads[idx].take() {
                    out.push((id, g));
                }
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn propagate(&self, idx: usize, grad: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>| {
            match &mut grads[id.0] {
                Some(g) => g.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param { .. } => {}
            Op::Matmul { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.leading();
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, grad.data(), false, bv.data(), true, false, &mut ga);
                acc(grads, *a, Tensor::from_vec(av.shape(), ga));
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, av.data(), true, grad.data(), false, false, &mut gb);
                acc(grads, *b, Tensor::from_vec(bv.shape(), gb));
            }
            Op::SparseMatmul { operator, x } => {
                let xv = &self.nodes[x.0].value;
                let rows = grad.shape()[0];
                let cols = grad.numel() / rows;
                let mut gx = vec![T::zero(); xv.numel()];
                operator.mat_t.matmul_dense(grad.data(), rows, cols, &mut gx);
                acc(grads, *x, Tensor::from_vec(xv.shape(), gx));
            }
            Op::Add { a, b } => {
                acc(grads, *a, grad.clone());
                let bv = &self.nodes[b.0].value;
                if bv.shape() == grad.shape() {
                    acc(grads, *b, grad.clone());
                } else {
                    let bn = bv.numel();
                    let mut gb = vec![T::zero(); bn];
                    for (i, &g) in grad.data().iter().enumerate() {
                        gb[i % bn] += g;
                    }
                    acc(grads, *b, Tensor::from_vec(bv.shape(), gb));
                }
            }
            Op::Sub { a, b } => {
                acc(grads, *a, grad.clone());
                acc(grads, *b, grad.map(|g| -g));
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(grads, *a, grad.zip_map(bv, |g, y| g * y));
                acc(grads, *b, grad.zip_map(av, |g, x| g * x));
            }
            Op::Sigmoid { x } => {
                let s = &node.value;
                acc(grads, *x, grad.zip_map(s, |g, y| g * y * (T::one() - y)));
            }
            Op::Tanh { x } => {
                let t = &node.value;
                acc(grads, *x, grad.zip_map(t, |g, y| g * (T::one() - y * y)));
            }
            Op::Relu { x } => {
                let xv = &self.nodes[x.0].value;
                acc(grads, *x, grad.zip_map(xv, |g, v| if v > T::zero() { g } else { T::zero() }));
            }
            Op::Abs { x } => {
                let xv = &self.nodes[x.0].value;
                acc(
                    grads,
                    *x,
                    grad.zip_map(xv, |g, v| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::Softmax { x } => {
                let s = &node.value;
                let d = s.last_dim();
                let rows = s.leading();
                let mut gx = vec![T::zero(); s.numel()];
                for r in 0..rows {
                    let srow = &s.data()[r * d..(r + 1) * d];
                    let grow = &grad.data()[r * d..(r + 1) * d];
                    let dot = srow
                        .iter()
                        .zip(grow)
                        .map(|(&sv, &gv)| sv * gv)
                        .sum::<T>();
                    for c in 0..d {
                        gx[r * d + c] = srow[c] * (grow[c] - dot);
                    }
                }
                acc(grads, *x, Tensor::from_vec(s.shape(), gx));
            }
            Op::LayerNorm { x, gain, bias } => {
                let xhat = &node.aux[0];
                let inv_std = &node.aux[1];
                let gv = &self.nodes[gain.0].value;
                let d = xhat.last_dim();
                let rows = xhat.leading();
                let dn = T::from_f64(d as f64);
                let mut gx = vec![T::zero(); xhat.numel()];
                let mut ggain = vec![T::zero(); d];
                let mut gbias = vec![T::zero(); d];
                for r in 0..rows {
                    let hrow = &xhat.data()[r * d..(r + 1) * d];
                    let grow = &grad.data()[r * d..(r + 1) * d];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for c in 0..d {
                        let dh = grow[c] * gv.data()[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[c];
                        ggain[c] += grow[c] * hrow[c];
                        gbias[c] += grow[c];
                    }
                    let mean_dh = sum_dh / dn;
                    let mean_dh_h = sum_dh_h / dn;
                    let istd = inv_std.data()[r];
                    for c in 0..d {
                        let dh = grow[c] * gv.data()[c];
                        gx[r * d + c] = istd * (dh - mean_dh - hrow[c] * mean_dh_h);
                    }
                }
                acc(grads, *x, Tensor::from_vec(xhat.shape(), gx));
                acc(grads, *gain, Tensor::from_vec(&[d], ggain));
                acc(grads, *bias, Tensor::from_vec(&[d], gbias));
            }
            Op::Concat { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (da, db) = (av.last_dim(), bv.last_dim());
                let rows = av.leading();
                let mut ga = vec![T::zero(); av.numel()];
                let mut gb = vec![T::zero(); bv.numel()];
                for r in 0..rows {
                    let grow = &grad.data()[r * (da + db)..(r + 1) * (da + db)];
                    ga[r * da..(r + 1) * da].copy_from_slice(&grow[..da]);
                    gb[r * db..(r + 1) * db].copy_from_slice(&grow[da..]);
                }
                acc(grads, *a, Tensor::from_vec(av.shape(), ga));
                acc(grads, *b, Tensor::from_vec(bv.shape(), gb));
            }
            Op::SliceLast { x, start, len } => {
                let xv = &self.nodes[x.0].value;
                let d = xv.last_dim();
                let rows = xv.leading();
                let mut gx = vec![T::zero(); xv.numel()];
                for r in 0..rows {
                    for c in 0..*len {
                        gx[r * d + start + c] = grad.data()[r * len + c];
                    }
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), gx));
            }
            Op::Embedding { table, ids } => {
                let tv = &self.nodes[table.0].value;
                let d = tv.shape()[1];
                let mut gt = vec![T::zero(); tv.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += grad.data()[row * d + c];
                    }
                }
                acc(grads, *table, Tensor::from_vec(tv.shape(), gt));
            }
            Op::Attention { q, k, v } => {
                let qv = &self.nodes[q.0].value;
                let kv = &self.nodes[k.0].value;
                let vv = &self.nodes[v.0].value;
                let weights = &node.aux[0];
                let (b, lq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
                let lk = kv.shape()[1];
                let scale = T::from_f64(1.0 / (d as f64).sqrt());
                let mut gq = vec![T::zero(); qv.numel()];
                let mut gk = vec![T::zero(); kv.numel()];
                let mut gv = vec![T::zero(); vv.numel()];
                let mut gw = vec![T::zero(); lq * lk];
                let mut gs = vec![T::zero(); lq * lk];
                for bi in 0..b {
                    let wb = &weights.data()[bi * lq * lk..(bi + 1) * lq * lk];
                    let gob = &grad.data()[bi * lq * d..(bi + 1) * lq * d];
                    let vb = &vv.data()[bi * lk * d..(bi + 1) * lk * d];
                    let qb = &qv.data()[bi * lq * d..(bi + 1) * lq * d];
                    let kb = &kv.data()[bi * lk * d..(bi + 1) * lk * d];
                    // d v = wT · d out
                    T::gemm(
                        lk,
                        lq,
                        d,
                        wb,
                        true,
                        gob,
                        false,
                        false,
                        &mut gv[bi * lk * d..(bi + 1) * lk * d],
                    );
                    // d w = d out · vT
                    T::gemm(lq, d, lk, gob, false, vb, true, false, &mut gw);
                    // softmax backward rows; masked positions have w = 0.
                    for i in 0..lq {
                        let wrow = &wb[i * lk..(i + 1) * lk];
                        let gwrow = &gw[i * lk..(i + 1) * lk];
                        let dot = wrow
                            .iter()
                            .zip(gwrow)
                            .map(|(&w, &g)| w * g)
                            .sum::<T>();
                        for j in 0..lk {
                            gs[i * lk + j] = wrow[j] * (gwrow[j] - dot) * scale;
                        }
                    }
                    // d q = gs · k ; d k = gsT · q
                    T::gemm(
                        lq,
                        lk,
                        d,
                        &gs,
                        false,
                        kb,
                        false,
                        false,
                        &mut gq[bi * lq * d..(bi + 1) * lq * d],
                    );
                    T::gemm(
                        lk,
                        lq,
                        d,
                        &gs,
                        true,
                        qb,
                        false,
                        false,
                        &mut gk[bi * lk * d..(bi + 1) * lk * d],
                    );
                }
                acc(grads, *q, Tensor::from_vec(qv.shape(), gq));
                acc(grads, *k, Tensor::from_vec(kv.shape(), gk));
                acc(grads, *v, Tensor::from_vec(vv.shape(), gv));
            }
            Op::SplitHeads { x, heads } => {
                let xv = &self.nodes[x.0].value;
                let (b, l, dm) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let d = dm / heads;
                let mut gx = vec![T::zero(); xv.numel()];
                for bi in 0..b {
                    for li in 0..l {
                        for h in 0..*heads {
                            let src_row = (bi * heads + h) * l + li;
                            let src = &grad.data()[src_row * d..(src_row + 1) * d];
                            gx[(bi * l + li) * dm + h * d..(bi * l + li) * dm + (h + 1) * d]
                                .copy_from_slice(src);
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), gx));
            }
            Op::MergeHeads { x, heads } => {
                let xv = &self.nodes[x.0].value;
                let (bh, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let b = bh / heads;
                let dm = heads * d;
                let mut gx = vec![T::zero(); xv.numel()];
                for bi in 0..b {
                    for li in 0..l {
                        for h in 0..*heads {
                            let dst_row = (bi * heads + h) * l + li;
                            let src = &grad.data()
                                [(bi * l + li) * dm + h * d..(bi * l + li) * dm + (h + 1) * d];
                            gx[dst_row * d..(dst_row + 1) * d].copy_from_slice(src);
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), gx));
            }
            Op::RepeatRows { x, times } => {
                let xv = &self.nodes[x.0].value;
                let b = xv.shape()[0];
                let entry = xv.numel() / b;
                let mut gx = vec![T::zero(); xv.numel()];
                for bi in 0..b {
                    for t in 0..*times {
                        let src = &grad.data()[(bi * times + t) * entry..(bi * times + t + 1) * entry];
                        for (g, &s) in gx[bi * entry..(bi + 1) * entry].iter_mut().zip(src) {
                            *g += s;
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), gx));
            }
            Op::TileRows { x, times } => {
                let xv = &self.nodes[x.0].value;
                let n = xv.numel();
                let mut gx = vec![T::zero(); n];
                for t in 0..*times {
                    for (g, &s) in gx.iter_mut().zip(&grad.data()[t * n..(t + 1) * n]) {
                        *g += s;
                    }
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), gx));
            }
            Op::StackSteps { xs } => {
                let l = xs.len();
                let step_shape = self.nodes[xs[0].0].value.shape().to_vec();
                let (r, d) = (step_shape[0], step_shape[1]);
                for (li, &x) in xs.iter().enumerate() {
                    let mut gx = vec![T::zero(); r * d];
                    for ri in 0..r {
                        gx[ri * d..(ri + 1) * d]
                            .copy_from_slice(&grad.data()[(ri * l + li) * d..(ri * l + li + 1) * d]);
                    }
                    acc(grads, x, Tensor::from_vec(&step_shape, gx));
                }
            }
            Op::Reshape { x } => {
                let xv = &self.nodes[x.0].value;
                acc(grads, *x, Tensor::from_vec(xv.shape(), grad.data().to_vec()));
            }
            Op::Sum { x } => {
                let xv = &self.nodes[x.0].value;
                acc(grads, *x, Tensor::filled(xv.shape(), grad.data()[0]));
            }
            Op::Scale { x, factor } => {
                acc(grads, *x, grad.map(|g| g * *factor));
            }
        }
    }
}

fn softmax_last_axis<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.last_dim();
    let rows = x.leading();
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for c in 0..d {
            let e = (row[c] - max).exp();
            out[r * d + c] = e;
            denom += e;
        }
        for c in 0..d {
            out[r * d + c] = out[r * d + c] / denom;
        }
    }
    Tensor::from_vec(x.shape(), out)
}
