//! Wengert-tape reverse-mode differentiation over dense f64 tensors.
//!
//! Operations append nodes in topological order; [`Tape::backward`] sweeps
//! the nodes in exact reverse order, pushing adjoints into each node's
//! operands. Gradients accumulate additively: running backward twice without
//! zeroing doubles every gradient. After each backward pass the accumulated
//! gradients of watched parameters are copied into `Param::grad`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::{fmt_shape, numel, strides_of, ParamRef};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Conv1d { input: TensorId, kernel: TensorId, dilation: usize },
    AddBias { x: TensorId, bias: TensorId, axis: usize },
    Tanh { x: TensorId },
    Sigmoid { x: TensorId },
    Relu { x: TensorId },
    Abs { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Hadamard { a: TensorId, b: TensorId },
    MulScalar { x: TensorId, c: f64 },
    Concat { parts: Vec<TensorId>, axis: usize },
    SliceLastSteps { x: TensorId, keep: usize },
    Transpose { x: TensorId, perm: Vec<usize> },
    Softmax { x: TensorId, axis: usize },
    Dropout { x: TensorId, mask: Vec<f64> },
    LayerNorm(Box<LayerNormRec>),
    Sum { x: TensorId },
    Mean { x: TensorId },
    Reshape { x: TensorId },
    IndexSelect { x: TensorId, axis: usize, indices: Vec<usize> },
    NormalizeAdjacency { a: TensorId },
    AffineAxis { x: TensorId, axis: usize, scale: Vec<f64> },
}

#[derive(Debug, Clone)]
struct LayerNormRec {
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    // Saved statistics, one entry per normalization group.
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    // Offset tables: every element index is group_offsets[g] + axes_offsets[j].
    group_offsets: Vec<usize>,
    axes_offsets: Vec<usize>,
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. One per forward/backward pass in training; confined to a
/// single thread together with the parameters it watches.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    watched: Vec<(ParamRef, TensorId)>,
    macs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), watched: Vec::new(), macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by matmul/conv nodes so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Accumulated gradient of a tensor, if backward has reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Tape handles of all watched trainable parameters, in watch order.
    pub fn trainable_leaves(&self) -> Vec<TensorId> {
        self.watched
            .iter()
            .filter(|(p, _)| p.borrow().trainable)
            .map(|(_, id)| *id)
            .collect()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { data, shape, op, needs_grad });
        self.grads.push(None);
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record a constant (non-differentiated) tensor.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> TensorId {
        assert_eq!(data.len(), numel(shape), "constant data/shape mismatch");
        self.push(data, shape.to_vec(), Op::Leaf, false)
    }

    /// Record an anonymous differentiated leaf (used by gradient checks).
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> TensorId {
        assert_eq!(data.len(), numel(shape), "leaf data/shape mismatch");
        self.push(data, shape.to_vec(), Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![v], &[1])
    }

    /// Bind a parameter to this tape. Repeated watches of the same parameter
    /// return the same leaf so gradients accumulate in one buffer.
    pub fn watch(&mut self, param: &ParamRef) -> TensorId {
        for (p, id) in &self.watched {
            if Rc::ptr_eq(p, param) {
                return *id;
            }
        }
        let (data, shape, trainable) = {
            let p = param.borrow();
            (p.data.clone(), p.shape.clone(), p.trainable)
        };
        let id = self.push(data, shape, Op::Leaf, trainable);
        self.watched.push((param.clone(), id));
        id
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.nodes[x.0].data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} into {}",
                fmt_shape(&self.nodes[x.0].shape),
                fmt_shape(shape)
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let needs = self.needs(x);
        Ok(self.push(data, shape.to_vec(), Op::Reshape { x }, needs))
    }

    pub fn transpose(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p.min(rank - 1)], true)) {
            return Err(Error::Dimension(format!(
                "invalid permutation {:?} for rank-{rank} tensor",
                perm
            )));
        }
        let (data, out_shape) = permute(&self.nodes[x.0].data, &shape, perm);
        let needs = self.needs(x);
        Ok(self.push(data, out_shape, Op::Transpose { x, perm: perm.to_vec() }, needs))
    }

    /// Swap the last two axes; the plain 2-D transpose when rank is 2.
    pub fn transpose_last2(&mut self, x: TensorId) -> Result<TensorId> {
        let rank = self.nodes[x.0].shape.len();
        if rank < 2 {
            return Err(Error::Dimension(format!(
                "transpose needs rank >= 2, got {}",
                fmt_shape(&self.nodes[x.0].shape)
            )));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.transpose(x, &perm)
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let base = self.nodes[parts[0].0].shape.clone();
        if axis >= base.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Dimension(format!(
                    "concat operands {} vs {} differ off axis {axis}",
                    fmt_shape(s),
                    fmt_shape(&base)
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = vec![0.0; numel(&out_shape)];
        let row = axis_total * inner;
        let mut col = 0usize;
        for &p in parts {
            let s_axis = self.nodes[p.0].shape[axis];
            let chunk = s_axis * inner;
            let src = &self.nodes[p.0].data;
            for oi in 0..outer {
                data[oi * row + col..oi * row + col + chunk]
                    .copy_from_slice(&src[oi * chunk..(oi + 1) * chunk]);
            }
            col += chunk;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(data, out_shape, Op::Concat { parts: parts.to_vec(), axis }, needs))
    }

    /// Keep the last `keep` positions along the final axis.
    pub fn slice_last_steps(&mut self, x: TensorId, keep: usize) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let t = *shape.last().ok_or_else(|| Error::Dimension("slice of rank-0 tensor".into()))?;
        if keep > t {
            return Err(Error::Length { required: keep, got: t });
        }
        let outer = numel(&shape) / t;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = keep;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; outer * keep];
        for oi in 0..outer {
            data[oi * keep..(oi + 1) * keep]
                .copy_from_slice(&src[oi * t + (t - keep)..(oi + 1) * t]);
        }
        let needs = self.needs(x);
        Ok(self.push(data, out_shape, Op::SliceLastSteps { x, keep }, needs))
    }

    /// Gather slices along `axis` in the given index order.
    pub fn index_select(&mut self, x: TensorId, axis: usize, indices: &[usize]) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "index_select axis {axis} out of range for {}",
                fmt_shape(&shape)
            )));
        }
        let len = shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::Dimension(format!(
                "index {bad} out of range for axis {axis} of extent {len}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; outer * indices.len() * inner];
        for oi in 0..outer {
            for (pos, &ix) in indices.iter().enumerate() {
                let dst = (oi * indices.len() + pos) * inner;
                let s = (oi * len + ix) * inner;
                data[dst..dst + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            data,
            out_shape,
            Op::IndexSelect { x, axis, indices: indices.to_vec() },
            needs,
        ))
    }

    // ── elementwise ops ──────────────────────────────────────────────

    fn unary(&mut self, x: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(data, shape, op, needs)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu { x })
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::abs, Op::Abs { x })
    }

    pub fn mul_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, |v| v * c, Op::MulScalar { x, c })
    }

    fn binary_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        name: &str,
    ) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension(format!(
                "{name} operands {} vs {}",
                fmt_shape(&self.nodes[a.0].shape),
                fmt_shape(&self.nodes[b.0].shape)
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, op, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, |x, y| x + y, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, |x, y| x * y, Op::Hadamard { a, b }, "hadamard")
    }

    /// Broadcast-add a 1-D bias along `axis`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "bias axis {axis} out of range for {}",
                fmt_shape(&shape)
            )));
        }
        let bshape = &self.nodes[bias.0].shape;
        if bshape.len() != 1 || bshape[0] != shape[axis] {
            return Err(Error::Dimension(format!(
                "bias {} does not match axis {axis} of {}",
                fmt_shape(bshape),
                fmt_shape(&shape)
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = &self.nodes[x.0].data;
        let bdata = &self.nodes[bias.0].data;
        let mut data = vec![0.0; src.len()];
        for oi in 0..outer {
            for c in 0..len {
                let base = (oi * len + c) * inner;
                let bv = bdata[c];
                for ii in 0..inner {
                    data[base + ii] = src[base + ii] + bv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(data, shape, Op::AddBias { x, bias, axis }, needs))
    }

    /// Per-position affine along one axis with constant coefficients:
    /// `out = x * scale[i] + shift[i]` where `i` indexes `axis`.
    pub fn affine_axis(
        &mut self,
        x: TensorId,
        axis: usize,
        scale: &[f64],
        shift: &[f64],
    ) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "affine axis {axis} out of range for {}",
                fmt_shape(&shape)
            )));
        }
        if scale.len() != shape[axis] || shift.len() != shape[axis] {
            return Err(Error::Dimension(format!(
                "affine coefficients of length {} (scale) / {} (shift) do not match axis extent {}",
                scale.len(),
                shift.len(),
                shape[axis]
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; src.len()];
        for oi in 0..outer {
            for c in 0..len {
                let base = (oi * len + c) * inner;
                for ii in 0..inner {
                    data[base + ii] = src[base + ii] * scale[c] + shift[c];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(data, shape, Op::AffineAxis { x, axis, scale: scale.to_vec() }, needs))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let needs = self.needs(x);
        self.push(vec![s], vec![1], Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len().max(1);
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let needs = self.needs(x);
        self.push(vec![s / n as f64], vec![1], Op::Mean { x }, needs)
    }

    // ── structured ops ───────────────────────────────────────────────

    /// Batched matrix product with leading-dimension broadcasting:
    /// `a [..,m,k] @ b [..,k,n] -> [..,m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let ashape = self.nodes[a.0].shape.clone();
        let bshape = self.nodes[b.0].shape.clone();
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(Error::Dimension(format!(
                "matmul needs rank >= 2: {} vs {}",
                fmt_shape(&ashape),
                fmt_shape(&bshape)
            )));
        }
        let (m, ka) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {} vs {}",
                fmt_shape(&ashape),
                fmt_shape(&bshape)
            )));
        }
        let batch = broadcast_batch(&ashape[..ashape.len() - 2], &bshape[..bshape.len() - 2])
            .ok_or_else(|| {
                Error::Dimension(format!(
                    "matmul batch dims incompatible: {} vs {}",
                    fmt_shape(&ashape),
                    fmt_shape(&bshape)
                ))
            })?;
        let nb = numel(&batch);
        let a_off = batch_offsets(&batch, &ashape[..ashape.len() - 2], m * ka);
        let b_off = batch_offsets(&batch, &bshape[..bshape.len() - 2], kb * n);
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![0.0; nb * m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for bi in 0..nb {
                let asl = &ad[a_off[bi]..a_off[bi] + m * ka];
                let bsl = &bd[b_off[bi]..b_off[bi] + kb * n];
                let osl = &mut data[bi * m * n..(bi + 1) * m * n];
                matmul_slice(asl, bsl, osl, m, ka, n);
            }
        }
        self.macs += (nb * m * ka * n) as u64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, out_shape, Op::Matmul { a, b }, needs))
    }

    /// Valid (no padding) dilated temporal convolution.
    /// `input [b,c_in,n,t]`, `kernel [c_out,c_in,1,k]` -> `[b,c_out,n,t-d(k-1)]`
    /// with `out(τ) = Σ_s kernel(s) · input(τ - d·s)` per node and channel.
    pub fn conv1d_dilated(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        dilation: usize,
    ) -> Result<TensorId> {
        let ishape = self.nodes[input.0].shape.clone();
        let kshape = self.nodes[kernel.0].shape.clone();
        if ishape.len() != 4 || kshape.len() != 4 || kshape[2] != 1 {
            return Err(Error::Dimension(format!(
                "conv1d expects input [b,c_in,n,t] and kernel [c_out,c_in,1,k], got {} and {}",
                fmt_shape(&ishape),
                fmt_shape(&kshape)
            )));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be >= 1".into()));
        }
        let (b, ci, nn, t) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (co, cik, k) = (kshape[0], kshape[1], kshape[3]);
        if ci != cik {
            return Err(Error::Dimension(format!(
                "conv1d channel mismatch: input {} vs kernel {}",
                fmt_shape(&ishape),
                fmt_shape(&kshape)
            )));
        }
        let span = dilation * (k - 1);
        if t <= span {
            return Err(Error::Length { required: span + 1, got: t });
        }
        let l = t - span;
        let mut data = vec![0.0; b * co * nn * l];
        {
            let xs = &self.nodes[input.0].data;
            let ks = &self.nodes[kernel.0].data;
            if k == 1 {
                // Pointwise channel map: each output plane is a weighted sum
                // of contiguous input planes.
                let plane = nn * t;
                for bi in 0..b {
                    for o in 0..co {
                        let orow = &mut data[(bi * co + o) * plane..(bi * co + o + 1) * plane];
                        for c in 0..ci {
                            let w = ks[o * ci + c];
                            if w == 0.0 {
                                continue;
                            }
                            let xrow = &xs[(bi * ci + c) * plane..(bi * ci + c + 1) * plane];
                            for j in 0..plane {
                                orow[j] += w * xrow[j];
                            }
                        }
                    }
                }
            } else if l < k {
                // Collapsing convolutions (1xL skip taps): one dot product
                // per output element over the kernel width.
                for bi in 0..b {
                    for o in 0..co {
                        for v in 0..nn {
                            let dst = ((bi * co + o) * nn + v) * l;
                            for j in 0..l {
                                let mut acc = 0.0;
                                for c in 0..ci {
                                    let krow = &ks[(o * ci + c) * k..(o * ci + c + 1) * k];
                                    let base = ((bi * ci + c) * nn + v) * t + j;
                                    for s in 0..k {
                                        acc += krow[s] * xs[base + dilation * (k - 1 - s)];
                                    }
                                }
                                data[dst + j] = acc;
                            }
                        }
                    }
                }
            } else {
                for bi in 0..b {
                    for o in 0..co {
                        for c in 0..ci {
                            for s in 0..k {
                                let w = ks[((o * ci + c) * k) + s];
                                if w == 0.0 {
                                    continue;
                                }
                                let off = dilation * (k - 1 - s);
                                for v in 0..nn {
                                    let src = ((bi * ci + c) * nn + v) * t + off;
                                    let dst = ((bi * co + o) * nn + v) * l;
                                    let xrow = &xs[src..src + l];
                                    let orow = &mut data[dst..dst + l];
                                    for j in 0..l {
                                        orow[j] += w * xrow[j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.macs += (b * co * ci * k * nn * l) as u64;
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            data,
            vec![b, co, nn, l],
            Op::Conv1d { input, kernel, dilation },
            needs,
        ))
    }

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for {}",
                fmt_shape(&shape)
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; src.len()];
        for oi in 0..outer {
            for ii in 0..inner {
                let at = |l: usize| (oi * len + l) * inner + ii;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(src[at(l)]);
                }
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - mx).exp();
                    data[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    data[at(l)] /= total;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(data, shape, Op::Softmax { x, axis }, needs))
    }

    /// Inverted dropout: in training mode retained entries are scaled by
    /// `1/(1-p)`; in eval mode (or p = 0) this is the identity.
    pub fn dropout(
        &mut self,
        x: TensorId,
        p: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate must be in [0,1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> =
            self.nodes[x.0].data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        Ok(self.push(data, shape, Op::Dropout { x, mask }, needs))
    }

    /// Layer normalization over `axes` with learnable affine. `gamma` and
    /// `beta` have exactly the extents of the normalized axes (ascending).
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        axes: &[usize],
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let rank = shape.len();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.is_empty() || axes.iter().any(|&a| a >= rank) {
            return Err(Error::Dimension(format!(
                "layer_norm axes {:?} invalid for {}",
                axes,
                fmt_shape(&shape)
            )));
        }
        let norm_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[t.0].shape != norm_shape {
                return Err(Error::Dimension(format!(
                    "layer_norm {name} {} does not match normalized extents {}",
                    fmt_shape(&self.nodes[t.0].shape),
                    fmt_shape(&norm_shape)
                )));
            }
        }
        let strides = strides_of(&shape);
        let group_axes: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).collect();
        let group_offsets = offset_table(&shape, &strides, &group_axes);
        let axes_offsets = offset_table(&shape, &strides, &axes);
        let m = axes_offsets.len() as f64;
        let src = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut data = vec![0.0; src.len()];
        let mut means = Vec::with_capacity(group_offsets.len());
        let mut inv_stds = Vec::with_capacity(group_offsets.len());
        for &go in &group_offsets {
            let mut mean = 0.0;
            for &ao in &axes_offsets {
                mean += src[go + ao];
            }
            mean /= m;
            let mut var = 0.0;
            for &ao in &axes_offsets {
                let d = src[go + ao] - mean;
                var += d * d;
            }
            var /= m;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (j, &ao) in axes_offsets.iter().enumerate() {
                let xhat = (src[go + ao] - mean) * inv_std;
                data[go + ao] = gd[j] * xhat + bd[j];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            data,
            shape,
            Op::LayerNorm(Box::new(LayerNormRec {
                x,
                gamma,
                beta,
                inv_std: inv_stds,
                mean: means,
                group_offsets,
                axes_offsets,
            })),
            needs,
        ))
    }

    /// Row-normalize the trailing `[n,n]` slices: `Ã = D̃⁻¹(A + I)` with
    /// `D̃ᵢᵢ = 1 + Σⱼ Aᵢⱼ`; every row of the result sums to 1.
    pub fn normalize_adjacency(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        let rank = shape.len();
        if rank < 2 || shape[rank - 1] != shape[rank - 2] {
            return Err(Error::Dimension(format!(
                "adjacency must end in square [n,n], got {}",
                fmt_shape(&shape)
            )));
        }
        let n = shape[rank - 1];
        let slices = numel(&shape) / (n * n);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; src.len()];
        for sl in 0..slices {
            let base = sl * n * n;
            for i in 0..n {
                let row = base + i * n;
                let mut d = 1.0;
                for j in 0..n {
                    d += src[row + j];
                }
                for j in 0..n {
                    let with_self = src[row + j] + if i == j { 1.0 } else { 0.0 };
                    data[row + j] = with_self / d;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(data, shape, Op::NormalizeAdjacency { a }, needs))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Accumulates into persistent per-node
    /// gradient buffers, then copies the leaf gradients into every watched
    /// trainable parameter.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {}",
                fmt_shape(&self.nodes[loss.0].shape)
            )));
        }
        let n = self.nodes.len();
        let mut delta: Vec<Option<Vec<f64>>> = vec![None; n];
        delta[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = delta[id].take() else { continue };
            self.propagate(id, &g, &mut delta);
            match &mut self.grads[id] {
                Some(acc) => {
                    for (a, &gv) in acc.iter_mut().zip(&g) {
                        *a += gv;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        // Sync watched parameters with the tape's accumulated gradients.
        for (param, leaf) in &self.watched {
            let mut p = param.borrow_mut();
            if p.trainable {
                if let Some(g) = &self.grads[leaf.0] {
                    p.grad = Some(g.clone());
                }
            }
        }
        Ok(())
    }

    fn seed(delta: &mut [Option<Vec<f64>>], id: TensorId, len: usize) -> &mut Vec<f64> {
        delta[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, id: usize, g: &[f64], delta: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Matmul { a, b } => self.backward_matmul(id, a, b, g, delta),
            &Op::Conv1d { input, kernel, dilation } => {
                self.backward_conv1d(id, input, kernel, dilation, g, delta)
            }
            &Op::AddBias { x, bias, axis } => {
                let shape = &self.nodes[x.0].shape;
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                if self.needs(x) {
                    let gx = Self::seed(delta, x, g.len());
                    for (dst, &gv) in gx.iter_mut().zip(g) {
                        *dst += gv;
                    }
                }
                if self.needs(bias) {
                    let gb = Self::seed(delta, bias, len);
                    for oi in 0..outer {
                        for c in 0..len {
                            let base = (oi * len + c) * inner;
                            let mut s = 0.0;
                            for ii in 0..inner {
                                s += g[base + ii];
                            }
                            gb[c] += s;
                        }
                    }
                }
            }
            &Op::Tanh { x } => {
                let y = &self.nodes[id].data;
                let gx = Self::seed(delta, x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            &Op::Sigmoid { x } => {
                let y = &self.nodes[id].data;
                let gx = Self::seed(delta, x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            &Op::Relu { x } => {
                let y = &self.nodes[id].data;
                let gx = Self::seed(delta, x, g.len());
                for i in 0..g.len() {
                    if y[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            &Op::Abs { x } => {
                let xd = &self.nodes[x.0].data;
                let gx = Self::seed(delta, x, g.len());
                for i in 0..g.len() {
                    // Subgradient 0 at the kink.
                    gx[i] += g[i] * if xd[i] > 0.0 { 1.0 } else if xd[i] < 0.0 { -1.0 } else { 0.0 };
                }
            }
            &Op::Add { a, b } => {
                for t in [a, b] {
                    if self.needs(t) {
                        let gt = Self::seed(delta, t, g.len());
                        for (dst, &gv) in gt.iter_mut().zip(g) {
                            *dst += gv;
                        }
                    }
                }
            }
            &Op::Sub { a, b } => {
                if self.needs(a) {
                    let ga = Self::seed(delta, a, g.len());
                    for (dst, &gv) in ga.iter_mut().zip(g) {
                        *dst += gv;
                    }
                }
                if self.needs(b) {
                    let gb = Self::seed(delta, b, g.len());
                    for (dst, &gv) in gb.iter_mut().zip(g) {
                        *dst -= gv;
                    }
                }
            }
            &Op::Hadamard { a, b } => {
                if self.needs(a) {
                    let bd = &self.nodes[b.0].data;
                    let ga = Self::seed(delta, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if self.needs(b) {
                    let ad = &self.nodes[a.0].data;
                    let gb = Self::seed(delta, b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            &Op::MulScalar { x, c } => {
                let gx = Self::seed(delta, x, g.len());
                for (dst, &gv) in gx.iter_mut().zip(g) {
                    *dst += c * gv;
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = &self.nodes[id].shape;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[axis] * inner;
                let mut col = 0usize;
                for &p in parts {
                    let chunk = self.nodes[p.0].shape[axis] * inner;
                    if self.needs(p) {
                        let gp = Self::seed(delta, p, self.nodes[p.0].data.len());
                        for oi in 0..outer {
                            for j in 0..chunk {
                                gp[oi * chunk + j] += g[oi * row + col + j];
                            }
                        }
                    }
                    col += chunk;
                }
            }
            &Op::SliceLastSteps { x, keep } => {
                let t = *self.nodes[x.0].shape.last().unwrap();
                let outer = self.nodes[x.0].data.len() / t;
                let gx = Self::seed(delta, x, self.nodes[x.0].data.len());
                for oi in 0..outer {
                    for j in 0..keep {
                        gx[oi * t + (t - keep) + j] += g[oi * keep + j];
                    }
                }
            }
            Op::Transpose { x, perm } => {
                // Gradient is the inverse permutation of the upstream gradient.
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (gperm, _) = permute(g, &self.nodes[id].shape, &inv);
                let gx = Self::seed(delta, *x, gperm.len());
                for (dst, gv) in gx.iter_mut().zip(gperm) {
                    *dst += gv;
                }
            }
            &Op::Softmax { x, axis } => {
                let shape = &self.nodes[id].shape;
                let y = &self.nodes[id].data;
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let gx = Self::seed(delta, x, g.len());
                for oi in 0..outer {
                    for ii in 0..inner {
                        let at = |l: usize| (oi * len + l) * inner + ii;
                        let mut dot = 0.0;
                        for l in 0..len {
                            dot += g[at(l)] * y[at(l)];
                        }
                        for l in 0..len {
                            gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = Self::seed(delta, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
            Op::LayerNorm(rec) => self.backward_layer_norm(rec, g, delta),
            &Op::Sum { x } => {
                let gx = Self::seed(delta, x, self.nodes[x.0].data.len());
                for dst in gx.iter_mut() {
                    *dst += g[0];
                }
            }
            &Op::Mean { x } => {
                let n = self.nodes[x.0].data.len().max(1) as f64;
                let gx = Self::seed(delta, x, self.nodes[x.0].data.len());
                let gv = g[0] / n;
                for dst in gx.iter_mut() {
                    *dst += gv;
                }
            }
            &Op::Reshape { x } => {
                let gx = Self::seed(delta, x, g.len());
                for (dst, &gv) in gx.iter_mut().zip(g) {
                    *dst += gv;
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let (x, axis) = (*x, *axis);
                let shape = &self.nodes[x.0].shape;
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let gx = Self::seed(delta, x, self.nodes[x.0].data.len());
                for oi in 0..outer {
                    for (pos, &ix) in indices.iter().enumerate() {
                        let src = (oi * indices.len() + pos) * inner;
                        let dst = (oi * len + ix) * inner;
                        for ii in 0..inner {
                            gx[dst + ii] += g[src + ii];
                        }
                    }
                }
            }
            &Op::NormalizeAdjacency { a } => {
                let shape = &self.nodes[id].shape;
                let rank = shape.len();
                let n = shape[rank - 1];
                let slices = g.len() / (n * n);
                let ad = &self.nodes[a.0].data;
                let y = &self.nodes[id].data;
                let ga = Self::seed(delta, a, g.len());
                for sl in 0..slices {
                    let base = sl * n * n;
                    for i in 0..n {
                        let row = base + i * n;
                        let mut d = 1.0;
                        let mut gdot = 0.0;
                        for j in 0..n {
                            d += ad[row + j];
                            gdot += g[row + j] * y[row + j];
                        }
                        for j in 0..n {
                            ga[row + j] += (g[row + j] - gdot) / d;
                        }
                    }
                }
            }
            Op::AffineAxis { x, axis, scale } => {
                let (x, axis) = (*x, *axis);
                let shape = &self.nodes[x.0].shape;
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let gx = Self::seed(delta, x, g.len());
                for oi in 0..outer {
                    for c in 0..len {
                        let base = (oi * len + c) * inner;
                        for ii in 0..inner {
                            gx[base + ii] += g[base + ii] * scale[c];
                        }
                    }
                }
            }
        }
    }

    fn backward_matmul(
        &self,
        id: usize,
        a: TensorId,
        b: TensorId,
        g: &[f64],
        delta: &mut Vec<Option<Vec<f64>>>,
    ) {
        let ashape = &self.nodes[a.0].shape;
        let bshape = &self.nodes[b.0].shape;
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let n = bshape[bshape.len() - 1];
        let batch = self.nodes[id].shape[..self.nodes[id].shape.len() - 2].to_vec();
        let nb = numel(&batch);
        let a_off = batch_offsets(&batch, &ashape[..ashape.len() - 2], m * k);
        let b_off = batch_offsets(&batch, &bshape[..bshape.len() - 2], k * n);
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        if self.needs(a) {
            let ga = Self::seed(delta, a, ad.len());
            for bi in 0..nb {
                let gsl = &g[bi * m * n..(bi + 1) * m * n];
                let bsl = &bd[b_off[bi]..b_off[bi] + k * n];
                let asl = &mut ga[a_off[bi]..a_off[bi] + m * k];
                // ga += g · bᵀ
                for i in 0..m {
                    let grow = &gsl[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bsl[p * n..(p + 1) * n];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grow[j] * brow[j];
                        }
                        asl[i * k + p] += s;
                    }
                }
            }
        }
        if self.needs(b) {
            let gb = Self::seed(delta, b, bd.len());
            for bi in 0..nb {
                let gsl = &g[bi * m * n..(bi + 1) * m * n];
                let asl = &ad[a_off[bi]..a_off[bi] + m * k];
                let bsl = &mut gb[b_off[bi]..b_off[bi] + k * n];
                // gb += aᵀ · g
                for p in 0..k {
                    let brow = &mut bsl[p * n..(p + 1) * n];
                    for i in 0..m {
                        let av = asl[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let grow = &gsl[i * n..(i + 1) * n];
                        for j in 0..n {
                            brow[j] += av * grow[j];
                        }
                    }
                }
            }
        }
    }

    fn backward_conv1d(
        &self,
        id: usize,
        input: TensorId,
        kernel: TensorId,
        dilation: usize,
        g: &[f64],
        delta: &mut Vec<Option<Vec<f64>>>,
    ) {
        let ishape = &self.nodes[input.0].shape;
        let kshape = &self.nodes[kernel.0].shape;
        let (b, ci, nn, t) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (co, k) = (kshape[0], kshape[3]);
        let l = self.nodes[id].shape[3];
        let xs = &self.nodes[input.0].data;
        let ks = &self.nodes[kernel.0].data;
        if self.needs(input) {
            let gx = Self::seed(delta, input, xs.len());
            if k == 1 {
                let plane = nn * t;
                for bi in 0..b {
                    for o in 0..co {
                        let grow = &g[(bi * co + o) * plane..(bi * co + o + 1) * plane];
                        for c in 0..ci {
                            let w = ks[o * ci + c];
                            if w == 0.0 {
                                continue;
                            }
                            let xrow =
                                &mut gx[(bi * ci + c) * plane..(bi * ci + c + 1) * plane];
                            for j in 0..plane {
                                xrow[j] += w * grow[j];
                            }
                        }
                    }
                }
            } else if l < k {
                for bi in 0..b {
                    for o in 0..co {
                        for v in 0..nn {
                            let src = ((bi * co + o) * nn + v) * l;
                            for j in 0..l {
                                let gv = g[src + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for c in 0..ci {
                                    let krow = &ks[(o * ci + c) * k..(o * ci + c + 1) * k];
                                    let base = ((bi * ci + c) * nn + v) * t + j;
                                    for s in 0..k {
                                        gx[base + dilation * (k - 1 - s)] += gv * krow[s];
                                    }
                                }
                            }
                        }
                    }
                }
            } else {
                for bi in 0..b {
                    for o in 0..co {
                        for c in 0..ci {
                            for s in 0..k {
                                let w = ks[((o * ci + c) * k) + s];
                                if w == 0.0 {
                                    continue;
                                }
                                let off = dilation * (k - 1 - s);
                                for v in 0..nn {
                                    let src = ((bi * co + o) * nn + v) * l;
                                    let dst = ((bi * ci + c) * nn + v) * t + off;
                                    let grow = &g[src..src + l];
                                    let xrow = &mut gx[dst..dst + l];
                                    for j in 0..l {
                                        xrow[j] += w * grow[j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if self.needs(kernel) {
            let gk = Self::seed(delta, kernel, ks.len());
            if k == 1 {
                let plane = nn * t;
                for bi in 0..b {
                    for o in 0..co {
                        let grow = &g[(bi * co + o) * plane..(bi * co + o + 1) * plane];
                        for c in 0..ci {
                            let xrow = &xs[(bi * ci + c) * plane..(bi * ci + c + 1) * plane];
                            let mut acc = 0.0;
                            for j in 0..plane {
                                acc += grow[j] * xrow[j];
                            }
                            gk[o * ci + c] += acc;
                        }
                    }
                }
            } else if l < k {
                for bi in 0..b {
                    for o in 0..co {
                        for v in 0..nn {
                            let src = ((bi * co + o) * nn + v) * l;
                            for j in 0..l {
                                let gv = g[src + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for c in 0..ci {
                                    let base = ((bi * ci + c) * nn + v) * t + j;
                                    let krow = &mut gk[(o * ci + c) * k..(o * ci + c + 1) * k];
                                    for s in 0..k {
                                        krow[s] += gv * xs[base + dilation * (k - 1 - s)];
                                    }
                                }
                            }
                        }
                    }
                }
            } else {
                for bi in 0..b {
                    for o in 0..co {
                        for c in 0..ci {
                            for s in 0..k {
                                let off = dilation * (k - 1 - s);
                                let mut acc = 0.0;
                                for v in 0..nn {
                                    let gsl = ((bi * co + o) * nn + v) * l;
                                    let xsl = ((bi * ci + c) * nn + v) * t + off;
                                    let grow = &g[gsl..gsl + l];
                                    let xrow = &xs[xsl..xsl + l];
                                    for j in 0..l {
                                        acc += grow[j] * xrow[j];
                                    }
                                }
                                gk[(o * ci + c) * k + s] += acc;
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_layer_norm(
        &self,
        rec: &LayerNormRec,
        g: &[f64],
        delta: &mut Vec<Option<Vec<f64>>>,
    ) {
        let m = rec.axes_offsets.len() as f64;
        let xd = &self.nodes[rec.x.0].data;
        let gd = &self.nodes[rec.gamma.0].data;
        if self.needs(rec.x) {
            let gx = Self::seed(delta, rec.x, xd.len());
            for (gi, &go) in rec.group_offsets.iter().enumerate() {
                let mean = rec.mean[gi];
                let inv_std = rec.inv_std[gi];
                // dl/dxhat = gamma * g; standard layer-norm backward.
                let mut sum_gy = 0.0;
                let mut sum_gy_xhat = 0.0;
                for (j, &ao) in rec.axes_offsets.iter().enumerate() {
                    let gy = gd[j] * g[go + ao];
                    let xhat = (xd[go + ao] - mean) * inv_std;
                    sum_gy += gy;
                    sum_gy_xhat += gy * xhat;
                }
                let mean_gy = sum_gy / m;
                let mean_gy_xhat = sum_gy_xhat / m;
                for (j, &ao) in rec.axes_offsets.iter().enumerate() {
                    let gy = gd[j] * g[go + ao];
                    let xhat = (xd[go + ao] - mean) * inv_std;
                    gx[go + ao] += (gy - mean_gy - xhat * mean_gy_xhat) * inv_std;
                }
            }
        }
        if self.needs(rec.gamma) {
            let gg = Self::seed(delta, rec.gamma, gd.len());
            for (gi, &go) in rec.group_offsets.iter().enumerate() {
                let mean = rec.mean[gi];
                let inv_std = rec.inv_std[gi];
                for (j, &ao) in rec.axes_offsets.iter().enumerate() {
                    let xhat = (xd[go + ao] - mean) * inv_std;
                    gg[j] += g[go + ao] * xhat;
                }
            }
        }
        if self.needs(rec.beta) {
            let gb = Self::seed(delta, rec.beta, self.nodes[rec.beta.0].data.len());
            for &go in &rec.group_offsets {
                for (j, &ao) in rec.axes_offsets.iter().enumerate() {
                    gb[j] += g[go + ao];
                }
            }
        }
    }
}

// ── helpers ──────────────────────────────────────────────────────────

fn matmul_slice(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Numpy-style broadcast of two batch-dimension lists (right aligned).
fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let len = a.len().max(b.len());
    let mut out = vec![0usize; len];
    for i in 0..len {
        let da = if i < len - a.len() { 1 } else { a[i - (len - a.len())] };
        let db = if i < len - b.len() { 1 } else { b[i - (len - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// For each flat index of the broadcast batch shape, the element offset of
/// the corresponding slice in an operand with batch dims `dims` and per-slice
/// element count `slice`.
fn batch_offsets(batch: &[usize], dims: &[usize], slice: usize) -> Vec<usize> {
    let nb = numel(batch);
    let pad = batch.len() - dims.len();
    // Strides of the operand's batch portion, measured in slices.
    let mut dim_strides = vec![0usize; batch.len()];
    let mut acc = 1usize;
    for i in (0..dims.len()).rev() {
        dim_strides[pad + i] = if dims[i] == 1 { 0 } else { acc };
        acc *= dims[i];
    }
    let mut out = Vec::with_capacity(nb);
    for flat in 0..nb {
        let mut rem = flat;
        let mut off = 0usize;
        for d in (0..batch.len()).rev() {
            let c = rem % batch[d];
            rem /= batch[d];
            off += c * dim_strides[d];
        }
        out.push(off * slice);
    }
    out
}

/// Materialize a permutation of axes; returns (data, new shape).
fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![0.0; data.len()];
    let total = data.len();
    for flat in 0..total {
        let mut rem = flat;
        let mut src = 0usize;
        for d in 0..rank {
            let c = rem / out_strides[d];
            rem %= out_strides[d];
            src += c * in_strides[perm[d]];
        }
        out[flat] = data[src];
    }
    (out, out_shape)
}

/// Offsets contributed by every combination of coordinates along `axes`,
/// enumerated in row-major order of those axes.
fn offset_table(shape: &[usize], strides: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut table = vec![0usize];
    for &a in axes {
        let mut next = Vec::with_capacity(table.len() * shape[a]);
        for &base in &table {
            for c in 0..shape[a] {
                next.push(base + c * strides[a]);
            }
        }
        table = next;
    }
    table
}
