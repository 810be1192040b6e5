use std::collections::BTreeMap;
use std::rc::Rc;

use crate::real::{gemm, Layout};
use crate::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `x[b, l, d] + rows[l, d]`
    AddRows { x: NodeId, rows: NodeId },
    /// `x * (1 + m[:, scale..]) + m[:, shift..]`, broadcast over tokens.
    Modulate { x: NodeId, m: NodeId, shift: usize, scale: usize },
    /// `x + m[:, gate..] * y`, broadcast over tokens.
    GatedAdd { x: NodeId, y: NodeId, m: NodeId, gate: usize },
    LayerNorm { x: NodeId, rstd: Vec<F> },
    Silu(NodeId),
    Gelu(NodeId),
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<F> },
    Gather { x: NodeId, index: Rc<Vec<usize>> },
    Narrow { x: NodeId, start: usize, len: usize },
    Abs(NodeId),
    Sqr(NodeId),
    Mean(NodeId),
    DiffW(NodeId),
    DiffH(NodeId),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended by the op methods and evaluated
/// eagerly; [`Graph::backward`] walks them in reverse.
#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: BTreeMap<String, NodeId>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, NodeId>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<Tensor<F>> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[id.0], g.clone()))
    }

    /// Gradient for a named parameter; zeros if the parameter did not
    /// influence the output.
    pub fn param(&self, name: &str) -> Option<Tensor<F>> {
        let id = *self.params.get(name)?;
        Some(self.get(id).unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0])))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

/// GELU (tanh approximation) and its derivative.
#[inline]
fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let a = F::lit(0.797_884_560_802_865_4); // sqrt(2/pi)
    let b = F::lit(0.044_715);
    let (one, half, two) = (F::one(), F::lit(0.5), F::lit(2.0));
    let inner = a * (x + b * x * x * x);
    let th = one - two / (one + (two * inner).exp_fast());
    let y = half * x * (one + th);
    let dy = half * (one + th) + half * x * (one - th * th) * a * (one + F::lit(3.0) * b * x * x);
    (y, dy)
}

/// Gradient buffer for `id`, zero-initialised on first use.
fn slot<'a, F: Real>(grads: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], id: NodeId) -> &'a mut Vec<F> {
    grads[id.0].get_or_insert_with(|| vec![F::zero(); nodes[id.0].value.numel()])
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp_fast())
}

const LANES: usize = 16;

/// Dot product with independent lanes so the loop vectorises; the summation
/// order is fixed, so results stay deterministic.
#[inline]
fn lane_dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: F = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (xa, xb) in ca.zip(cb) {
        for j in 0..LANES {
            acc[j] = acc[j] + xa[j] * xb[j];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

#[inline]
fn lane_sum<F: Real>(a: &[F]) -> F {
    let mut acc = [F::zero(); LANES];
    let chunks = a.chunks_exact(LANES);
    let tail: F = chunks.remainder().iter().copied().sum();
    for c in chunks {
        for j in 0..LANES {
            acc[j] = acc[j] + c[j];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

#[inline]
fn row_max<F: Real>(row: &[F]) -> F {
    let mut acc = [F::neg_infinity(); LANES];
    let chunks = row.chunks_exact(LANES);
    let tail = chunks.remainder().iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    for c in chunks {
        for j in 0..LANES {
            acc[j] = acc[j].max(c[j]);
        }
    }
    acc.iter().fold(tail, |m, &v| m.max(v))
}

/// In-place softmax of one row.
fn softmax_row<F: Real>(row: &mut [F]) {
    let max = row_max(row);
    for v in row.iter_mut() {
        *v = (*v - max).exp_fast();
    }
    let inv = F::one() / lane_sum(row);
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input: no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf that is not a named parameter (e.g. an input probed
    /// for its Jacobian).
    pub fn input(&mut self, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// Named trainable leaf. Repeated calls with the same name return the
    /// same node.
    pub fn param(&mut self, name: &str, value: &Tensor<F>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.input(value.clone());
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// `x[.., in] · w[in, out] (+ b[out])`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xs = self.value(x);
        let ws = self.value(w);
        assert_eq!(ws.shape().len(), 2, "linear weight must be 2-D");
        let (fan_in, fan_out) = (ws.shape()[0], ws.shape()[1]);
        assert_eq!(xs.cols(), fan_in, "linear: input width {} vs weight {:?}", xs.cols(), ws.shape());
        let rows = xs.rows();
        let mut out = vec![F::zero(); rows * fan_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), fan_out, "linear: bias length");
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        gemm(
            rows,
            fan_in,
            fan_out,
            F::one(),
            xs.data(),
            Layout::row_major(0, fan_in),
            ws.data(),
            Layout::row_major(0, fan_out),
            beta,
            &mut out,
            Layout::row_major(0, fan_out),
        );
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().expect("linear input has at least one axis") = fan_out;
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new(&shape, out), Op::Linear { x, w, b }, &inputs)
    }

    fn zip_map(&mut self, a: NodeId, b: NodeId, op: Op<F>, f: impl Fn(F, F) -> F) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise op on mismatched shapes");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(&shape, data), op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let c = F::lit(factor);
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * c).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::Scale(a, factor), &[a])
    }

    /// Adds `rows[l, d]` to every batch element of `x[b, l, d]`.
    pub fn add_rows(&mut self, x: NodeId, rows: NodeId) -> NodeId {
        let (vx, vr) = (self.value(x), self.value(rows));
        let block = vr.numel();
        assert!(block > 0 && vx.numel() % block == 0, "add_rows: {:?} vs {:?}", vx.shape(), vr.shape());
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(block) {
            for (o, &r) in chunk.iter_mut().zip(vr.data()) {
                *o = *o + r;
            }
        }
        let shape = vx.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::AddRows { x, rows }, &[x, rows])
    }

    /// Batch count and tokens-per-batch of `x[b, l, d]` relative to a
    /// per-batch modulation tensor `m[b, _]`.
    fn token_layout(&self, x: NodeId, m: NodeId) -> (usize, usize, usize, usize) {
        let (vx, vm) = (self.value(x), self.value(m));
        let d = vx.cols();
        let batch = vm.rows();
        let tokens = vx.rows() / batch;
        assert_eq!(tokens * batch, vx.rows(), "token layout: {:?} vs {:?}", vx.shape(), vm.shape());
        (batch, tokens, d, vm.cols())
    }

    /// adaLN modulation: `x * (1 + m[:, scale..scale+d]) + m[:, shift..shift+d]`.
    pub fn modulate(&mut self, x: NodeId, m: NodeId, shift: usize, scale: usize) -> NodeId {
        let (batch, tokens, d, mw) = self.token_layout(x, m);
        assert!(shift + d <= mw && scale + d <= mw, "modulate: chunk outside modulation vector");
        let (vx, vm) = (self.value(x), self.value(m));
        let mut data = vec![F::zero(); vx.numel()];
        for b in 0..batch {
            let mrow = &vm.data()[b * mw..(b + 1) * mw];
            for l in 0..tokens {
                let base = (b * tokens + l) * d;
                for j in 0..d {
                    data[base + j] = vx.data()[base + j] * (F::one() + mrow[scale + j]) + mrow[shift + j];
                }
            }
        }
        let shape = vx.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::Modulate { x, m, shift, scale }, &[x, m])
    }

    /// Gated residual: `x + m[:, gate..gate+d] * y`.
    pub fn gated_add(&mut self, x: NodeId, y: NodeId, m: NodeId, gate: usize) -> NodeId {
        let (batch, tokens, d, mw) = self.token_layout(x, m);
        assert!(gate + d <= mw, "gated_add: chunk outside modulation vector");
        let (vx, vy, vm) = (self.value(x), self.value(y), self.value(m));
        assert_eq!(vx.shape(), vy.shape(), "gated_add: residual shapes");
        let mut data = vec![F::zero(); vx.numel()];
        for b in 0..batch {
            let mrow = &vm.data()[b * mw..(b + 1) * mw];
            for l in 0..tokens {
                let base = (b * tokens + l) * d;
                for j in 0..d {
                    data[base + j] = vx.data()[base + j] + mrow[gate + j] * vy.data()[base + j];
                }
            }
        }
        let shape = vx.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::GatedAdd { x, y, m, gate }, &[x, y, m])
    }

    /// Layer normalisation over the last axis without affine parameters.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let vx = self.value(x);
        let d = vx.cols();
        let mut data = vec![F::zero(); vx.numel()];
        let mut rstd = Vec::with_capacity(vx.rows());
        let (inv_d, eps) = (F::one() / F::lit(d as f64), F::lit(eps));
        for (row, out) in vx.data().chunks(d).zip(data.chunks_mut(d)) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let r = F::one() / (var + eps).sqrt();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let shape = vx.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::LayerNorm { x, rstd }, &[x])
    }

    fn unary(&mut self, x: NodeId, op: Op<F>, f: impl Fn(F) -> F) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let shape = vx.shape().to_vec();
        self.push(Tensor::new(&shape, data), op, &[x])
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Gelu(x), |v| gelu_parts(v).0)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.abs()).collect();
        let shape = vx.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::Abs(x), &[x])
    }

    pub fn sqr(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * v).collect();
        let shape = vx.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::Sqr(x), &[x])
    }

    /// Mean over all elements, accumulated in `f64`.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let n = vx.numel().max(1) as f64;
        let total: f64 = vx.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum();
        self.push(Tensor::scalar(F::lit(total / n)), Op::Mean(x), &[x])
    }

    /// Forward difference along the last axis: `x[.., j+1] - x[.., j]`.
    pub fn diff_w(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let w = vx.cols();
        assert!(w >= 2, "diff_w needs at least two columns");
        let mut data = Vec::with_capacity(vx.rows() * (w - 1));
        for row in vx.data().chunks(w) {
            data.extend(row.windows(2).map(|p| p[1] - p[0]));
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("diff_w input has axes") = w - 1;
        self.push(Tensor::new(&shape, data), Op::DiffW(x), &[x])
    }

    /// Forward difference along the second-to-last axis.
    pub fn diff_h(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let shape = vx.shape();
        assert!(shape.len() >= 2 && shape[shape.len() - 2] >= 2, "diff_h needs at least two rows");
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = vx.numel() / (h * w);
        let mut data = Vec::with_capacity(planes * (h - 1) * w);
        for plane in vx.data().chunks(h * w) {
            for i in 0..h - 1 {
                for j in 0..w {
                    data.push(plane[(i + 1) * w + j] - plane[i * w + j]);
                }
            }
        }
        let mut out_shape = shape.to_vec();
        let n = out_shape.len();
        out_shape[n - 2] = h - 1;
        self.push(Tensor::new(&out_shape, data), Op::DiffH(x), &[x])
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: NodeId, index: Rc<Vec<usize>>, shape: &[usize]) -> NodeId {
        let vx = self.value(x);
        let data = index.iter().map(|&i| vx.data()[i]).collect();
        self.push(Tensor::new(shape, data), Op::Gather { x, index }, &[x])
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = self.value(x);
        let w = vx.cols();
        assert!(start + len <= w, "narrow out of range");
        let mut data = Vec::with_capacity(vx.rows() * len);
        for row in vx.data().chunks(w) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("narrow input has axes") = len;
        self.push(Tensor::new(&shape, data), Op::Narrow { x, start, len }, &[x])
    }

    /// Multi-head scaled dot-product attention without masking.
    ///
    /// `q` is `[b, lq, d]`, `k` and `v` are `[b, lk, d]`; heads split `d`
    /// into contiguous chunks.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let sq = vq.shape();
        assert_eq!(sq.len(), 3, "attention expects [batch, tokens, dim]");
        let (batch, lq, d) = (sq[0], sq[1], sq[2]);
        let lk = vk.shape()[1];
        assert_eq!(vk.shape(), &[batch, lk, d], "attention: key shape");
        assert_eq!(vv.shape(), &[batch, lk, d], "attention: value shape");
        assert!(heads > 0 && d % heads == 0, "attention: {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut out = vec![F::zero(); batch * lq * d];
        let mut probs = vec![F::zero(); batch * heads * lq * lk];
        for b in 0..batch {
            for h in 0..heads {
                let qoff = b * lq * d + h * dh;
                let koff = b * lk * d + h * dh;
                let p = &mut probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
                gemm(
                    lq,
                    dh,
                    lk,
                    F::lit(scale),
                    vq.data(),
                    Layout::strided(qoff, d),
                    vk.data(),
                    Layout { offset: koff, row_stride: 1, col_stride: d },
                    F::zero(),
                    p,
                    Layout::row_major(0, lk),
                );
                for row in p.chunks_mut(lk) {
                    softmax_row(row);
                }
                gemm(
                    lq,
                    lk,
                    dh,
                    F::one(),
                    p,
                    Layout::row_major(0, lk),
                    vv.data(),
                    Layout::strided(koff, d),
                    F::zero(),
                    &mut out,
                    Layout::strided(qoff, d),
                );
            }
        }
        self.push(
            Tensor::new(&[batch, lq, d], out),
            Op::Attention { q, k, v, heads, probs },
            &[q, k, v],
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Gradients<F> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar output");
        self.backward_with(loss, Tensor::full(self.shape(loss), F::one()))
    }

    /// Vector–Jacobian product: back-propagates `seed` from `output`.
    pub fn backward_with(&self, output: NodeId, seed: Tensor<F>) -> Gradients<F> {
        assert_eq!(seed.shape(), self.shape(output), "seed shape");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[output.0] = Some(seed.into_data());

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &dy, &mut grads);
            grads[i] = Some(dy);
        }

        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, op: &Op<F>, out: &Tensor<F>, dy: &[F], grads: &mut [Option<Vec<F>>]) {
        macro_rules! grad {
            ($id:expr) => {
                slot(grads, &self.nodes, $id)
            };
        }

        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (fan_in, fan_out) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.rows();
                if self.wants(*x) {
                    let gx = grad!(*x);
                    gemm(
                        rows,
                        fan_out,
                        fan_in,
                        F::one(),
                        dy,
                        Layout::row_major(0, fan_out),
                        vw.data(),
                        Layout::transposed(0, fan_out),
                        F::one(),
                        gx,
                        Layout::row_major(0, fan_in),
                    );
                }
                if self.wants(*w) {
                    let gw = grad!(*w);
                    gemm(
                        fan_in,
                        rows,
                        fan_out,
                        F::one(),
                        vx.data(),
                        Layout::transposed(0, fan_in),
                        dy,
                        Layout::row_major(0, fan_out),
                        F::one(),
                        gw,
                        Layout::row_major(0, fan_out),
                    );
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = grad!(*b);
                        for row in dy.chunks(fan_out) {
                            for (g, &d) in gb.iter_mut().zip(row) {
                                *g = *g + d;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -F::one() } else { F::one() };
                if self.wants(*a) {
                    let ga = grad!(*a);
                    for (g, &d) in ga.iter_mut().zip(dy) {
                        *g = *g + d;
                    }
                }
                if self.wants(*b) {
                    let gb = grad!(*b);
                    for (g, &d) in gb.iter_mut().zip(dy) {
                        *g = *g + sign * d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let vb = self.value(*b).data();
                    let ga = grad!(*a);
                    for ((g, &d), &y) in ga.iter_mut().zip(dy).zip(vb) {
                        *g = *g + d * y;
                    }
                }
                if self.wants(*b) {
                    let va = self.value(*a).data();
                    let gb = grad!(*b);
                    for ((g, &d), &x) in gb.iter_mut().zip(dy).zip(va) {
                        *g = *g + d * x;
                    }
                }
            }
            Op::Scale(a, factor) => {
                let c = F::lit(*factor);
                let ga = grad!(*a);
                for (g, &d) in ga.iter_mut().zip(dy) {
                    *g = *g + c * d;
                }
            }
            Op::AddRows { x, rows } => {
                if self.wants(*x) {
                    let gx = grad!(*x);
                    for (g, &d) in gx.iter_mut().zip(dy) {
                        *g = *g + d;
                    }
                }
                if self.wants(*rows) {
                    let gr = grad!(*rows);
                    let block = gr.len();
                    for chunk in dy.chunks(block) {
                        for (g, &d) in gr.iter_mut().zip(chunk) {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::Modulate { x, m, shift, scale } => {
                let (batch, tokens, d, mw) = self.token_layout(*x, *m);
                let vx = self.value(*x).data();
                let vm = self.value(*m).data();
                if self.wants(*x) {
                    let gx = grad!(*x);
                    for b in 0..batch {
                        for l in 0..tokens {
                            let base = (b * tokens + l) * d;
                            for j in 0..d {
                                gx[base + j] = gx[base + j] + dy[base + j] * (F::one() + vm[b * mw + scale + j]);
                            }
                        }
                    }
                }
                if self.wants(*m) {
                    let gm = grad!(*m);
                    for b in 0..batch {
                        for l in 0..tokens {
                            let base = (b * tokens + l) * d;
                            for j in 0..d {
                                let g = dy[base + j];
                                gm[b * mw + scale + j] = gm[b * mw + scale + j] + g * vx[base + j];
                                gm[b * mw + shift + j] = gm[b * mw + shift + j] + g;
                            }
                        }
                    }
                }
            }
            Op::GatedAdd { x, y, m, gate } => {
                let (batch, tokens, d, mw) = self.token_layout(*x, *m);
                let vy = self.value(*y).data();
                let vm = self.value(*m).data();
                if self.wants(*x) {
                    let gx = grad!(*x);
                    for (g, &dd) in gx.iter_mut().zip(dy) {
                        *g = *g + dd;
                    }
                }
                if self.wants(*y) {
                    let gy = grad!(*y);
                    for b in 0..batch {
                        for l in 0..tokens {
                            let base = (b * tokens + l) * d;
                            for j in 0..d {
                                gy[base + j] = gy[base + j] + dy[base + j] * vm[b * mw + gate + j];
                            }
                        }
                    }
                }
                if self.wants(*m) {
                    let gm = grad!(*m);
                    for b in 0..batch {
                        for l in 0..tokens {
                            let base = (b * tokens + l) * d;
                            for j in 0..d {
                                gm[b * mw + gate + j] = gm[b * mw + gate + j] + dy[base + j] * vy[base + j];
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let d = out.cols();
                let gx = grad!(*x);
                for (r, ((yrow, grow), gxrow)) in out
                    .data()
                    .chunks(d)
                    .zip(dy.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let inv_d = F::one() / F::lit(d as f64);
                    let mut mean_g = F::zero();
                    let mut mean_gy = F::zero();
                    for (&y, &g) in yrow.iter().zip(grow) {
                        mean_g = mean_g + g;
                        mean_gy = mean_gy + g * y;
                    }
                    mean_g = mean_g * inv_d;
                    mean_gy = mean_gy * inv_d;
                    for ((o, &y), &g) in gxrow.iter_mut().zip(yrow).zip(grow) {
                        *o = *o + rstd[r] * (g - mean_g - y * mean_gy);
                    }
                }
            }
            Op::Silu(x) => {
                let vx = self.value(*x).data();
                let gx = grad!(*x);
                for ((g, &d), &v) in gx.iter_mut().zip(dy).zip(vx) {
                    let s = sigmoid(v);
                    *g = *g + d * s * (F::one() + v * (F::one() - s));
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                let gx = grad!(*x);
                for ((g, &d), &v) in gx.iter_mut().zip(dy).zip(vx) {
                    *g = *g + d * gelu_parts(v).1;
                }
            }
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                let gx = grad!(*x);
                for ((g, &d), &v) in gx.iter_mut().zip(dy).zip(vx) {
                    let s = if v > F::zero() {
                        F::one()
                    } else if v < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    };
                    *g = *g + d * s;
                }
            }
            Op::Sqr(x) => {
                let vx = self.value(*x).data();
                let gx = grad!(*x);
                let two = F::lit(2.0);
                for ((g, &d), &v) in gx.iter_mut().zip(dy).zip(vx) {
                    *g = *g + two * d * v;
                }
            }
            Op::Mean(x) => {
                let gx = grad!(*x);
                let share = dy[0] / F::lit(gx.len().max(1) as f64);
                for g in gx.iter_mut() {
                    *g = *g + share;
                }
            }
            Op::DiffW(x) => {
                let w = self.value(*x).cols();
                let gx = grad!(*x);
                for (grow, drow) in gx.chunks_mut(w).zip(dy.chunks(w - 1)) {
                    for (j, &d) in drow.iter().enumerate() {
                        grow[j + 1] = grow[j + 1] + d;
                        grow[j] = grow[j] - d;
                    }
                }
            }
            Op::DiffH(x) => {
                let shape = self.shape(*x);
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let gx = grad!(*x);
                for (gplane, dplane) in gx.chunks_mut(h * w).zip(dy.chunks((h - 1) * w)) {
                    for i in 0..h - 1 {
                        for j in 0..w {
                            let d = dplane[i * w + j];
                            gplane[(i + 1) * w + j] = gplane[(i + 1) * w + j] + d;
                            gplane[i * w + j] = gplane[i * w + j] - d;
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                let gx = grad!(*x);
                for (&i, &d) in index.iter().zip(dy) {
                    gx[i] = gx[i] + d;
                }
            }
            Op::Narrow { x, start, len } => {
                let w = self.value(*x).cols();
                let gx = grad!(*x);
                for (grow, drow) in gx.chunks_mut(w).zip(dy.chunks(*len)) {
                    for (g, &d) in grow[*start..*start + *len].iter_mut().zip(drow) {
                        *g = *g + d;
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, dy, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[F],
        dy: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let sq = self.shape(q);
        let (batch, lq, d) = (sq[0], sq[1], sq[2]);
        let lk = self.shape(k)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());

        // Gradients for q, k, v are accumulated into scratch buffers first so a
        // node used as several operands (self-attention on one tensor) is fine.
        let mut gq = vec![F::zero(); vq.len()];
        let mut gk = vec![F::zero(); vk.len()];
        let mut gv = vec![F::zero(); vv.len()];
        let mut dp = vec![F::zero(); lq * lk];
        for b in 0..batch {
            for h in 0..heads {
                let qoff = b * lq * d + h * dh;
                let koff = b * lk * d + h * dh;
                let pr = &probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
                // dV += Pᵀ dO
                gemm(
                    lk,
                    lq,
                    dh,
                    F::one(),
                    pr,
                    Layout::transposed(0, lk),
                    dy,
                    Layout::strided(qoff, d),
                    F::one(),
                    &mut gv,
                    Layout::strided(koff, d),
                );
                // dP = dO Vᵀ
                gemm(
                    lq,
                    dh,
                    lk,
                    F::one(),
                    dy,
                    Layout::strided(qoff, d),
                    vv,
                    Layout { offset: koff, row_stride: 1, col_stride: d },
                    F::zero(),
                    &mut dp,
                    Layout::row_major(0, lk),
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)) · scale
                let scale = F::lit(scale);
                for (dprow, prow) in dp.chunks_mut(lk).zip(pr.chunks(lk)) {
                    let dot = lane_dot(dprow, prow);
                    for (g, &pv) in dprow.iter_mut().zip(prow) {
                        *g = pv * (*g - dot) * scale;
                    }
                }
                // dQ += dS K
                gemm(
                    lq,
                    lk,
                    dh,
                    F::one(),
                    &dp,
                    Layout::row_major(0, lk),
                    vk,
                    Layout::strided(koff, d),
                    F::one(),
                    &mut gq,
                    Layout::strided(qoff, d),
                );
                // dK += dSᵀ Q
                gemm(
                    lk,
                    lq,
                    dh,
                    F::one(),
                    &dp,
                    Layout::transposed(0, lk),
                    vq,
                    Layout::strided(qoff, d),
                    F::one(),
                    &mut gk,
                    Layout::strided(koff, d),
                );
            }
        }
        for (id, local) in [(q, gq), (k, gk), (v, gv)] {
            if !self.wants(id) {
                continue;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![F::zero(); local.len()]);
            for (g, l) in slot.iter_mut().zip(local) {
                *g = *g + l;
            }
        }
    }
}
