//! Wengert tape: records forward ops, replays them in reverse for gradients.
//!
//! One tape per forward pass. Every op output is checked for finiteness at
//! record time; a second backward() on the same tape is an error.

use super::kernels as kn;
use super::tensor::{check_slice_finite, Real, Tensor};
use crate::error::{arg_err, shape_err, Error, Result};

pub type NodeId = usize;

enum Op<T> {
    Leaf,
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// x[N,C,H,W] + v[N,C] broadcast over the spatial dims.
    AddBcastNc {
        x: NodeId,
        v: NodeId,
    },
    MulScalar {
        x: NodeId,
        s: T,
    },
    Silu {
        x: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    UpsampleNearest2 {
        x: NodeId,
    },
    ConcatAxis1 {
        a: NodeId,
        b: NodeId,
    },
    MeanAll {
        x: NodeId,
    },
    HalfMse {
        pred: NodeId,
        target: NodeId,
    },
    SoftmaxLast {
        x: NodeId,
    },
    MatmulBatch {
        a: NodeId,
        b: NodeId,
    },
    TransposeLast2 {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    EmbedRows {
        table: NodeId,
        indices: Vec<usize>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradient accumulator produced by `Tape::backward`.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn push_checked(&mut self, value: Tensor<T>, op: Op<T>, context: &str) -> Result<NodeId> {
        value.check_finite(context)?;
        let needs_grad = self.op_inputs_need_grad(&op);
        Ok(self.push(value, op, needs_grad))
    }

    fn op_inputs_need_grad(&self, op: &Op<T>) -> bool {
        let needs = |id: &NodeId| self.nodes[*id].needs_grad;
        match op {
            Op::Leaf => false,
            Op::Add { a, b } | Op::ConcatAxis1 { a, b } | Op::MatmulBatch { a, b } => {
                needs(a) || needs(b)
            }
            Op::AddBcastNc { x, v } => needs(x) || needs(v),
            Op::MulScalar { x, .. }
            | Op::Silu { x }
            | Op::UpsampleNearest2 { x }
            | Op::MeanAll { x }
            | Op::SoftmaxLast { x }
            | Op::TransposeLast2 { x }
            | Op::Reshape { x } => needs(x),
            Op::Conv2d { x, w, b, .. } => {
                needs(x) || needs(w) || b.as_ref().map_or(false, needs)
            }
            Op::Linear { x, w, b } => needs(x) || needs(w) || b.as_ref().map_or(false, needs),
            Op::GroupNorm { x, gamma, beta, .. } => needs(x) || needs(gamma) || needs(beta),
            Op::HalfMse { pred, target } => needs(pred) || needs(target),
            Op::EmbedRows { table, .. } => needs(table),
        }
    }

    /// Insert an input tensor. Gradients are materialized for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        self.push_checked(value, Op::Add { a, b }, "add")
    }

    /// x[N,C,H,W] + v[N,C], v broadcast across H and W.
    pub fn add_bcast_nc(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (vn, vc) = self.value(v).dims2()?;
        if vn != n || vc != c {
            return Err(shape_err(format!(
                "add_bcast_nc: x {:?} vs v {:?}",
                self.value(x).shape(),
                self.value(v).shape()
            )));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let mut out = xv.to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let add = vv[ni * c + ci];
                for o in &mut out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                    *o += add;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push_checked(value, Op::AddBcastNc { x, v }, "add_bcast_nc")
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: T) -> Result<NodeId> {
        let value = self.value(x).scale(s);
        self.push_checked(value, Op::MulScalar { x, s }, "mul_scalar")
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(kn::silu);
        self.push_checked(value, Op::Silu { x }, "silu")
    }

    /// 2-d convolution, NCHW, square odd kernel.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if k != k2 {
            return Err(arg_err(format!("conv2d: kernel must be square, got {k}x{k2}")));
        }
        if k % 2 == 0 {
            return Err(arg_err(format!("conv2d: kernel size must be odd, got {k}")));
        }
        if wcin != cin {
            return Err(shape_err(format!(
                "conv2d: input has {cin} channels, kernel expects {wcin}"
            )));
        }
        if stride == 0 {
            return Err(arg_err("conv2d: stride must be >= 1"));
        }
        if pad == 0 && (h < k || wd < k) {
            return Err(shape_err(format!(
                "conv2d: {h}x{wd} input smaller than {k}x{k} kernel with no padding"
            )));
        }
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [cout] {
                return Err(shape_err(format!(
                    "conv2d: bias shape {bs:?} does not match {cout} output channels"
                )));
            }
        }
        let oh = kn::conv_out_size(h, k, stride, pad);
        let ow = kn::conv_out_size(wd, k, stride, pad);
        let bias = b.map(|id| self.value(id).data().to_vec());
        let y = kn::conv2d_im2col(
            self.value(x).data(),
            self.value(w).data(),
            bias.as_deref(),
            n,
            cin,
            h,
            wd,
            cout,
            k,
            stride,
            pad,
        );
        let value = Tensor::new(vec![n, cout, oh, ow], y)?;
        self.push_checked(value, Op::Conv2d { x, w, b, stride, pad }, "conv2d")
    }

    /// y[B,O] = x[B,I] @ w[O,I]^T + b[O].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (bsz, fin) = self.value(x).dims2()?;
        let (fout, win) = self.value(w).dims2()?;
        if win != fin {
            return Err(shape_err(format!(
                "linear: input features {fin} vs weight features {win}"
            )));
        }
        let w_t = kn::transpose(self.value(w).data(), fout, fin);
        let mut y = kn::matmul(self.value(x).data(), &w_t, bsz, fin, fout);
        if let Some(bid) = b {
            let bv = self.value(bid).data();
            if bv.len() != fout {
                return Err(shape_err(format!(
                    "linear: bias length {} vs {fout} outputs",
                    bv.len()
                )));
            }
            for r in 0..bsz {
                for (yo, &bo) in y[r * fout..(r + 1) * fout].iter_mut().zip(bv) {
                    *yo += bo;
                }
            }
        }
        let value = Tensor::new(vec![bsz, fout], y)?;
        self.push_checked(value, Op::Linear { x, w, b }, "linear")
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: T,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(arg_err(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if eps <= T::zero() {
            return Err(arg_err("group_norm: eps must be positive"));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(format!(
                "group_norm: gamma/beta must have shape [{c}]"
            )));
        }
        let (means, rstds) =
            kn::group_norm_stats(self.value(x).data(), n, c, h * w, groups, eps);
        let y = kn::group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            h * w,
            groups,
            &means,
            &rstds,
        );
        let value = Tensor::new(vec![n, c, h, w], y)?;
        self.push_checked(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                rstds,
            },
            "group_norm",
        )
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let mut y = vec![T::zero(); n * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for nc in 0..n * c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            let dst = &mut y[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], y)?;
        self.push_checked(value, Op::UpsampleNearest2 { x }, "upsample_nearest2")
    }

    /// Concatenate along dim 1 of tensors of rank >= 2 with equal
    /// leading/trailing dims.
    pub fn concat_axis1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err(format!("concat_axis1: {sa:?} vs {sb:?}")));
        }
        let outer = sa[0];
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1], sb[1]);
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * ca * inner..(o + 1) * ca * inner]);
            out.extend_from_slice(&bv[o * cb * inner..(o + 1) * cb * inner]);
        }
        let value = Tensor::new(shape, out)?;
        self.push_checked(value, Op::ConcatAxis1 { a, b }, "concat_axis1")
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x).data();
        let mut acc = 0.0f64;
        for &v in xv {
            acc += v.f64();
        }
        let value = Tensor::scalar(T::c(acc / xv.len() as f64));
        self.push_checked(value, Op::MeanAll { x }, "mean_all")
    }

    /// 0.5 * mean((pred - target)^2), the CFM training loss shape.
    pub fn half_mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(shape_err(format!(
                "half_mse: {:?} vs {:?}",
                self.value(pred).shape(),
                self.value(target).shape()
            )));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let mut acc = 0.0f64;
        for (&a, &b) in p.iter().zip(t) {
            let d = (a - b).f64();
            acc += d * d;
        }
        let value = Tensor::scalar(T::c(0.5 * acc / p.len() as f64));
        self.push_checked(value, Op::HalfMse { pred, target }, "half_mse")
    }

    /// Softmax over the last dimension.
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let cols = *shape.last().ok_or_else(|| shape_err("softmax_last: rank 0"))?;
        let rows = self.value(x).numel() / cols;
        let y = kn::softmax_rows(self.value(x).data(), rows, cols);
        let value = Tensor::new(shape, y)?;
        self.push_checked(value, Op::SoftmaxLast { x }, "softmax_last")
    }

    /// Batched matmul: a[B,M,K] @ b[B,K,N] -> [B,M,N].
    pub fn matmul_batch(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ba, m, ka) = self.value(a).dims3()?;
        let (bb, kb, n) = self.value(b).dims3()?;
        if ba != bb || ka != kb {
            return Err(shape_err(format!(
                "matmul_batch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut y = vec![T::zero(); ba * m * n];
        for bi in 0..ba {
            kn::matmul_acc(
                &mut y[bi * m * n..(bi + 1) * m * n],
                &av[bi * m * ka..(bi + 1) * m * ka],
                &bv[bi * ka * n..(bi + 1) * ka * n],
                m,
                ka,
                n,
            );
        }
        let value = Tensor::new(vec![ba, m, n], y)?;
        self.push_checked(value, Op::MatmulBatch { a, b }, "matmul_batch")
    }

    /// Swap the last two dims of a rank-3 tensor.
    pub fn transpose_last2(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, m, n) = self.value(x).dims3()?;
        let xv = self.value(x).data();
        let mut y = vec![T::zero(); xv.len()];
        for bi in 0..b {
            let src = &xv[bi * m * n..(bi + 1) * m * n];
            let dst = &mut y[bi * m * n..(bi + 1) * m * n];
            dst.copy_from_slice(&kn::transpose(src, m, n));
        }
        let value = Tensor::new(vec![b, n, m], y)?;
        self.push_checked(value, Op::TransposeLast2 { x }, "transpose_last2")
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push_checked(value, Op::Reshape { x }, "reshape")
    }

    /// Select rows of table[R,D] by index -> [len(indices), D].
    pub fn embed_rows(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let (rows, d) = self.value(table).dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(arg_err(format!(
                "embed_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], out)?;
        self.push_checked(value, Op::EmbedRows { table, indices }, "embed_rows")
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns per-node gradients;
    /// leaves without `requires_grad` never get one materialized.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err(format!(
                "backward: loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![T::one()]);
        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.accumulate_inputs(id, &g, &mut grads)?;
            // Intermediate nodes don't keep their grad: only leaves do.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let mut out: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        for (id, g) in grads.into_iter().enumerate() {
            match g {
                Some(data) => {
                    check_slice_finite(&data, "gradient")?;
                    out.push(Some(Tensor::new(self.nodes[id].value.shape().to_vec(), data)?));
                }
                None => out.push(None),
            }
        }
        Ok(Gradients { grads: out })
    }

    fn add_into(dst: &mut Option<Vec<T>>, src: &[T]) {
        match dst {
            Some(d) => {
                for (a, &b) in d.iter_mut().zip(src) {
                    *a += b;
                }
            }
            None => *dst = Some(src.to_vec()),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn accumulate_inputs(
        &self,
        id: NodeId,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.wants(*a) {
                    Self::add_into(&mut grads[*a], g);
                }
                if self.wants(*b) {
                    Self::add_into(&mut grads[*b], g);
                }
            }
            Op::AddBcastNc { x, v } => {
                if self.wants(*x) {
                    Self::add_into(&mut grads[*x], g);
                }
                if self.wants(*v) {
                    let (n, c, h, w) = self.nodes[*x].value.dims4()?;
                    let hw = h * w;
                    let mut dv = vec![T::zero(); n * c];
                    for nc in 0..n * c {
                        let mut s = T::zero();
                        for &gv in &g[nc * hw..(nc + 1) * hw] {
                            s += gv;
                        }
                        dv[nc] = s;
                    }
                    Self::add_into(&mut grads[*v], &dv);
                }
            }
            Op::MulScalar { x, s } => {
                if self.wants(*x) {
                    let dx: Vec<T> = g.iter().map(|&gv| gv * *s).collect();
                    Self::add_into(&mut grads[*x], &dx);
                }
            }
            Op::Silu { x } => {
                if self.wants(*x) {
                    let xv = self.nodes[*x].value.data();
                    let dx: Vec<T> = g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &x0)| gv * kn::silu_grad(x0))
                        .collect();
                    Self::add_into(&mut grads[*x], &dx);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (n, cin, h, wd) = self.nodes[*x].value.dims4()?;
                let (cout, _, k, _) = self.nodes[*w].value.dims4()?;
                let need_db = b.map_or(false, |bid| self.wants(bid));
                let (dx, dw, db) = kn::conv2d_backward(
                    g,
                    self.nodes[*x].value.data(),
                    self.nodes[*w].value.data(),
                    self.wants(*x),
                    self.wants(*w),
                    need_db,
                    n,
                    cin,
                    h,
                    wd,
                    cout,
                    k,
                    *stride,
                    *pad,
                );
                if let Some(dx) = dx {
                    Self::add_into(&mut grads[*x], &dx);
                }
                if let Some(dw) = dw {
                    Self::add_into(&mut grads[*w], &dw);
                }
                if let (Some(bid), Some(db)) = (b, db) {
                    Self::add_into(&mut grads[*bid], &db);
                }
            }
            Op::Linear { x, w, b } => {
                let (bsz, fin) = self.nodes[*x].value.dims2()?;
                let (fout, _) = self.nodes[*w].value.dims2()?;
                if self.wants(*x) {
                    // dx = g @ W
                    let dx = kn::matmul(g, self.nodes[*w].value.data(), bsz, fout, fin);
                    Self::add_into(&mut grads[*x], &dx);
                }
                if self.wants(*w) {
                    // dW = g^T @ x
                    let g_t = kn::transpose(g, bsz, fout);
                    let dw = kn::matmul(&g_t, self.nodes[*x].value.data(), fout, bsz, fin);
                    Self::add_into(&mut grads[*w], &dw);
                }
                if let Some(bid) = b {
                    if self.wants(*bid) {
                        let mut db = vec![T::zero(); fout];
                        for r in 0..bsz {
                            for (d, &gv) in db.iter_mut().zip(&g[r * fout..(r + 1) * fout]) {
                                *d += gv;
                            }
                        }
                        Self::add_into(&mut grads[*bid], &db);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                rstds,
            } => {
                let (n, c, h, w) = self.nodes[*x].value.dims4()?;
                let (dx, dgamma, dbeta) = kn::group_norm_backward(
                    g,
                    self.nodes[*x].value.data(),
                    self.nodes[*gamma].value.data(),
                    n,
                    c,
                    h * w,
                    *groups,
                    means,
                    rstds,
                );
                if self.wants(*x) {
                    Self::add_into(&mut grads[*x], &dx);
                }
                if self.wants(*gamma) {
                    Self::add_into(&mut grads[*gamma], &dgamma);
                }
                if self.wants(*beta) {
                    Self::add_into(&mut grads[*beta], &dbeta);
                }
            }
            Op::UpsampleNearest2 { x } => {
                if self.wants(*x) {
                    let (n, c, h, w) = self.nodes[*x].value.dims4()?;
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        let gsrc = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                dst[(oy / 2) * w + ox / 2] += gsrc[oy * ow + ox];
                            }
                        }
                    }
                    Self::add_into(&mut grads[*x], &dx);
                }
            }
            Op::ConcatAxis1 { a, b } => {
                let sa = self.nodes[*a].value.shape();
                let sb = self.nodes[*b].value.shape();
                let outer = sa[0];
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1], sb[1]);
                let stride = (ca + cb) * inner;
                if self.wants(*a) {
                    let mut da = vec![T::zero(); outer * ca * inner];
                    for o in 0..outer {
                        da[o * ca * inner..(o + 1) * ca * inner]
                            .copy_from_slice(&g[o * stride..o * stride + ca * inner]);
                    }
                    Self::add_into(&mut grads[*a], &da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); outer * cb * inner];
                    for o in 0..outer {
                        db[o * cb * inner..(o + 1) * cb * inner].copy_from_slice(
                            &g[o * stride + ca * inner..(o + 1) * stride],
                        );
                    }
                    Self::add_into(&mut grads[*b], &db);
                }
            }
            Op::MeanAll { x } => {
                if self.wants(*x) {
                    let n = self.nodes[*x].value.numel();
                    let gv = g[0] * T::c(1.0 / n as f64);
                    let dx = vec![gv; n];
                    Self::add_into(&mut grads[*x], &dx);
                }
            }
            Op::HalfMse { pred, target } => {
                let p = self.nodes[*pred].value.data();
                let t = self.nodes[*target].value.data();
                let scale = g[0] * T::c(1.0 / p.len() as f64);
                if self.wants(*pred) {
                    let dp: Vec<T> = p.iter().zip(t).map(|(&a, &b)| (a - b) * scale).collect();
                    Self::add_into(&mut grads[*pred], &dp);
                }
                if self.wants(*target) {
                    let dt: Vec<T> = p.iter().zip(t).map(|(&a, &b)| (b - a) * scale).collect();
                    Self::add_into(&mut grads[*target], &dt);
                }
            }
            Op::SoftmaxLast { x } => {
                if self.wants(*x) {
                    let y = self.nodes[id].value.data();
                    let shape = self.nodes[id].value.shape();
                    let cols = *shape.last().unwrap();
                    let rows = y.len() / cols;
                    let dx = kn::softmax_backward_rows(g, y, rows, cols);
                    Self::add_into(&mut grads[*x], &dx);
                }
            }
            Op::MatmulBatch { a, b } => {
                let (bsz, m, k) = self.nodes[*a].value.dims3()?;
                let (_, _, n) = self.nodes[*b].value.dims3()?;
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if self.wants(*a) {
                    // dA = g @ B^T
                    let mut da = vec![T::zero(); bsz * m * k];
                    for bi in 0..bsz {
                        let b_t = kn::transpose(&bv[bi * k * n..(bi + 1) * k * n], k, n);
                        kn::matmul_acc(
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &b_t,
                            m,
                            n,
                            k,
                        );
                    }
                    Self::add_into(&mut grads[*a], &da);
                }
                if self.wants(*b) {
                    // dB = A^T @ g
                    let mut db = vec![T::zero(); bsz * k * n];
                    for bi in 0..bsz {
                        let a_t = kn::transpose(&av[bi * m * k..(bi + 1) * m * k], m, k);
                        kn::matmul_acc(
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            &a_t,
                            &g[bi * m * n..(bi + 1) * m * n],
                            k,
                            m,
                            n,
                        );
                    }
                    Self::add_into(&mut grads[*b], &db);
                }
            }
            Op::TransposeLast2 { x } => {
                if self.wants(*x) {
                    let (b, m, n) = self.nodes[*x].value.dims3()?;
                    // grad has shape [b, n, m]; transpose back.
                    let mut dx = vec![T::zero(); b * m * n];
                    for bi in 0..b {
                        let src = &g[bi * m * n..(bi + 1) * m * n];
                        dx[bi * m * n..(bi + 1) * m * n]
                            .copy_from_slice(&kn::transpose(src, n, m));
                    }
                    Self::add_into(&mut grads[*x], &dx);
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    Self::add_into(&mut grads[*x], g);
                }
            }
            Op::EmbedRows { table, indices } => {
                if self.wants(*table) {
                    let (rows, d) = self.nodes[*table].value.dims2()?;
                    let mut dt = vec![T::zero(); rows * d];
                    for (b, &i) in indices.iter().enumerate() {
                        for (dst, &gv) in dt[i * d..(i + 1) * d].iter_mut().zip(&g[b * d..(b + 1) * d])
                        {
                            *dst += gv;
                        }
                    }
                    Self::add_into(&mut grads[*table], &dt);
                }
            }
        }
        Ok(())
    }
}
