//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! Every differentiable op appends a node holding its output value and the
//! metadata needed for its vector-Jacobian product. [`Tape::backward`]
//! consumes the tape, replays nodes in reverse and accumulates gradients
//! additively across fan-out. Tapes are rebuilt for every forward pass and
//! confined to one thread; the tensors they hand back are plain values.
//!
//! Forward outputs are checked for NaN/Inf as they are produced.

use super::conv::{
    col2im_add, gemm_a_transposed, gemm_b_transposed, gemm_rowmajor, im2col, out_extent,
};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Sqrt,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the smaller operand of a binary op maps onto the larger one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SmallMap {
    /// One element against anything.
    Scalar,
    /// `[C]` against `[B,C]` or `[B,C,H,W]`.
    Chan,
    /// `[B,C]` against `[B,C,H,W]`.
    BatchChan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    LhsSmall(SmallMap),
    RhsSmall(SmallMap),
}

enum Op<T: Scalar> {
    Leaf,
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Bin {
        kind: BinKind,
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddScalar {
        x: Var,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    MeanHw {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        /// im2col buffers, one `[cin*k*k, oh*ow]` block per batch item.
        cols: Vec<T>,
    },
    AvgPool2 {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    SliceCols {
        x: Var,
        from: usize,
        to: usize,
    },
    BceWithLogits {
        logits: Var,
        target: Tensor<T>,
    },
    CosineMap {
        feat: Var,
        proto: Var,
        eps: T,
    },
    UpsampleBilinear {
        x: Var,
    },
    MaskedMeanPool {
        feat: Var,
        mask: Tensor<T>,
        wsum: T,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recording tape for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { context: op_name(&op).to_string() });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Div, a, b)
    }

    fn bin(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (bcast, out_shape) = resolve_bcast(self.shape(a), self.shape(b))?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let data = bin_forward(kind, av, bv, bcast);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(out_shape, data)?, Op::Bin { kind, a, b, bcast }, needs)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.nodes[x.0].value.map(|e| e * c);
        let needs = self.needs(x);
        self.push(v, Op::Scale { x, c }, needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.nodes[x.0].value.map(|e| e + c);
        let needs = self.needs(x);
        self.push(v, Op::AddScalar { x }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let v = self.nodes[x.0].value.map(|e| unary_forward(kind, e));
        let needs = self.needs(x);
        self.push(v, Op::Unary { kind, x }, needs)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.numel() == 0 {
            return Err(Error::invalid("sum over empty tensor"));
        }
        let s = xv.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.numel() == 0 {
            return Err(Error::invalid("mean over empty tensor"));
        }
        let n = T::from_f64(xv.numel() as f64);
        let s = xv.data().iter().fold(T::zero(), |acc, &v| acc + v) / n;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll { x }, needs)
    }

    /// Spatial mean of a `[B,C,H,W]` map, producing `[B,C]`.
    pub fn mean_hw(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.nodes[x.0].value.dims4()?;
        if h * w == 0 {
            return Err(Error::invalid("mean_hw over empty spatial extent"));
        }
        let inv = T::one() / T::from_f64((h * w) as f64);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); b * c];
        for (i, slot) in out.iter_mut().enumerate() {
            let plane = &xd[i * h * w..(i + 1) * h * w];
            *slot = plane.iter().fold(T::zero(), |acc, &v| acc + v) * inv;
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![b, c], out)?, Op::MeanHw { x }, needs)
    }

    // ── structured ops ──────────────────────────────────────────────

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let (bs, cin, h, wd) = self.nodes[x.0].value.dims4()?;
        let (cout, wcin, kh, kw) = self.nodes[w.0].value.dims4()?;
        if kh != kw {
            return Err(Error::shape(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        let k = kh;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d input has {cin} channels, weight expects {wcin}"
            )));
        }
        if self.shape(b) != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias shape {:?} != [{cout}]",
                self.shape(b)
            )));
        }
        if k > h + 2 * pad || k > wd + 2 * pad {
            return Err(Error::shape(format!(
                "conv2d kernel {k} exceeds padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let oh = out_extent(h, k, stride, pad);
        let ow = out_extent(wd, k, stride, pad);
        let kk = cin * k * k;
        let n = oh * ow;

        let xd = self.nodes[x.0].value.data();
        let wd_ = self.nodes[w.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut cols = vec![T::zero(); bs * kk * n];
        let mut out = vec![T::zero(); bs * cout * n];
        for i in 0..bs {
            let col = &mut cols[i * kk * n..(i + 1) * kk * n];
            im2col(&xd[i * cin * h * wd..], cin, h, wd, k, stride, pad, col);
            let o = &mut out[i * cout * n..(i + 1) * cout * n];
            gemm_rowmajor(cout, kk, n, wd_, col, T::zero(), o);
            for co in 0..cout {
                let bias = bd[co];
                for v in &mut o[co * n..(co + 1) * n] {
                    *v += bias;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Tensor::new(vec![bs, cout, oh, ow], out)?,
            Op::Conv2d { x, w, b, stride, pad, cols },
            needs,
        )
    }

    /// 2x2 average pooling with stride 2; trailing odd row/column dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.nodes[x.0].value.dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::shape(format!("avg_pool2 input {h}x{w} too small")));
        }
        let xd = self.nodes[x.0].value.data();
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for i in 0..b * c {
            let plane = &xd[i * h * w..(i + 1) * h * w];
            let o = &mut out[i * oh * ow..(i + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let p = 2 * oy * w + 2 * ox;
                    o[oy * ow + ox] =
                        (plane[p] + plane[p + 1] + plane[p + w] + plane[p + w + 1]) * quarter;
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![b, c, oh, ow], out)?, Op::AvgPool2 { x }, needs)
    }

    /// 2x2 max pooling with stride 2; ties resolve to the first element
    /// in row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.nodes[x.0].value.dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::shape(format!("max_pool2 input {h}x{w} too small")));
        }
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        let mut argmax = vec![0u32; b * c * oh * ow];
        for i in 0..b * c {
            let base = i * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let p = base + 2 * oy * w + 2 * ox;
                    let cand = [p, p + 1, p + w, p + w + 1];
                    let mut best = cand[0];
                    let mut bv = xd[cand[0]];
                    for &ci in &cand[1..] {
                        if xd[ci] > bv {
                            bv = xd[ci];
                            best = ci;
                        }
                    }
                    let oi = i * oh * ow + oy * ow + ox;
                    out[oi] = bv;
                    argmax[oi] = best as u32;
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![b, c, oh, ow], out)?, Op::MaxPool2 { x, argmax }, needs)
    }

    /// out[B,Dout] = x[B,Din] * w[Din,Dout] + bias[Dout].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, din) = match self.shape(x) {
            [bs, din] => (*bs, *din),
            s => return Err(Error::shape(format!("linear input must be rank 2, got {s:?}"))),
        };
        let (wdin, dout) = match self.shape(w) {
            [i, o] => (*i, *o),
            s => return Err(Error::shape(format!("linear weight must be rank 2, got {s:?}"))),
        };
        if wdin != din {
            return Err(Error::shape(format!("linear: input dim {din} != weight dim {wdin}")));
        }
        if self.shape(b) != [dout] {
            return Err(Error::shape(format!(
                "linear bias shape {:?} != [{dout}]",
                self.shape(b)
            )));
        }
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); bs * dout];
        gemm_rowmajor(bs, din, dout, xd, wd, T::zero(), &mut out);
        for row in out.chunks_exact_mut(dout) {
            for (v, &bias) in row.iter_mut().zip(bd) {
                *v += bias;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::new(vec![bs, dout], out)?, Op::Linear { x, w, b }, needs)
    }

    /// Concatenate two `[B,*]` tensors along the last axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca) = rank2(self.shape(a))?;
        let (bb, cb) = rank2(self.shape(b))?;
        if ba != bb {
            return Err(Error::shape(format!("concat_cols batch {ba} != {bb}")));
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(ba * (ca + cb));
        for i in 0..ba {
            out.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![ba, ca + cb], out)?, Op::ConcatCols { a, b }, needs)
    }

    /// Columns `[from, to)` of a `[B,C]` tensor.
    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (b, c) = rank2(self.shape(x))?;
        if from >= to || to > c {
            return Err(Error::invalid(format!("slice_cols [{from},{to}) out of [0,{c})")));
        }
        let xd = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(b * (to - from));
        for i in 0..b {
            out.extend_from_slice(&xd[i * c + from..i * c + to]);
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![b, to - from], out)?, Op::SliceCols { x, from, to }, needs)
    }

    /// Pixel-mean binary cross-entropy on logits, in the log-sum-exp-stable
    /// form `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Tensor<T>) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::shape(format!(
                "bce: logits {:?} vs target {:?}",
                self.shape(logits),
                target.shape()
            )));
        }
        let zd = self.nodes[logits.0].value.data();
        let n = T::from_f64(zd.len() as f64);
        let mut acc = T::zero();
        for (&z, &y) in zd.iter().zip(target.data()) {
            let pos = if z > T::zero() { z } else { T::zero() };
            acc += pos - z * y + (T::one() + (-z.abs()).exp()).ln();
        }
        let needs = self.needs(logits);
        self.push(Tensor::scalar(acc / n), Op::BceWithLogits { logits, target }, needs)
    }

    /// Per-position cosine similarity between `proto[C]` and the channel
    /// column of `feat[B,C,H,W]`, producing `[B,1,H,W]`. `eps` guards
    /// zero-norm pixels.
    pub fn cosine_map(&mut self, feat: Var, proto: Var, eps: T) -> Result<Var> {
        let (b, c, h, w) = self.nodes[feat.0].value.dims4()?;
        if self.shape(proto) != [c] {
            return Err(Error::shape(format!(
                "cosine_map: proto {:?} vs {c} channels",
                self.shape(proto)
            )));
        }
        let fd = self.nodes[feat.0].value.data();
        let pd = self.nodes[proto.0].value.data();
        let np = pd.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        let hw = h * w;
        let mut out = vec![T::zero(); b * hw];
        for bi in 0..b {
            let fbase = bi * c * hw;
            for pix in 0..hw {
                let mut dot = T::zero();
                let mut nv2 = T::zero();
                for ci in 0..c {
                    let v = fd[fbase + ci * hw + pix];
                    dot += v * pd[ci];
                    nv2 += v * v;
                }
                out[bi * hw + pix] = dot / (np * nv2.sqrt() + eps);
            }
        }
        let needs = self.needs(feat) || self.needs(proto);
        self.push(
            Tensor::new(vec![b, 1, h, w], out)?,
            Op::CosineMap { feat, proto, eps },
            needs,
        )
    }

    /// Bilinear upsampling of `[B,C,h,w]` to `[B,C,oh,ow]` (half-pixel
    /// centers, edges clamped).
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (b, c, h, w) = self.nodes[x.0].value.dims4()?;
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("upsample to empty extent"));
        }
        let ys = axis_lerp_table::<T>(h, oh);
        let xs = axis_lerp_table::<T>(w, ow);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        for i in 0..b * c {
            let plane = &xd[i * h * w..(i + 1) * h * w];
            let o = &mut out[i * oh * ow..(i + 1) * oh * ow];
            for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                    o[oy * ow + ox] = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                        + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![b, c, oh, ow], out)?, Op::UpsampleBilinear { x }, needs)
    }

    /// Mask-weighted mean over batch and space: `feat[B,C,H,W]` pooled by
    /// `mask[B,1,H,W]` into `[C]`. Errors when the mask has zero weight.
    pub fn masked_mean_pool(&mut self, feat: Var, mask: Tensor<T>) -> Result<Var> {
        let (b, c, h, w) = self.nodes[feat.0].value.dims4()?;
        if mask.shape() != [b, 1, h, w] {
            return Err(Error::shape(format!(
                "masked_mean_pool: mask {:?} vs feat [{b},1,{h},{w}]",
                mask.shape()
            )));
        }
        let wsum = mask.data().iter().fold(T::zero(), |a, &v| a + v);
        if wsum <= T::zero() {
            return Err(Error::EmptySupportForeground);
        }
        let fd = self.nodes[feat.0].value.data();
        let md = mask.data();
        let hw = h * w;
        let mut out = vec![T::zero(); c];
        for bi in 0..b {
            let mplane = &md[bi * hw..(bi + 1) * hw];
            for (ci, slot) in out.iter_mut().enumerate() {
                let plane = &fd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                let mut acc = T::zero();
                for (&v, &m) in plane.iter().zip(mplane) {
                    acc += v * m;
                }
                *slot += acc;
            }
        }
        for v in &mut out {
            *v /= wsum;
        }
        let needs = self.needs(feat);
        self.push(Tensor::new(vec![c], out)?, Op::MaskedMeanPool { feat, mask, wsum }, needs)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Consumes the tape; gradients
    /// accumulate additively across fan-out.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("backward: unknown loss var"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if matches!(self.nodes[loss.0].op, Op::Leaf) {
            return Err(Error::invalid("backward without forward: loss is a leaf"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shape matches node value")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: &[T]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, &d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => grads[v.0] = Some(delta.to_vec()),
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Unary { kind, x } => {
                let xd = self.nodes[x.0].value.data();
                let yd = self.nodes[i].value.data();
                let dx: Vec<T> = match kind {
                    UnaryKind::Relu => xd
                        .iter()
                        .zip(g)
                        .map(|(&x, &gi)| if x > T::zero() { gi } else { T::zero() })
                        .collect(),
                    UnaryKind::Sigmoid => yd
                        .iter()
                        .zip(g)
                        .map(|(&y, &gi)| gi * y * (T::one() - y))
                        .collect(),
                    UnaryKind::Tanh => yd
                        .iter()
                        .zip(g)
                        .map(|(&y, &gi)| gi * (T::one() - y * y))
                        .collect(),
                    UnaryKind::Sqrt => yd
                        .iter()
                        .zip(g)
                        .map(|(&y, &gi)| gi * T::from_f64(0.5) / y)
                        .collect(),
                    UnaryKind::Abs => xd
                        .iter()
                        .zip(g)
                        .map(|(&x, &gi)| {
                            if x > T::zero() {
                                gi
                            } else if x < T::zero() {
                                -gi
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                };
                self.accumulate(grads, *x, &dx);
            }
            Op::Bin { kind, a, b, bcast } => {
                self.backprop_bin(*kind, *a, *b, *bcast, g, grads);
            }
            Op::Scale { x, c } => {
                let dx: Vec<T> = g.iter().map(|&gi| gi * *c).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::AddScalar { x } => {
                self.accumulate(grads, *x, g);
            }
            Op::SumAll { x } => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, *x, &vec![g[0]; n]);
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x.0].value.numel();
                let v = g[0] / T::from_f64(n as f64);
                self.accumulate(grads, *x, &vec![v; n]);
            }
            Op::MeanHw { x } => {
                let (b, c, h, w) = self.nodes[x.0].value.dims4().expect("checked in forward");
                let inv = T::one() / T::from_f64((h * w) as f64);
                let mut dx = vec![T::zero(); b * c * h * w];
                for (i, &gi) in g.iter().enumerate().take(b * c) {
                    let v = gi * inv;
                    dx[i * h * w..(i + 1) * h * w].fill(v);
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                self.backprop_conv(*x, *w, *b, *stride, *pad, cols, i, g, grads);
            }
            Op::AvgPool2 { x } => {
                let (b, c, h, w) = self.nodes[x.0].value.dims4().expect("checked in forward");
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let mut dx = vec![T::zero(); b * c * h * w];
                for i in 0..b * c {
                    let d = &mut dx[i * h * w..(i + 1) * h * w];
                    let go = &g[i * oh * ow..(i + 1) * oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = go[oy * ow + ox] * quarter;
                            let p = 2 * oy * w + 2 * ox;
                            d[p] += v;
                            d[p + 1] += v;
                            d[p + w] += v;
                            d[p + w + 1] += v;
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let n = self.nodes[x.0].value.numel();
                let mut dx = vec![T::zero(); n];
                for (&ai, &gi) in argmax.iter().zip(g) {
                    dx[ai as usize] += gi;
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Linear { x, w, b } => {
                let (bs, din) = rank2(self.shape(*x)).expect("checked in forward");
                let dout = self.shape(*w)[1];
                if self.nodes[x.0].needs_grad {
                    let wd = self.nodes[w.0].value.data();
                    let mut dx = vec![T::zero(); bs * din];
                    gemm_b_transposed(bs, dout, din, g, wd, T::zero(), &mut dx);
                    self.accumulate(grads, *x, &dx);
                }
                if self.nodes[w.0].needs_grad {
                    let xd = self.nodes[x.0].value.data();
                    let mut dw = vec![T::zero(); din * dout];
                    gemm_a_transposed(din, bs, dout, xd, g, T::zero(), &mut dw);
                    self.accumulate(grads, *w, &dw);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks_exact(dout) {
                        for (s, &gi) in db.iter_mut().zip(row) {
                            *s += gi;
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::ConcatCols { a, b } => {
                let (bs, ca) = rank2(self.shape(*a)).expect("checked in forward");
                let cb = self.shape(*b)[1];
                let mut da = vec![T::zero(); bs * ca];
                let mut db = vec![T::zero(); bs * cb];
                for i in 0..bs {
                    let row = &g[i * (ca + cb)..(i + 1) * (ca + cb)];
                    da[i * ca..(i + 1) * ca].copy_from_slice(&row[..ca]);
                    db[i * cb..(i + 1) * cb].copy_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::SliceCols { x, from, to } => {
                let (bs, c) = rank2(self.shape(*x)).expect("checked in forward");
                let width = to - from;
                let mut dx = vec![T::zero(); bs * c];
                for i in 0..bs {
                    dx[i * c + from..i * c + to].copy_from_slice(&g[i * width..(i + 1) * width]);
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::BceWithLogits { logits, target } => {
                let zd = self.nodes[logits.0].value.data();
                let n = T::from_f64(zd.len() as f64);
                let scale = g[0] / n;
                let dz: Vec<T> = zd
                    .iter()
                    .zip(target.data())
                    .map(|(&z, &y)| {
                        let s = T::one() / (T::one() + (-z).exp());
                        scale * (s - y)
                    })
                    .collect();
                self.accumulate(grads, *logits, &dz);
            }
            Op::CosineMap { feat, proto, eps } => {
                self.backprop_cosine(*feat, *proto, *eps, g, grads);
            }
            Op::UpsampleBilinear { x } => {
                let (b, c, h, w) = self.nodes[x.0].value.dims4().expect("checked in forward");
                let out_shape = self.nodes[i].value.shape();
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let ys = axis_lerp_table::<T>(h, oh);
                let xs = axis_lerp_table::<T>(w, ow);
                let mut dx = vec![T::zero(); b * c * h * w];
                for i in 0..b * c {
                    let d = &mut dx[i * h * w..(i + 1) * h * w];
                    let go = &g[i * oh * ow..(i + 1) * oh * ow];
                    for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                            let gi = go[oy * ow + ox];
                            d[y0 * w + x0] += gi * wy0 * wx0;
                            d[y0 * w + x1] += gi * wy0 * wx1;
                            d[y1 * w + x0] += gi * wy1 * wx0;
                            d[y1 * w + x1] += gi * wy1 * wx1;
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::MaskedMeanPool { feat, mask, wsum } => {
                let (b, c, h, w) = self.nodes[feat.0].value.dims4().expect("checked in forward");
                let hw = h * w;
                let md = mask.data();
                let mut df = vec![T::zero(); b * c * hw];
                for bi in 0..b {
                    let mplane = &md[bi * hw..(bi + 1) * hw];
                    for ci in 0..c {
                        let gi = g[ci] / *wsum;
                        let d = &mut df[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        for (dv, &m) in d.iter_mut().zip(mplane) {
                            *dv += gi * m;
                        }
                    }
                }
                self.accumulate(grads, *feat, &df);
            }
        }
    }

    fn backprop_bin(
        &self,
        kind: BinKind,
        a: Var,
        b: Var,
        bcast: Bcast,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let need_a = self.nodes[a.0].needs_grad;
        let need_b = self.nodes[b.0].needs_grad;
        let (big_shape, small_map, a_is_small) = match bcast {
            Bcast::Same => (av.shape(), None, false),
            Bcast::LhsSmall(m) => (bv.shape(), Some(m), true),
            Bcast::RhsSmall(m) => (av.shape(), Some(m), false),
        };
        let idx_map = small_index_fn(small_map, big_shape);
        let ad = av.data();
        let bd = bv.data();
        let (a_at, b_at): (Box<dyn Fn(usize) -> T>, Box<dyn Fn(usize) -> T>) = match bcast {
            Bcast::Same => (Box::new(|i| ad[i]), Box::new(|i| bd[i])),
            Bcast::LhsSmall(_) => (Box::new(|i| ad[idx_map(i)]), Box::new(|i| bd[i])),
            Bcast::RhsSmall(_) => (Box::new(|i| ad[i]), Box::new(|i| bd[idx_map(i)])),
        };
        let n = g.len();

        if need_a {
            let da_at = |i: usize| -> T {
                match kind {
                    BinKind::Add | BinKind::Sub => g[i],
                    BinKind::Mul => g[i] * b_at(i),
                    BinKind::Div => g[i] / b_at(i),
                }
            };
            if a_is_small && small_map.is_some() {
                let mut da = vec![T::zero(); av.numel()];
                for i in 0..n {
                    da[idx_map(i)] += da_at(i);
                }
                self.accumulate(grads, a, &da);
            } else {
                let da: Vec<T> = (0..n).map(da_at).collect();
                self.accumulate(grads, a, &da);
            }
        }
        if need_b {
            let db_at = |i: usize| -> T {
                match kind {
                    BinKind::Add => g[i],
                    BinKind::Sub => -g[i],
                    BinKind::Mul => g[i] * a_at(i),
                    BinKind::Div => {
                        let bi = b_at(i);
                        -g[i] * a_at(i) / (bi * bi)
                    }
                }
            };
            if !a_is_small && small_map.is_some() {
                let mut db = vec![T::zero(); bv.numel()];
                for i in 0..n {
                    db[idx_map(i)] += db_at(i);
                }
                self.accumulate(grads, b, &db);
            } else {
                let db: Vec<T> = (0..n).map(db_at).collect();
                self.accumulate(grads, b, &db);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: &[T],
        node: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (bs, cin, h, wd) = self.nodes[x.0].value.dims4().expect("checked in forward");
        let (cout, _, k, _) = self.nodes[w.0].value.dims4().expect("checked in forward");
        let out_shape = self.nodes[node].value.shape();
        let n = out_shape[2] * out_shape[3];
        let kk = cin * k * k;

        if self.nodes[w.0].needs_grad {
            let mut dw = vec![T::zero(); cout * kk];
            for i in 0..bs {
                let gi = &g[i * cout * n..(i + 1) * cout * n];
                let col = &cols[i * kk * n..(i + 1) * kk * n];
                gemm_b_transposed(cout, n, kk, gi, col, T::one(), &mut dw);
            }
            self.accumulate(grads, w, &dw);
        }
        if self.nodes[b.0].needs_grad {
            let mut db = vec![T::zero(); cout];
            for i in 0..bs {
                let gi = &g[i * cout * n..(i + 1) * cout * n];
                for co in 0..cout {
                    let mut acc = T::zero();
                    for &v in &gi[co * n..(co + 1) * n] {
                        acc += v;
                    }
                    db[co] += acc;
                }
            }
            self.accumulate(grads, b, &db);
        }
        if self.nodes[x.0].needs_grad {
            let wdata = self.nodes[w.0].value.data();
            let mut dx = vec![T::zero(); bs * cin * h * wd];
            let mut dcol = vec![T::zero(); kk * n];
            let chw = cin * h * wd;
            for i in 0..bs {
                let gi = &g[i * cout * n..(i + 1) * cout * n];
                gemm_a_transposed(kk, cout, n, wdata, gi, T::zero(), &mut dcol);
                col2im_add(&dcol, cin, h, wd, k, stride, pad, &mut dx[i * chw..(i + 1) * chw]);
            }
            self.accumulate(grads, x, &dx);
        }
    }

    fn backprop_cosine(
        &self,
        feat: Var,
        proto: Var,
        eps: T,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (b, c, h, w) = self.nodes[feat.0].value.dims4().expect("checked in forward");
        let fd = self.nodes[feat.0].value.data();
        let pd = self.nodes[proto.0].value.data();
        let need_f = self.nodes[feat.0].needs_grad;
        let need_p = self.nodes[proto.0].needs_grad;
        let np = pd.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        let hw = h * w;
        let mut df = if need_f { vec![T::zero(); b * c * hw] } else { Vec::new() };
        let mut dp = if need_p { vec![T::zero(); c] } else { Vec::new() };
        let mut d_np = T::zero();
        for bi in 0..b {
            let fbase = bi * c * hw;
            for pix in 0..hw {
                let gi = g[bi * hw + pix];
                if gi == T::zero() {
                    continue;
                }
                let mut dot = T::zero();
                let mut nv2 = T::zero();
                for ci in 0..c {
                    let v = fd[fbase + ci * hw + pix];
                    dot += v * pd[ci];
                    nv2 += v * v;
                }
                let nv = nv2.sqrt();
                let denom = np * nv + eps;
                let d_dot = gi / denom;
                let d_denom = -gi * dot / (denom * denom);
                let d_nv = d_denom * np;
                d_np += d_denom * nv;
                for ci in 0..c {
                    let v = fd[fbase + ci * hw + pix];
                    if need_f {
                        let mut dv = d_dot * pd[ci];
                        if nv > T::zero() {
                            dv += d_nv * v / nv;
                        }
                        df[fbase + ci * hw + pix] += dv;
                    }
                    if need_p {
                        dp[ci] += d_dot * v;
                    }
                }
            }
        }
        if need_p && np > T::zero() {
            for (ci, slot) in dp.iter_mut().enumerate() {
                *slot += d_np * pd[ci] / np;
            }
        }
        if need_f {
            self.accumulate(grads, feat, &df);
        }
        if need_p {
            self.accumulate(grads, proto, &dp);
        }
    }
}

fn op_name<T: Scalar>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Unary { kind, .. } => match kind {
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Abs => "abs",
        },
        Op::Bin { kind, .. } => match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        },
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::SumAll { .. } => "sum_all",
        Op::MeanAll { .. } => "mean_all",
        Op::MeanHw { .. } => "mean_hw",
        Op::Conv2d { .. } => "conv2d",
        Op::AvgPool2 { .. } => "avg_pool2",
        Op::MaxPool2 { .. } => "max_pool2",
        Op::Linear { .. } => "linear",
        Op::ConcatCols { .. } => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::BceWithLogits { .. } => "bce_with_logits",
        Op::CosineMap { .. } => "cosine_map",
        Op::UpsampleBilinear { .. } => "upsample_bilinear",
        Op::MaskedMeanPool { .. } => "masked_mean_pool",
    }
}

fn rank2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [b, c] => Ok((*b, *c)),
        s => Err(Error::shape(format!("expected rank-2 shape, got {s:?}"))),
    }
}

/// Per-output-axis (lo index, hi index, lo weight, hi weight) for bilinear
/// interpolation with half-pixel centers.
fn axis_lerp_table<T: Scalar>(in_len: usize, out_len: usize) -> Vec<(usize, usize, T, T)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let w_hi = src - lo as f64;
            (lo, hi, T::from_f64(1.0 - w_hi), T::from_f64(w_hi))
        })
        .collect()
}

fn resolve_bcast(a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>)> {
    if a == b {
        return Ok((Bcast::Same, a.to_vec()));
    }
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    if bn == 1 {
        return Ok((Bcast::RhsSmall(SmallMap::Scalar), a.to_vec()));
    }
    if an == 1 {
        return Ok((Bcast::LhsSmall(SmallMap::Scalar), b.to_vec()));
    }
    let chan_compatible = |small: &[usize], big: &[usize]| -> bool {
        small.len() == 1 && (big.len() == 2 || big.len() == 4) && big[1] == small[0]
    };
    if chan_compatible(b, a) {
        return Ok((Bcast::RhsSmall(SmallMap::Chan), a.to_vec()));
    }
    if chan_compatible(a, b) {
        return Ok((Bcast::LhsSmall(SmallMap::Chan), b.to_vec()));
    }
    let bc_compatible = |small: &[usize], big: &[usize]| -> bool {
        small.len() == 2 && big.len() == 4 && big[0] == small[0] && big[1] == small[1]
    };
    if bc_compatible(b, a) {
        return Ok((Bcast::RhsSmall(SmallMap::BatchChan), a.to_vec()));
    }
    if bc_compatible(a, b) {
        return Ok((Bcast::LhsSmall(SmallMap::BatchChan), b.to_vec()));
    }
    Err(Error::shape(format!("non-broadcastable shapes {a:?} and {b:?}")))
}

/// Flat-index translation from the big operand to the small one.
fn small_index_fn(map: Option<SmallMap>, big_shape: &[usize]) -> impl Fn(usize) -> usize {
    let (chans, inner) = match big_shape {
        [_, c] => (*c, 1),
        [_, c, h, w] => (*c, h * w),
        _ => (1, 1),
    };
    let batch_chan = chans * inner;
    move |i: usize| match map {
        None | Some(SmallMap::Scalar) => 0,
        Some(SmallMap::Chan) => (i / inner) % chans,
        Some(SmallMap::BatchChan) => i / batch_chan * chans + (i / inner) % chans,
    }
}

fn unary_forward<T: Scalar>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Relu => {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        }
        UnaryKind::Sigmoid => T::one() / (T::one() + (-x).exp()),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Abs => x.abs(),
    }
}

fn bin_apply<T: Scalar>(kind: BinKind, a: T, b: T) -> T {
    match kind {
        BinKind::Add => a + b,
        BinKind::Sub => a - b,
        BinKind::Mul => a * b,
        BinKind::Div => a / b,
    }
}

fn bin_forward<T: Scalar>(kind: BinKind, a: &Tensor<T>, b: &Tensor<T>, bcast: Bcast) -> Vec<T> {
    match bcast {
        Bcast::Same => a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| bin_apply(kind, x, y))
            .collect(),
        Bcast::RhsSmall(m) => {
            let idx = small_index_fn(Some(m), a.shape());
            let bd = b.data();
            a.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| bin_apply(kind, x, bd[idx(i)]))
                .collect()
        }
        Bcast::LhsSmall(m) => {
            let idx = small_index_fn(Some(m), b.shape());
            let ad = a.data();
            b.data()
                .iter()
                .enumerate()
                .map(|(i, &y)| bin_apply(kind, ad[idx(i)], y))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_pointwise() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[-1.0, 2.0]), false).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let z = tape.leaf(t(&[1], &[0.0]), false).unwrap();
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn channel_broadcast_mul_expands_per_channel() {
        // [C]=(2,3) against a constant-one [1,2,2,2] map.
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::full(vec![1, 2, 2, 2], 1.0f64), false).unwrap();
        let v = tape.leaf(t(&[2], &[2.0, 3.0]), false).unwrap();
        let out = tape.mul(f, v).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn non_broadcastable_shapes_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]), false).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![4]), false).unwrap();
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn conv_of_ones_sums_window() {
        // 1x1x3x3 ones, 1x1x3x3 ones kernel, pad 0 -> scalar map value 9.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0f64), false).unwrap();
        let w = tape.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0f64), false).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![1]), false).unwrap();
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 9.0);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let data: Vec<f64> = (0..18).map(|v| v as f64 * 0.5 - 3.0).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 3, 3], &data), false).unwrap();
        // Two output channels, each selecting one input channel.
        let mut wdat = vec![0.0; 2 * 2];
        wdat[0] = 1.0; // out0 <- in0
        wdat[3] = 1.0; // out1 <- in1
        let w = tape.leaf(t(&[2, 2, 1, 1], &wdat), false).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![2]), false).unwrap();
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_shape_mismatch_is_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 3, 4, 4]), false).unwrap();
        let w = tape.leaf(Tensor::zeros(vec![2, 2, 3, 3]), false).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![2]), false).unwrap();
        assert!(tape.conv2d(x, w, b, 1, 1).is_err());
    }

    #[test]
    fn mean_hw_reduces_constant_map() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false).unwrap();
        let m = tape.mean_hw(x).unwrap();
        assert_eq!(tape.value(m).data(), &[2.5]);
        let c = tape.leaf(Tensor::full(vec![2, 3, 4, 4], 7.0f64), false).unwrap();
        let mc = tape.mean_hw(c).unwrap();
        assert!(tape.value(mc).data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true).unwrap();
        let loss = tape.sum_all(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum() {
        // loss = sum(x*x) at x=3 -> grad 6.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0f64), true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = 2x + 3x -> grad 5.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0f64), true).unwrap();
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.scale(x, 3.0).unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum_all(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        let y = tape.scale(x, 2.0).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn backward_on_leaf_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0f64), true).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0f64), false).unwrap();
        let w = tape.leaf(Tensor::scalar(3.0f64), true).unwrap();
        let y = tape.mul(x, w).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().item(), 2.0);
    }

    #[test]
    fn nan_forward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0f64), false).unwrap();
        assert!(tape.sqrt(x).is_err());
    }

    #[test]
    fn masked_pool_single_pixel_selects_it() {
        let mut tape = Tape::new();
        let f = tape
            .leaf(t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]), false)
            .unwrap();
        let mut mask = Tensor::zeros(vec![1, 1, 2, 2]);
        mask.data_mut()[3] = 1.0;
        let p = tape.masked_mean_pool(f, mask).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0, 40.0]);
    }

    #[test]
    fn masked_pool_rejects_empty_mask() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::full(vec![1, 2, 2, 2], 1.0f64), false).unwrap();
        let mask = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(matches!(
            tape.masked_mean_pool(f, mask),
            Err(Error::EmptySupportForeground)
        ));
    }

    #[test]
    fn cosine_of_identical_and_orthogonal_vectors() {
        let mut tape = Tape::new();
        // feat: one pixel equals proto, one orthogonal to it.
        let f = tape.leaf(t(&[1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0]), false).unwrap();
        let p = tape.leaf(t(&[2], &[1.0, 0.0]), false).unwrap();
        let c = tape.cosine_map(f, p, 0.0).unwrap();
        let got = tape.value(c).data();
        assert!((got[0] - 1.0).abs() < 1e-12);
        assert!(got[1].abs() < 1e-12);
    }

    #[test]
    fn determinism_bitwise_across_runs() {
        let run = || -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let data: Vec<f64> = (0..36).map(|i| ((i * 37 + 11) % 17) as f64 * 0.173 - 1.0).collect();
            let x = tape.leaf(t(&[1, 1, 6, 6], &data), true).unwrap();
            let w = tape
                .leaf(t(&[1, 1, 3, 3], &[0.2, -0.1, 0.4, 0.0, 0.3, -0.5, 0.7, 0.1, -0.2]), true)
                .unwrap();
            let b = tape.leaf(t(&[1], &[0.05]), true).unwrap();
            let y = tape.conv2d(x, w, b, 1, 1).unwrap();
            let r = tape.relu(y).unwrap();
            let loss = tape.mean_all(r).unwrap();
            let out = tape.value(loss).data().to_vec();
            let grads = tape.backward(loss).unwrap();
            (out, grads.get(w).unwrap().data().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
