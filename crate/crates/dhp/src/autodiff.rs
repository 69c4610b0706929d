//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records operations during the forward pass; node creation
//! order is a topological order, so the backward pass is a single reverse
//! sweep that visits each node exactly once and sums gradients across
//! fan-out. The tape is rebuilt every forward pass; parameters live
//! outside it and are re-registered as leaves each step.

use crate::error::{DhpError, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Scale(VarId, f64),
    Relu(VarId),
    Reshape(VarId),
    Matmul(VarId, VarId),
    BroadcastMul(VarId, VarId),
    BatchedMatmul(VarId, VarId),
    Conv2d {
        input: VarId,
        weight: VarId,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    BiasAdd(VarId, VarId),
    Concat {
        parts: Vec<VarId>,
        axis: usize,
    },
    RepeatInterleave(VarId, usize),
    PixelShuffle(VarId, usize),
    GlobalAvgPool(VarId),
    Sum(VarId),
    Mean(VarId),
    SoftmaxCrossEntropy {
        logits: VarId,
        labels: Vec<usize>,
    },
    Mse(VarId, VarId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Dynamic computation tape.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `id`, if it received one.
    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<VarId> {
        if !value.is_finite() {
            return Err(DhpError::NonFinite("leaf"));
        }
        Ok(self.push(value, Op::Leaf))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(DhpError::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(DhpError::shape(
                "sub",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: VarId, k: f64) -> VarId {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale(a, k))
    }

    /// relu'(0) = 0 by convention.
    pub fn relu(&mut self, a: VarId) -> VarId {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DhpError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, c) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            let arow = &ta.data()[i * k..(i + 1) * k];
            let orow = &mut data[i * c..(i + 1) * c];
            for (l, &av) in arow.iter().enumerate() {
                let brow = &tb.data()[l * c..(l + 1) * c];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    /// Element-wise product under trailing-axis broadcasting: a size-1 axis
    /// stretches, otherwise sizes must match.
    pub fn broadcast_mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let map_a = BroadcastMap::new(ta.shape(), &shape);
        let map_b = BroadcastMap::new(tb.shape(), &shape);
        let n = numel(&shape);
        let mut data = vec![0.0; n];
        let mut idx = vec![0usize; shape.len()];
        for (o, slot) in data.iter_mut().enumerate() {
            *slot = ta.data()[map_a.offset(&idx)] * tb.data()[map_b.offset(&idx)];
            if o + 1 < n {
                advance(&mut idx, &shape);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::BroadcastMul(a, b)))
    }

    /// `a: [n,c,p,m] * b: [n,c,m] -> [n,c,p]`, an independent matrix-vector
    /// product per leading (i, j) index. No broadcasting.
    pub fn batched_matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 4 || sb.len() != 3 || sa[0] != sb[0] || sa[1] != sb[1] || sa[3] != sb[2] {
            return Err(DhpError::shape("batched_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, c, p, m) = (sa[0], sa[1], sa[2], sa[3]);
        let mut data = vec![0.0; n * c * p];
        for ij in 0..n * c {
            let mat = &ta.data()[ij * p * m..(ij + 1) * p * m];
            let vec = &tb.data()[ij * m..(ij + 1) * m];
            let orow = &mut data[ij * p..(ij + 1) * p];
            for (r, slot) in orow.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &v) in vec.iter().enumerate() {
                    acc += mat[r * m + k] * v;
                }
                *slot = acc;
            }
        }
        let out = Tensor::new(vec![n, c, p], data)?;
        Ok(self.push(out, Op::BatchedMatmul(a, b)))
    }

    /// Cross-correlation convolution, NCHW layout.
    pub fn conv2d(
        &mut self,
        input: VarId,
        weight: VarId,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<VarId> {
        let (ti, tw) = (self.value(input), self.value(weight));
        let (si, sw) = (ti.shape(), tw.shape());
        if stride == 0 {
            return Err(DhpError::arg("conv2d", "stride must be positive"));
        }
        if si.len() != 4 || sw.len() != 4 {
            return Err(DhpError::shape("conv2d", format!("{si:?} conv {sw:?}")));
        }
        let (nb, ch, h, w) = (si[0], si[1], si[2], si[3]);
        let (oc, cpg, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if groups == 0 || ch != cpg * groups || oc % groups != 0 {
            return Err(DhpError::shape(
                "conv2d",
                format!("input channels {ch}, weight {cpg}x{groups} groups, out {oc}"),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(DhpError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}+{padding}"),
            ));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let mut data = vec![0.0; nb * oc * ho * wo];
        let ocpg = oc / groups;
        for b in 0..nb {
            for o in 0..oc {
                let g = o / ocpg;
                let obase = (b * oc + o) * ho * wo;
                for ci in 0..cpg {
                    let c = g * cpg + ci;
                    let ibase = (b * ch + c) * h * w;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = tw.data()[((o * cpg + ci) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for y in 0..ho {
                                let iy = y * stride + ky;
                                if iy < padding || iy >= h + padding {
                                    continue;
                                }
                                let irow = ibase + (iy - padding) * w;
                                let orow = obase + y * wo;
                                for x in 0..wo {
                                    let ix = x * stride + kx;
                                    if ix < padding || ix >= w + padding {
                                        continue;
                                    }
                                    data[orow + x] += wv * ti.data()[irow + ix - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![nb, oc, ho, wo], data)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
                groups,
            },
        ))
    }

    /// `x: [N,C,H,W] + b: [C]`, bias broadcast over batch and space.
    pub fn bias_add(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (sx, sb) = (tx.shape(), tb.shape());
        if sx.len() != 4 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(DhpError::shape("bias_add", format!("{sx:?} + {sb:?}")));
        }
        let (nb, ch, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let mut data = tx.data().to_vec();
        for bi in 0..nb {
            for c in 0..ch {
                let bv = tb.data()[c];
                let base = (bi * ch + c) * hw;
                for v in &mut data[base..base + hw] {
                    *v += bv;
                }
            }
        }
        let out = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(out, Op::BiasAdd(x, b)))
    }

    /// Concatenate same-rank tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        if parts.is_empty() {
            return Err(DhpError::arg("concat", "no inputs"));
        }
        let rank = self.value(parts[0]).shape().len();
        if axis >= rank {
            return Err(DhpError::arg("concat", format!("axis {axis} for rank {rank}")));
        }
        let mut shape = self.value(parts[0]).shape().to_vec();
        shape[axis] = 0;
        for &p in parts {
            let sp = self.value(p).shape();
            if sp.len() != rank
                || sp
                    .iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != shape[i])
            {
                return Err(DhpError::shape("concat", format!("{sp:?} into {shape:?}")));
            }
            shape[axis] += sp[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; numel(&shape)];
        let total_axis = shape[axis];
        let mut offset = 0;
        for &p in parts {
            let tp = self.value(p);
            let pa = tp.shape()[axis];
            for ou in 0..outer {
                let src = &tp.data()[ou * pa * inner..(ou + 1) * pa * inner];
                let dst = (ou * total_axis + offset) * inner;
                data[dst..dst + pa * inner].copy_from_slice(src);
            }
            offset += pa;
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `[d] -> [d*k]` with `out[i*k + t] = in[i]`.
    pub fn repeat_interleave(&mut self, a: VarId, k: usize) -> Result<VarId> {
        let ta = self.value(a);
        if ta.shape().len() != 1 || k == 0 {
            return Err(DhpError::arg(
                "repeat_interleave",
                format!("need 1-D input and k > 0, got {:?} k={k}", ta.shape()),
            ));
        }
        let mut data = Vec::with_capacity(ta.numel() * k);
        for &v in ta.data() {
            data.extend(std::iter::repeat(v).take(k));
        }
        let out = Tensor::new(vec![ta.numel() * k], data)?;
        Ok(self.push(out, Op::RepeatInterleave(a, k)))
    }

    /// `[N, C*r^2, H, W] -> [N, C, H*r, W*r]`; every r^2 consecutive input
    /// channels interleave into the spatial grid of one output channel.
    pub fn pixel_shuffle(&mut self, a: VarId, r: usize) -> Result<VarId> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 4 || r == 0 || s[1] % (r * r) != 0 {
            return Err(DhpError::shape(
                "pixel_shuffle",
                format!("{s:?} with factor {r}"),
            ));
        }
        let (nb, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let co = ch / (r * r);
        let mut data = vec![0.0; nb * ch * h * w];
        let (ho, wo) = (h * r, w * r);
        for b in 0..nb {
            for c in 0..co {
                for i in 0..r {
                    for j in 0..r {
                        let cin = c * r * r + i * r + j;
                        let ibase = (b * ch + cin) * h * w;
                        let obase = (b * co + c) * ho * wo;
                        for y in 0..h {
                            for x in 0..w {
                                data[obase + (y * r + i) * wo + x * r + j] =
                                    ta.data()[ibase + y * w + x];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![nb, co, ho, wo], data)?;
        Ok(self.push(out, Op::PixelShuffle(a, r)))
    }

    /// `[N,C,H,W] -> [N,C,1,1]` spatial mean.
    pub fn global_avg_pool(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 4 {
            return Err(DhpError::shape("global_avg_pool", format!("{s:?}")));
        }
        let (nb, ch, hw) = (s[0], s[1], s[2] * s[3]);
        let mut data = vec![0.0; nb * ch];
        for (i, slot) in data.iter_mut().enumerate() {
            *slot = ta.data()[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let out = Tensor::new(vec![nb, ch, 1, 1], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(a)))
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let t = self.value(a);
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let tl = self.value(logits);
        let s = tl.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(DhpError::shape(
                "softmax_cross_entropy",
                format!("logits {s:?}, {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(DhpError::arg(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &tl.data()[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        let out = Tensor::scalar(loss / labels.len() as f64);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(DhpError::shape(
                "mse",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let n = ta.numel() as f64;
        let sum: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(sum / n);
        Ok(self.push(out, Op::Mse(a, b)))
    }

    /// Reverse sweep from `target` (a scalar). Gradients accumulate across
    /// fan-out; read them back with [`Tape::grad`].
    pub fn backward(&mut self, target: VarId) -> Result<()> {
        if self.value(target).numel() != 1 {
            return Err(DhpError::arg("backward", "target must be scalar"));
        }
        if !self.value(target).is_finite() {
            return Err(DhpError::NonFinite("backward target"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[target.0] = Some(Tensor::full(self.value(target).shape(), 1.0));
        for i in (0..=target.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, self.value(*a).shape(), g.data());
                acc(grads, *b, self.value(*b).shape(), g.data());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, self.value(*a).shape(), g.data());
                let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                acc(grads, *b, self.value(*b).shape(), &neg);
            }
            Op::Scale(a, k) => {
                let d: Vec<f64> = g.data().iter().map(|v| v * k).collect();
                acc(grads, *a, self.value(*a).shape(), &d);
            }
            Op::Relu(a) => {
                let d: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(grads, *a, self.value(*a).shape(), &d);
            }
            Op::Reshape(a) => acc(grads, *a, self.value(*a).shape(), g.data()),
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, c) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut da = vec![0.0; n * k];
                let mut db = vec![0.0; k * c];
                for ii in 0..n {
                    let grow = &g.data()[ii * c..(ii + 1) * c];
                    for l in 0..k {
                        let brow = &tb.data()[l * c..(l + 1) * c];
                        let mut accum = 0.0;
                        for (gv, bv) in grow.iter().zip(brow) {
                            accum += gv * bv;
                        }
                        da[ii * k + l] = accum;
                        let av = ta.data()[ii * k + l];
                        let dbrow = &mut db[l * c..(l + 1) * c];
                        for (dslot, gv) in dbrow.iter_mut().zip(grow) {
                            *dslot += av * gv;
                        }
                    }
                }
                acc(grads, *a, ta.shape(), &da);
                acc(grads, *b, tb.shape(), &db);
            }
            Op::BroadcastMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let shape = node.value.shape();
                let map_a = BroadcastMap::new(ta.shape(), shape);
                let map_b = BroadcastMap::new(tb.shape(), shape);
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                let n = node.value.numel();
                let mut idx = vec![0usize; shape.len()];
                for (o, &gv) in g.data().iter().enumerate() {
                    let (ia, ib) = (map_a.offset(&idx), map_b.offset(&idx));
                    da[ia] += gv * tb.data()[ib];
                    db[ib] += gv * ta.data()[ia];
                    if o + 1 < n {
                        advance(&mut idx, shape);
                    }
                }
                acc(grads, *a, ta.shape(), &da);
                acc(grads, *b, tb.shape(), &db);
            }
            Op::BatchedMatmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let s = ta.shape();
                let (n, c, p, m) = (s[0], s[1], s[2], s[3]);
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                for ij in 0..n * c {
                    let mat = &ta.data()[ij * p * m..(ij + 1) * p * m];
                    let vec = &tb.data()[ij * m..(ij + 1) * m];
                    let grow = &g.data()[ij * p..(ij + 1) * p];
                    let damat = &mut da[ij * p * m..(ij + 1) * p * m];
                    let dbvec = &mut db[ij * m..(ij + 1) * m];
                    for (r, &gv) in grow.iter().enumerate() {
                        for k in 0..m {
                            damat[r * m + k] += gv * vec[k];
                            dbvec[k] += gv * mat[r * m + k];
                        }
                    }
                }
                acc(grads, *a, ta.shape(), &da);
                acc(grads, *b, tb.shape(), &db);
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
                groups,
            } => {
                let (ti, tw) = (self.value(*input), self.value(*weight));
                let (si, sw) = (ti.shape(), tw.shape());
                let (nb, ch, h, w) = (si[0], si[1], si[2], si[3]);
                let (oc, cpg, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
                let so = node.value.shape();
                let (ho, wo) = (so[2], so[3]);
                let (s, p) = (*stride, *padding);
                let ocpg = oc / groups;
                let mut di = vec![0.0; ti.numel()];
                let mut dw = vec![0.0; tw.numel()];
                for b in 0..nb {
                    for o in 0..oc {
                        let grp = o / ocpg;
                        let obase = (b * oc + o) * ho * wo;
                        for ci in 0..cpg {
                            let c = grp * cpg + ci;
                            let ibase = (b * ch + c) * h * w;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let widx = ((o * cpg + ci) * kh + ky) * kw + kx;
                                    let wv = tw.data()[widx];
                                    let mut wacc = 0.0;
                                    for y in 0..ho {
                                        let iy = y * s + ky;
                                        if iy < p || iy >= h + p {
                                            continue;
                                        }
                                        let irow = ibase + (iy - p) * w;
                                        let orow = obase + y * wo;
                                        for x in 0..wo {
                                            let ix = x * s + kx;
                                            if ix < p || ix >= w + p {
                                                continue;
                                            }
                                            let gv = g.data()[orow + x];
                                            di[irow + ix - p] += wv * gv;
                                            wacc += ti.data()[irow + ix - p] * gv;
                                        }
                                    }
                                    dw[widx] += wacc;
                                }
                            }
                        }
                    }
                }
                acc(grads, *input, si, &di);
                acc(grads, *weight, sw, &dw);
            }
            Op::BiasAdd(x, b) => {
                let (tx, tb) = (self.value(*x), self.value(*b));
                let sx = tx.shape();
                let (nb, ch, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                let mut db = vec![0.0; ch];
                for bi in 0..nb {
                    for c in 0..ch {
                        let base = (bi * ch + c) * hw;
                        db[c] += g.data()[base..base + hw].iter().sum::<f64>();
                    }
                }
                acc(grads, *x, sx, g.data());
                acc(grads, *b, tb.shape(), &db);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total_axis = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let sp = self.value(p).shape().to_vec();
                    let pa = sp[*axis];
                    let mut dp = vec![0.0; numel(&sp)];
                    for ou in 0..outer {
                        let src = (ou * total_axis + offset) * inner;
                        dp[ou * pa * inner..(ou + 1) * pa * inner]
                            .copy_from_slice(&g.data()[src..src + pa * inner]);
                    }
                    acc(grads, p, &sp, &dp);
                    offset += pa;
                }
            }
            Op::RepeatInterleave(a, k) => {
                let d = self.value(*a).numel();
                let mut da = vec![0.0; d];
                for (i, slot) in da.iter_mut().enumerate() {
                    *slot = g.data()[i * k..(i + 1) * k].iter().sum();
                }
                acc(grads, *a, self.value(*a).shape(), &da);
            }
            Op::PixelShuffle(a, r) => {
                let ta = self.value(*a);
                let s = ta.shape();
                let (nb, ch, h, w) = (s[0], s[1], s[2], s[3]);
                let co = ch / (r * r);
                let (ho, wo) = (h * r, w * r);
                let mut da = vec![0.0; ta.numel()];
                for b in 0..nb {
                    for c in 0..co {
                        for i in 0..*r {
                            for j in 0..*r {
                                let cin = c * r * r + i * r + j;
                                let ibase = (b * ch + cin) * h * w;
                                let obase = (b * co + c) * ho * wo;
                                for y in 0..h {
                                    for x in 0..w {
                                        da[ibase + y * w + x] =
                                            g.data()[obase + (y * r + i) * wo + x * r + j];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *a, s, &da);
            }
            Op::GlobalAvgPool(a) => {
                let ta = self.value(*a);
                let s = ta.shape();
                let hw = s[2] * s[3];
                let mut da = vec![0.0; ta.numel()];
                for (i, chunk) in da.chunks_mut(hw).enumerate() {
                    let gv = g.data()[i] / hw as f64;
                    chunk.fill(gv);
                }
                acc(grads, *a, s, &da);
            }
            Op::Sum(a) => {
                let gv = g.item();
                let da = vec![gv; self.value(*a).numel()];
                acc(grads, *a, self.value(*a).shape(), &da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let gv = g.item() / n as f64;
                let da = vec![gv; n];
                acc(grads, *a, self.value(*a).shape(), &da);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let tl = self.value(*logits);
                let k = tl.shape()[1];
                let n = labels.len();
                let gv = g.item() / n as f64;
                let mut dl = vec![0.0; tl.numel()];
                for (i, &label) in labels.iter().enumerate() {
                    let row = &tl.data()[i * k..(i + 1) * k];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let drow = &mut dl[i * k..(i + 1) * k];
                    for (j, slot) in drow.iter_mut().enumerate() {
                        let p = (row[j] - max).exp() / denom;
                        *slot = gv * (p - if j == label { 1.0 } else { 0.0 });
                    }
                }
                acc(grads, *logits, tl.shape(), &dl);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = ta.numel() as f64;
                let gv = g.item() * 2.0 / n;
                let da: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| gv * (x - y))
                    .collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                acc(grads, *a, ta.shape(), &da);
                acc(grads, *b, tb.shape(), &db);
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], id: VarId, shape: &[usize], contribution: &[f64]) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (slot, c) in existing.data_mut().iter_mut().zip(contribution) {
                *slot += c;
            }
        }
        slot @ None => {
            *slot = Some(
                Tensor::new(shape.to_vec(), contribution.to_vec())
                    .expect("gradient shape matches value shape"),
            );
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(DhpError::shape(
                    "broadcast_mul",
                    format!("{a:?} incompatible with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

/// Maps a multi-index in the broadcast output to a flat offset in a
/// (possibly lower-rank, size-1-stretched) operand.
struct BroadcastMap {
    strides: Vec<usize>, // aligned to output rank; 0 where the operand broadcasts
}

impl BroadcastMap {
    fn new(op_shape: &[usize], out_shape: &[usize]) -> Self {
        let rank = out_shape.len();
        let off = rank - op_shape.len();
        let mut strides = vec![0usize; rank];
        let mut s = 1;
        for i in (0..op_shape.len()).rev() {
            strides[off + i] = if op_shape[i] == 1 { 0 } else { s };
            s *= op_shape[i];
        }
        BroadcastMap { strides }
    }

    fn offset(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }
}

fn advance(idx: &mut [usize], shape: &[usize]) {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < shape[i] {
            return;
        }
        idx[i] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against reverse-mode gradients for a
    /// scalar-valued builder over leaf tensors.
    fn check_grads(build: impl Fn(&mut Tape, &[VarId]) -> VarId, inputs: &[Tensor], tol: f64) {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone()).unwrap())
            .collect();
        let out = build(&mut tape, &ids);
        tape.backward(out).unwrap();
        let eval = |ts: &[Tensor]| {
            let mut tp = Tape::new();
            let ids: Vec<VarId> = ts.iter().map(|t| tp.leaf(t.clone()).unwrap()).collect();
            let o = build(&mut tp, &ids);
            tp.value(o).item()
        };
        let h = 1e-5;
        for (k, t) in inputs.iter().enumerate() {
            let g = tape
                .grad(ids[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            for i in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = g.data()[i];
                let denom = fd.abs().max(a.abs()).max(1.0);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "input {k} element {i}: analytic {a}, fd {fd}"
                );
            }
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_grads() {
        check_grads(
            |t, v| {
                let p = t.matmul(v[0], v[1]).unwrap();
                t.sum(p)
            },
            &[randn(&[3, 4], 1), randn(&[4, 2], 2)],
            1e-6,
        );
    }

    #[test]
    fn conv2d_grads() {
        check_grads(
            |t, v| {
                let c = t.conv2d(v[0], v[1], 2, 1, 1).unwrap();
                let r = t.relu(c);
                t.sum(r)
            },
            &[randn(&[2, 3, 5, 5], 3), randn(&[4, 3, 3, 3], 4)],
            1e-5,
        );
    }

    #[test]
    fn grouped_conv_grads() {
        check_grads(
            |t, v| {
                let c = t.conv2d(v[0], v[1], 1, 1, 4).unwrap();
                t.sum(c)
            },
            &[randn(&[1, 4, 4, 4], 5), randn(&[4, 1, 3, 3], 6)],
            1e-6,
        );
    }

    #[test]
    fn broadcast_mul_grads() {
        check_grads(
            |t, v| {
                let p = t.broadcast_mul(v[0], v[1]).unwrap();
                t.sum(p)
            },
            &[randn(&[3, 2, 1], 7), randn(&[3, 2, 4], 8)],
            1e-6,
        );
    }

    #[test]
    fn batched_matmul_grads() {
        check_grads(
            |t, v| {
                let p = t.batched_matmul(v[0], v[1]).unwrap();
                t.sum(p)
            },
            &[randn(&[2, 3, 4, 5], 9), randn(&[2, 3, 5], 10)],
            1e-6,
        );
    }

    #[test]
    fn structural_op_grads() {
        check_grads(
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 0).unwrap();
                let r = t.repeat_interleave(c, 3).unwrap();
                t.mean(r)
            },
            &[randn(&[3], 11), randn(&[2], 12)],
            1e-6,
        );
        check_grads(
            |t, v| {
                let p = t.pixel_shuffle(v[0], 2).unwrap();
                let g = t.global_avg_pool(p).unwrap();
                t.sum(g)
            },
            &[randn(&[1, 8, 3, 3], 13)],
            1e-6,
        );
    }

    #[test]
    fn loss_grads() {
        check_grads(
            |t, v| {
                let b = t.bias_add(v[0], v[1]).unwrap();
                let g = t.global_avg_pool(b).unwrap();
                let logits = t.reshape(g, vec![2, 3]).unwrap();
                t.softmax_cross_entropy(logits, &[2, 0]).unwrap()
            },
            &[randn(&[2, 3, 2, 2], 14), randn(&[3], 15)],
            1e-6,
        );
        check_grads(
            |t, v| t.mse(v[0], v[1]).unwrap(),
            &[randn(&[2, 1, 3, 3], 16), randn(&[2, 1, 3, 3], 17)],
            1e-6,
        );
    }

    #[test]
    fn fanout_gradients_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.5, -2.0])).unwrap();
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0, 1.0, -1.0])).unwrap();
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn conv2d_hand_value() {
        // 1x1x2x2 input, 1x1x2x2 kernel, no padding: plain dot product
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let w = tape
            .leaf(Tensor::new(vec![1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap())
            .unwrap();
        let y = tape.conv2d(x, w, 1, 0, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert!((tape.value(y).item() - (0.5 - 2.0 + 6.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn pixel_shuffle_hand_value() {
        // channels [c0r00, c0r01, c0r10, c0r11] over a 1x1 map
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let y = tape.pixel_shuffle(x, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(randn(&[2, 3, 4, 4], 21)).unwrap();
            let w = tape.leaf(randn(&[5, 3, 3, 3], 22)).unwrap();
            let c = tape.conv2d(x, w, 1, 1, 1).unwrap();
            let r = tape.relu(c);
            let m = tape.mean(r);
            tape.backward(m).unwrap();
            (
                tape.value(m).item(),
                tape.grad(x).unwrap().clone(),
                tape.grad(w).unwrap().clone(),
            )
        };
        let (v1, gx1, gw1) = run();
        let (v2, gx2, gw2) = run();
        assert!(v1 == v2 && gx1 == gx2 && gw1 == gw2);
    }
}
