//! Reverse-mode autodiff tape (Wengert list).
//!
//! A [`Tape`] owns every node of one forward computation. Ops append
//! nodes and return [`Var`] handles; `backward` walks the list once in
//! reverse, accumulating gradients additively across fan-out. Nodes are
//! immutable after construction; a tape is single-owner and is rebuilt
//! per forward pass (values are bound in via [`Tape::leaf`], gradients
//! read back out via [`Tape::grad`]).
//!
//! Gradient flow is pruned at construction: a node needs gradients only
//! if one of its inputs does, and only leaves with `requires_grad` seed
//! the need. Attacks bind parameters frozen and the image hot; training
//! does the reverse; both skip roughly half the backward work.

use super::conv::{conv2d_backward_input, conv2d_backward_params, conv2d_blocked, ConvDims};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    Relu(Var),
    AvgPool2(Var),
    Reshape(Var),
    Concat(Var, Var),
    Sum(Var),
    Log(Var),
    L2Normalize(Var),
    Softmax(Var),
    SoftmaxCrossEntropy { logits: Var, label: usize },
    Select(Var, usize),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs: bool,
}

/// One forward computation plus (after `backward`) its gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    swept: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bind a tensor value as a leaf. Copies the data; gradient tracking
    /// follows `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.leaf_parts(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// Leaf from raw parts.
    pub fn leaf_parts(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Op::Leaf, shape, data, requires_grad)
    }

    /// Leaf that never tracks gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf_parts(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Scalar constant.
    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.leaf_parts(vec![], vec![v], false)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            data,
            needs,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Shape of a node.
    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    /// Forward value as an owned tensor (requires_grad not carried).
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.node(v).shape.clone(), self.node(v).data.clone())
            .expect("node shape/data consistent")
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.data.len() == 1 {
            Ok(n.data[0])
        } else {
            Err(Error::NonScalarLoss {
                shape: n.shape.clone(),
            })
        }
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    // ── ops ──────────────────────────────────────────────────────────

    /// Elementwise sum. Shapes must match exactly (no broadcasting).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.node(a).shape.clone();
        let needs = self.node(a).needs || self.node(b).needs;
        Ok(self.push(op, shape, data, needs))
    }

    /// Multiply by a compile-time-known scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.node(a).data.iter().map(|x| c * x).collect();
        let shape = self.node(a).shape.clone();
        let needs = self.node(a).needs;
        self.push(Op::Scale(a, c), shape, data, needs)
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.node(a).data, &self.node(b).data, m, k, n, &mut out);
        let needs = self.node(a).needs || self.node(b).needs;
        Ok(self.push(Op::Matmul(a, b), vec![m, n], out, needs))
    }

    /// Zero-padded stride-1 convolution with bias.
    /// `x: [C,H,W]`, `w: [OC,C,KH,KW]`, `b: [OC]` -> `[OC,OH,OW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let sx = &self.node(x).shape;
        let sw = &self.node(w).shape;
        let sb = &self.node(b).shape;
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: sx.clone(),
                reason: format!("expected x rank 3, w rank 4, b rank 1; got w {sw:?} b {sb:?}"),
            });
        }
        if sw[1] != sx[0] || sb[0] != sw[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx.clone(),
                rhs: sw.clone(),
            });
        }
        let dims = ConvDims {
            c_in: sx[0],
            h: sx[1],
            w: sx[2],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            pad,
        };
        if !dims.valid() {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: sx.clone(),
                reason: format!("kernel {}x{} with pad {pad} exceeds input", sw[2], sw[3]),
            });
        }
        let mut out = vec![0.0; dims.c_out * dims.out_h() * dims.out_w()];
        conv2d_blocked(
            dims,
            &self.node(x).data,
            &self.node(w).data,
            &self.node(b).data,
            &mut out,
        );
        let needs = self.node(x).needs || self.node(w).needs || self.node(b).needs;
        Ok(self.push(
            Op::Conv2d { x, w, b, dims },
            vec![dims.c_out, dims.out_h(), dims.out_w()],
            out,
            needs,
        ))
    }

    /// Elementwise max(0, x). Subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.node(a).shape.clone();
        let needs = self.node(a).needs;
        self.push(Op::Relu(a), shape, data, needs)
    }

    /// 2x2 average pooling, stride 2. `[C,H,W] -> [C,H/2,W/2]`; H and W
    /// must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = &self.node(a).shape;
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "avg_pool2",
                shape: s.clone(),
                reason: "expected [C,H,W] with even H and W".into(),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let x = &self.node(a).data;
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = (ci * h + 2 * i) * w + 2 * j;
                    out[(ci * oh + i) * ow + j] =
                        0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
                }
            }
        }
        let needs = self.node(a).needs;
        Ok(self.push(Op::AvgPool2(a), vec![c, oh, ow], out, needs))
    }

    /// View with a new shape; element count must be preserved.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.node(a).data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("element count != {}", self.node(a).data.len()),
            });
        }
        let data = self.node(a).data.clone();
        let needs = self.node(a).needs;
        Ok(self.push(Op::Reshape(a), shape, data, needs))
    }

    /// Concatenate along axis 0. Trailing dimensions must match.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut data = self.node(a).data.clone();
        data.extend_from_slice(&self.node(b).data);
        let needs = self.node(a).needs || self.node(b).needs;
        Ok(self.push(Op::Concat(a, b), shape, data, needs))
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.node(a).data.iter().sum();
        let needs = self.node(a).needs;
        self.push(Op::Sum(a), vec![], vec![s], needs)
    }

    /// Elementwise natural log. Errors if any element is <= 0.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((i, &v)) = self
            .node(a)
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| **v <= 0.0)
        {
            return Err(Error::Domain {
                op: "log",
                index: i,
                value: v,
            });
        }
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.ln()).collect();
        let shape = self.node(a).shape.clone();
        let needs = self.node(a).needs;
        Ok(self.push(Op::Log(a), shape, data, needs))
    }

    /// x / ||x||_2 over the flattened tensor. Errors on the zero vector.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let n = norm2(&self.node(a).data);
        if n == 0.0 {
            return Err(Error::Domain {
                op: "l2_normalize",
                index: 0,
                value: 0.0,
            });
        }
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x / n).collect();
        let shape = self.node(a).shape.clone();
        let needs = self.node(a).needs;
        Ok(self.push(Op::L2Normalize(a), shape, data, needs))
    }

    /// Numerically stable softmax over a 1-D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = &self.node(a).shape;
        if s.len() != 1 || s[0] == 0 {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape: s.clone(),
                reason: "expected non-empty rank-1 logits".into(),
            });
        }
        let data = softmax_stable(&self.node(a).data);
        let shape = s.clone();
        let needs = self.node(a).needs;
        Ok(self.push(Op::Softmax(a), shape, data, needs))
    }

    /// Fused softmax + cross-entropy against an integer label -> scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let s = &self.node(logits).shape;
        if s.len() != 1 || s[0] == 0 {
            return Err(Error::InvalidShape {
                op: "softmax_cross_entropy",
                shape: s.clone(),
                reason: "expected non-empty rank-1 logits".into(),
            });
        }
        if label >= s[0] {
            return Err(Error::InvalidLabel {
                label,
                cardinality: s[0],
            });
        }
        let z = &self.node(logits).data;
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        let needs = self.node(logits).needs;
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, label },
            vec![],
            vec![loss],
            needs,
        ))
    }

    /// Pick one element of a 1-D tensor -> scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let s = &self.node(a).shape;
        if s.len() != 1 {
            return Err(Error::InvalidShape {
                op: "select",
                shape: s.clone(),
                reason: "expected rank-1 input".into(),
            });
        }
        if index >= s[0] {
            return Err(Error::IndexOutOfRange {
                op: "select",
                index,
                len: s[0],
            });
        }
        let v = self.node(a).data[index];
        let needs = self.node(a).needs;
        Ok(self.push(Op::Select(a, index), vec![], vec![v], needs))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each tape supports exactly one
    /// sweep; build a fresh tape for another gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.swept {
            return Err(Error::BackwardTwice);
        }
        if self.node(loss).data.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.node(loss).shape.clone(),
            });
        }
        self.swept = true;
        if !self.node(loss).needs {
            return Ok(()); // nothing tracks gradients
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    /// Propagate the gradient sitting at node `i` into its inputs.
    fn step_backward(&mut self, i: usize) {
        // Inputs always precede node i, so split to borrow g and the
        // input gradient slots simultaneously.
        let (pre, rest) = self.grads.split_at_mut(i);
        let g = rest[0].as_ref().expect("gradient present");
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].needs;
        let data = |v: Var| &self.nodes[v.0].data;
        let mut add_to = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot =
                pre[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        add_to(v, &mut |dst| {
                            for (d, gi) in dst.iter_mut().zip(g) {
                                *d += gi;
                            }
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let other = data(*b);
                    add_to(*a, &mut |dst| {
                        for ((d, gi), o) in dst.iter_mut().zip(g).zip(other) {
                            *d += gi * o;
                        }
                    });
                }
                if needs(*b) {
                    let other = data(*a);
                    add_to(*b, &mut |dst| {
                        for ((d, gi), o) in dst.iter_mut().zip(g).zip(other) {
                            *d += gi * o;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    let c = *c;
                    add_to(*a, &mut |dst| {
                        for (d, gi) in dst.iter_mut().zip(g) {
                            *d += c * gi;
                        }
                    });
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if needs(*a) {
                    // dA = g . B^T  ([m,n] x [n,k])
                    let bd = data(*b);
                    add_to(*a, &mut |dst| {
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for kk in 0..k {
                                    dst[i * k + kk] += gij * bd[kk * n + j];
                                }
                            }
                        }
                    });
                }
                if needs(*b) {
                    // dB = A^T . g  ([k,m] x [m,n])
                    let ad = data(*a);
                    add_to(*b, &mut |dst| {
                        for i in 0..m {
                            for kk in 0..k {
                                let aik = ad[i * k + kk];
                                if aik == 0.0 {
                                    continue;
                                }
                                let grow = &g[i * n..(i + 1) * n];
                                let drow = &mut dst[kk * n..(kk + 1) * n];
                                for (d, gi) in drow.iter_mut().zip(grow) {
                                    *d += aik * gi;
                                }
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let dims = *dims;
                if needs(*x) {
                    let wd = data(*w);
                    add_to(*x, &mut |dst| conv2d_backward_input(dims, wd, g, dst));
                }
                if needs(*w) || needs(*b) {
                    let xd = data(*x);
                    let mut dw = vec![0.0; self.nodes[w.0].data.len()];
                    let mut db = vec![0.0; self.nodes[b.0].data.len()];
                    conv2d_backward_params(dims, xd, g, &mut dw, &mut db);
                    if needs(*w) {
                        add_to(*w, &mut |dst| {
                            for (d, v) in dst.iter_mut().zip(&dw) {
                                *d += v;
                            }
                        });
                    }
                    if needs(*b) {
                        add_to(*b, &mut |dst| {
                            for (d, v) in dst.iter_mut().zip(&db) {
                                *d += v;
                            }
                        });
                    }
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let x = data(*a);
                    add_to(*a, &mut |dst| {
                        for ((d, gi), xi) in dst.iter_mut().zip(g).zip(x) {
                            if *xi > 0.0 {
                                *d += gi;
                            }
                        }
                    });
                }
            }
            Op::AvgPool2(a) => {
                if needs(*a) {
                    let s = &self.nodes[a.0].shape;
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    add_to(*a, &mut |dst| {
                        for ci in 0..c {
                            for i in 0..oh {
                                for j in 0..ow {
                                    let gi = 0.25 * g[(ci * oh + i) * ow + j];
                                    let base = (ci * h + 2 * i) * w + 2 * j;
                                    dst[base] += gi;
                                    dst[base + 1] += gi;
                                    dst[base + w] += gi;
                                    dst[base + w + 1] += gi;
                                }
                            }
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    add_to(*a, &mut |dst| {
                        for (d, gi) in dst.iter_mut().zip(g) {
                            *d += gi;
                        }
                    });
                }
            }
            Op::Concat(a, b) => {
                let na = self.nodes[a.0].data.len();
                if needs(*a) {
                    add_to(*a, &mut |dst| {
                        for (d, gi) in dst.iter_mut().zip(&g[..na]) {
                            *d += gi;
                        }
                    });
                }
                if needs(*b) {
                    add_to(*b, &mut |dst| {
                        for (d, gi) in dst.iter_mut().zip(&g[na..]) {
                            *d += gi;
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let gv = g[0];
                    add_to(*a, &mut |dst| {
                        for d in dst.iter_mut() {
                            *d += gv;
                        }
                    });
                }
            }
            Op::Log(a) => {
                if needs(*a) {
                    let x = data(*a);
                    add_to(*a, &mut |dst| {
                        for ((d, gi), xi) in dst.iter_mut().zip(g).zip(x) {
                            *d += gi / xi;
                        }
                    });
                }
            }
            Op::L2Normalize(a) => {
                if needs(*a) {
                    let y = &node.data; // normalized output
                    let n = norm2(data(*a));
                    let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                    add_to(*a, &mut |dst| {
                        for ((d, gi), yi) in dst.iter_mut().zip(g).zip(y) {
                            *d += (gi - yi * dot) / n;
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let s = &node.data;
                    let dot: f64 = s.iter().zip(g).map(|(si, gi)| si * gi).sum();
                    add_to(*a, &mut |dst| {
                        for ((d, gi), si) in dst.iter_mut().zip(g).zip(s) {
                            *d += si * (gi - dot);
                        }
                    });
                }
            }
            Op::SoftmaxCrossEntropy { logits, label } => {
                if needs(*logits) {
                    let probs = softmax_stable(data(*logits));
                    let gv = g[0];
                    let label = *label;
                    add_to(*logits, &mut |dst| {
                        for (j, (d, pj)) in dst.iter_mut().zip(&probs).enumerate() {
                            let ind = if j == label { 1.0 } else { 0.0 };
                            *d += gv * (pj - ind);
                        }
                    });
                }
            }
            Op::Select(a, index) => {
                if needs(*a) {
                    let gv = g[0];
                    let index = *index;
                    add_to(*a, &mut |dst| dst[index] += gv);
                }
            }
        }
    }
}

/// `out = a[m,k] . b[k,n]`, row-major, fixed iteration order.
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

fn norm2(xs: &[f64]) -> f64 {
    xs.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn softmax_stable(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}
