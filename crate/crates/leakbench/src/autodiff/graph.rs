//! Eager-recorded reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every primitive call computes its output immediately
//! and appends one node, so node order is a topological order by construction.
//! [`Graph::backward`] replays the tape in reverse exactly once, accumulating
//! vector-Jacobian products into each `requires_grad` node.

use crate::autodiff::kernels;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a node on the tape.
pub type NodeId = usize;

/// Recorded primitive operations.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul,
    Conv2d { stride: usize, padding: usize },
    Relu,
    Add,
    AddScalar,
    Mul,
    ScalarMul(f64),
    Sum,
    Mean,
    Exp,
    Log,
    L2NormalizeRows,
    SoftmaxCrossEntropy { labels: Vec<usize> },
    BceWithLogits { targets: Vec<f64>, pos_weight: f64 },
    Concat,
    Slice { start: usize, end: usize },
    Transpose,
    GlobalMeanPool,
    GradReverse { lambda: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    out: Tensor,
}

/// Smoothing constant inside row norms so normalization never divides by zero.
pub const NORM_EPS: f64 = 1e-12;

/// Tape of recorded operations plus their cached outputs and gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// Numerically stable `log(1 + exp(t))`.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Logistic sigmoid computed without overflow for large `|t|`.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], t)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let mut t = t;
        if t.requires_grad() {
            t = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        }
        self.push(Op::Leaf, vec![], t)
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].out
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        self.nodes[id].out.data()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].out.shape()
    }

    /// Accumulated gradient of `id`, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].out.grad()
    }

    /// Clear accumulated gradients on every node.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.out.zero_grad();
        }
    }

    /// Error if the node's value contains NaN/Inf.
    pub fn check_finite(&self, id: NodeId, context: &str) -> Result<()> {
        self.nodes[id].out.check_finite(context)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, out: Tensor) -> NodeId {
        let mut out = out;
        let needs = out.requires_grad()
            || inputs.iter().any(|&i| self.nodes[i].out.requires_grad());
        if needs && !out.requires_grad() {
            out = out.with_grad();
        }
        self.nodes.push(Node { op, inputs, out });
        self.nodes.len() - 1
    }

    // ── primitives ──────────────────────────────────────────────────────

    /// `a @ b` for 2-D operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("lhs {sa:?} rhs {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::Matmul, vec![a, b], out))
    }

    /// 2-D convolution with zero padding: `x [B,C,H,W]`, `w [Co,C,kh,kw]`,
    /// `bias [Co]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("input {sx:?} kernel {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(shape_err(
                "conv2d",
                format!("input channels {} vs kernel channels {} (input {sx:?} kernel {sw:?})", sx[1], sw[1]),
            ));
        }
        if sb != [sw[0]] {
            return Err(shape_err("conv2d", format!("bias {sb:?} for {} output channels", sw[0])));
        }
        let (b, c, h, wid) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        let ho = kernels::conv_out_len(h, kh, stride, padding)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {kh}x{kw} stride {stride} pad {padding} does not fit input {sx:?}")))?;
        let wo = kernels::conv_out_len(wid, kw, stride, padding)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {kh}x{kw} stride {stride} pad {padding} does not fit input {sx:?}")))?;
        let m = b * ho * wo;
        let cols = kernels::im2col(self.value(x), b, c, h, wid, kh, kw, stride, padding);
        let out_mat = kernels::matmul(self.value(w), &cols, co, c * kh * kw, m);
        let bias_v = self.value(bias).to_vec();
        let mut data = vec![0.0; b * co * ho * wo];
        for bi in 0..b {
            for ci in 0..co {
                let src = &out_mat[ci * m + bi * ho * wo..ci * m + (bi + 1) * ho * wo];
                let dst = &mut data[(bi * co + ci) * ho * wo..(bi * co + ci + 1) * ho * wo];
                let bv = bias_v[ci];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let out = Tensor::new(vec![b, co, ho, wo], data)?;
        Ok(self.push(Op::Conv2d { stride, padding }, vec![x, w, bias], out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(Op::Relu, vec![x], out)
    }

    /// Element-wise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("lhs {:?} rhs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Add, vec![a, b], out))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.value(x).iter().map(|v| v + c).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(Op::AddScalar, vec![x], out)
    }

    /// Element-wise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "mul",
                format!("lhs {:?} rhs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Mul, vec![a, b], out))
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(Op::ScalarMul(c), vec![x], out)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).iter().sum();
        self.push(Op::Mean, vec![x], Tensor::scalar(s / n))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(x).iter().map(|v| v.exp()).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(Op::Exp, vec![x], out)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(x).iter().map(|v| v.ln()).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(Op::Log, vec![x], out)
    }

    /// Normalize each row of a 2-D tensor to unit length; the norm carries a
    /// `NORM_EPS` smoothing term so zero rows stay finite.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("l2_normalize", format!("expected 2-D input, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let norm = (row.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
            for (d, x) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *d = x / norm;
            }
        }
        let out = Tensor::new(s, data)?;
        Ok(self.push(Op::L2NormalizeRows, vec![x], out))
    }

    /// Mean softmax cross-entropy of `logits [B,K]` against integer class
    /// labels, fused for numerical stability.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "class label {bad} out of range for {k} classes"
            )));
        }
        let v = self.value(logits);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &v[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(Op::SoftmaxCrossEntropy { labels: labels.to_vec() }, vec![logits], out))
    }

    /// Mean binary cross-entropy with logits and a positive-class weight,
    /// computed in softplus form so large logits cannot overflow.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: &[f64],
        pos_weight: f64,
    ) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        let flat_ok = s.len() == 1 || (s.len() == 2 && s[1] == 1);
        if !flat_ok || s[0] != targets.len() {
            return Err(shape_err(
                "bce_with_logits",
                format!("logits {s:?} with {} targets", targets.len()),
            ));
        }
        if pos_weight <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "pos_weight must be positive, got {pos_weight}"
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "binary targets must be 0 or 1, got {bad}"
            )));
        }
        let v = self.value(logits);
        let mut total = 0.0;
        for (x, y) in v.iter().zip(targets) {
            total += pos_weight * y * softplus(-x) + (1.0 - y) * softplus(*x);
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(
            Op::BceWithLogits { targets: targets.to_vec(), pos_weight },
            vec![logits],
            out,
        ))
    }

    /// Concatenate tensors along the first axis; trailing dimensions must match.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(shape_err(
                    "concat",
                    format!("first part {first:?} vs part {s:?}"),
                ));
            }
            rows += s[0];
        }
        let mut shape = first;
        shape[0] = rows;
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Op::Concat, parts.to_vec(), out))
    }

    /// Rows `[start, end)` along the first axis.
    pub fn slice(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start >= end || end > s[0] {
            return Err(shape_err(
                "slice",
                format!("rows [{start}, {end}) of tensor {s:?}"),
            ));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x)[start * inner..end * inner].to_vec();
        let mut shape = s;
        shape[0] = end - start;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Op::Slice { start, end }, vec![x], out))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("expected 2-D input, got {s:?}")));
        }
        let data = kernels::transpose(self.value(x), s[0], s[1]);
        let out = Tensor::new(vec![s[1], s[0]], data)?;
        Ok(self.push(Op::Transpose, vec![x], out))
    }

    /// Mean over the two spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn global_mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("global_mean_pool", format!("expected 4-D input, got {s:?}")));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let v = self.value(x);
        let mut data = vec![0.0; b * c];
        for i in 0..b * c {
            data[i] = v[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let out = Tensor::new(vec![b, c], data)?;
        Ok(self.push(Op::GlobalMeanPool, vec![x], out))
    }

    /// Identity forward; multiplies the upstream gradient by `-lambda` in the
    /// backward pass. `lambda` must be positive — use the value unchanged when
    /// no reversal is wanted.
    pub fn grad_reverse(&mut self, x: NodeId, lambda: f64) -> Result<NodeId> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "grad_reverse lambda must be positive, got {lambda}"
            )));
        }
        let out = Tensor::new(self.shape(x).to_vec(), self.value(x).to_vec())?;
        Ok(self.push(Op::GradReverse { lambda }, vec![x], out))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar `loss` node.
    ///
    /// Accumulates `d loss / d node` into every `requires_grad` node reached,
    /// visiting each tape entry exactly once in reverse order. Calling twice
    /// without [`Graph::zero_grads`] sums the two passes.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss].out.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if !self.nodes[id].out.requires_grad() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            self.nodes[id].out.accumulate_grad(&g);
        }
        Ok(())
    }

    fn input_requires_grad(&self, id: NodeId, slot: usize) -> bool {
        let inp = self.nodes[id].inputs[slot];
        self.nodes[inp].out.requires_grad()
    }

    fn donate(&self, grads: &mut [Option<Vec<f64>>], target: NodeId, delta: Vec<f64>) {
        match &mut grads[target] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let inputs = node.inputs.clone();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.input_requires_grad(id, 0) {
                    let da = kernels::matmul_a_bt(g, self.value(b), m, n, k);
                    self.donate(grads, a, da);
                }
                if self.input_requires_grad(id, 1) {
                    let db = kernels::matmul_at_b(self.value(a), g, m, k, n);
                    self.donate(grads, b, db);
                }
            }
            Op::Conv2d { stride, padding } => {
                let (x, w, bias) = (inputs[0], inputs[1], inputs[2]);
                let sx = self.shape(x);
                let sw = self.shape(w);
                let (b, c, h, wid) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                let ho = kernels::conv_out_len(h, kh, *stride, *padding).expect("validated");
                let wo = kernels::conv_out_len(wid, kw, *stride, *padding).expect("validated");
                let m = b * ho * wo;
                // Regroup upstream grad [B,Co,Ho,Wo] as [Co, B*Ho*Wo].
                let mut g_mat = vec![0.0; co * m];
                for bi in 0..b {
                    for ci in 0..co {
                        let src = &g[(bi * co + ci) * ho * wo..(bi * co + ci + 1) * ho * wo];
                        g_mat[ci * m + bi * ho * wo..ci * m + (bi + 1) * ho * wo]
                            .copy_from_slice(src);
                    }
                }
                if self.input_requires_grad(id, 2) {
                    let mut db = vec![0.0; co];
                    for ci in 0..co {
                        db[ci] = g_mat[ci * m..(ci + 1) * m].iter().sum();
                    }
                    self.donate(grads, bias, db);
                }
                let need_w = self.input_requires_grad(id, 1);
                let need_x = self.input_requires_grad(id, 0);
                if need_w {
                    let cols =
                        kernels::im2col(self.value(x), b, c, h, wid, kh, kw, *stride, *padding);
                    let dw = kernels::matmul_a_bt(&g_mat, &cols, co, m, c * kh * kw);
                    self.donate(grads, w, dw);
                }
                if need_x {
                    let d_cols = kernels::matmul_at_b(self.value(w), &g_mat, co, c * kh * kw, m);
                    let dx =
                        kernels::col2im(&d_cols, b, c, h, wid, kh, kw, *stride, *padding);
                    self.donate(grads, x, dx);
                }
            }
            Op::Relu => {
                let x = inputs[0];
                let dx: Vec<f64> = self
                    .value(x)
                    .iter()
                    .zip(g)
                    .map(|(v, gi)| if *v > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.donate(grads, x, dx);
            }
            Op::Add => {
                if self.input_requires_grad(id, 0) {
                    self.donate(grads, inputs[0], g.to_vec());
                }
                if self.input_requires_grad(id, 1) {
                    self.donate(grads, inputs[1], g.to_vec());
                }
            }
            Op::AddScalar => self.donate(grads, inputs[0], g.to_vec()),
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.input_requires_grad(id, 0) {
                    let da: Vec<f64> = g.iter().zip(self.value(b)).map(|(gi, bv)| gi * bv).collect();
                    self.donate(grads, a, da);
                }
                if self.input_requires_grad(id, 1) {
                    let db: Vec<f64> = g.iter().zip(self.value(a)).map(|(gi, av)| gi * av).collect();
                    self.donate(grads, b, db);
                }
            }
            Op::ScalarMul(c) => {
                let dx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                self.donate(grads, inputs[0], dx);
            }
            Op::Sum => {
                let n = self.value(inputs[0]).len();
                self.donate(grads, inputs[0], vec![g[0]; n]);
            }
            Op::Mean => {
                let n = self.value(inputs[0]).len();
                self.donate(grads, inputs[0], vec![g[0] / n as f64; n]);
            }
            Op::Exp => {
                let dx: Vec<f64> = g.iter().zip(self.value(id)).map(|(gi, y)| gi * y).collect();
                self.donate(grads, inputs[0], dx);
            }
            Op::Log => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(inputs[0]))
                    .map(|(gi, x)| gi / x)
                    .collect();
                self.donate(grads, inputs[0], dx);
            }
            Op::L2NormalizeRows => {
                let x = inputs[0];
                let s = self.shape(x);
                let (rows, cols) = (s[0], s[1]);
                let v = self.value(x);
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let xr = &v[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let norm = (xr.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
                    let dot: f64 = gr.iter().zip(xr).map(|(gi, xi)| gi * xi).sum();
                    let n3 = norm * norm * norm;
                    for (d, (gi, xi)) in dx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(gr.iter().zip(xr))
                    {
                        *d = gi / norm - xi * dot / n3;
                    }
                }
                self.donate(grads, x, dx);
            }
            Op::SoftmaxCrossEntropy { labels } => {
                let logits = inputs[0];
                let k = self.shape(logits)[1];
                let v = self.value(logits);
                let scale = g[0] / labels.len() as f64;
                let mut dx = vec![0.0; v.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let row = &v[i * k..(i + 1) * k];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|x| (x - m).exp()).sum();
                    for (j, x) in row.iter().enumerate() {
                        let p = (x - m).exp() / denom;
                        dx[i * k + j] = scale * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                self.donate(grads, logits, dx);
            }
            Op::BceWithLogits { targets, pos_weight } => {
                let logits = inputs[0];
                let v = self.value(logits);
                let scale = g[0] / targets.len() as f64;
                let dx: Vec<f64> = v
                    .iter()
                    .zip(targets)
                    .map(|(x, y)| {
                        scale * (pos_weight * y * (sigmoid(*x) - 1.0) + (1.0 - y) * sigmoid(*x))
                    })
                    .collect();
                self.donate(grads, logits, dx);
            }
            Op::Concat => {
                let mut offset = 0;
                for (slot, &p) in inputs.iter().enumerate() {
                    let n = self.value(p).len();
                    if self.input_requires_grad(id, slot) {
                        self.donate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Slice { start, end } => {
                let x = inputs[0];
                let s = self.shape(x);
                let inner: usize = s[1..].iter().product();
                debug_assert_eq!(g.len(), (end - start) * inner);
                let mut dx = vec![0.0; self.value(x).len()];
                dx[start * inner..start * inner + g.len()].copy_from_slice(g);
                self.donate(grads, x, dx);
            }
            Op::Transpose => {
                let x = inputs[0];
                let s = self.shape(x);
                let dx = kernels::transpose(g, s[1], s[0]);
                self.donate(grads, x, dx);
            }
            Op::GlobalMeanPool => {
                let x = inputs[0];
                let s = self.shape(x);
                let hw = s[2] * s[3];
                let mut dx = vec![0.0; self.value(x).len()];
                for i in 0..s[0] * s[1] {
                    let gi = g[i] / hw as f64;
                    for d in &mut dx[i * hw..(i + 1) * hw] {
                        *d = gi;
                    }
                }
                self.donate(grads, x, dx);
            }
            Op::GradReverse { lambda } => {
                let dx: Vec<f64> = g.iter().map(|gi| -lambda * gi).collect();
                self.donate(grads, inputs[0], dx);
            }
        }
    }
}
