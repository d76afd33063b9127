//! Arena-based computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order (an op can only reference earlier
//! ids), so the backward pass is a single reverse sweep over the arena. A
//! graph is built fresh for every training batch; parameters enter as leaf
//! tensors and their gradients are read back after `backward`.

use super::conv::{self, ConvShape};
use super::scalar::{gemm_rm, Scalar};
use crate::{Error, Result};

/// Handle into the graph arena. Only valid for the graph that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

/// Per-sample slot targets and the fixed assignment used by [`Graph::slot_set_loss`].
///
/// All vectors are flattened `[n_samples * m]` in sample-major order.
/// `perm[s*m + i]` is the prediction slot matched to target slot `i` of
/// sample `s`; gradients flow only through that pairing. Coordinate targets
/// `qu`/`qv` are read only where `b == 1`.
#[derive(Debug, Clone)]
pub struct SlotTargets {
    pub m: usize,
    pub b: Vec<f64>,
    pub qu: Vec<f64>,
    pub qv: Vec<f64>,
    pub perm: Vec<usize>,
    pub lambda_b: f64,
    pub lambda_xy: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize, shape: ConvShape },
    Relu { x: usize },
    Sigmoid { x: usize },
    Add { a: usize, b: usize },
    Upsample2 { x: usize },
    GlobalAvgPool { x: usize },
    Dense { x: usize, w: usize, b: usize, batch: usize, nin: usize, nout: usize },
    ConcatChannels { a: usize, b: usize, c_a: usize, c_b: usize },
    Sum { x: usize },
    BceWithLogitsMean { x: usize, target: Vec<f64> },
    SlotSetLoss { preds: usize, targets: SlotTargets },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op });
        Tensor(self.nodes.len() - 1)
    }

    fn checked(&self, shape: &[usize], data: &[T], what: &'static str) -> Result<()> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: what,
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(())
    }

    /// Differentiable leaf (parameters).
    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>) -> Result<Tensor> {
        self.checked(shape, &data, "leaf")?;
        Ok(self.push(shape.to_vec(), data, true, Op::Leaf))
    }

    /// Non-differentiable leaf (inputs, constants, frozen activations).
    pub fn input(&mut self, shape: &[usize], data: Vec<T>) -> Result<Tensor> {
        self.checked(shape, &data, "input")?;
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn data(&self, t: Tensor) -> &[T] {
        &self.nodes[t.0].data
    }

    /// Gradient of the last `backward` call, `None` if the tensor does not
    /// require gradients.
    pub fn grad(&self, t: Tensor) -> Option<&[T]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, t: Tensor) -> T {
        debug_assert_eq!(self.nodes[t.0].data.len(), 1);
        self.nodes[t.0].data[0]
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Same-padded strided 2D convolution. `x: [n,cin,h,w]`,
    /// `w: [cout,cin,kh,kw]` (odd kernel), `b: [cout]` -> `[n,cout,oh,ow]`.
    pub fn conv2d(&mut self, x: Tensor, w: Tensor, b: Tensor, stride: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let bad = |lhs: &[usize], rhs: &[usize]| Error::ShapeMismatch {
            op: "conv2d",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(bad(&xs, &ws));
        }
        if ws[1] != xs[1] || bs[0] != ws[0] {
            return Err(bad(&xs, &ws));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "conv2d requires odd kernels and stride >= 1, got kernel {}x{} stride {stride}",
                ws[2], ws[3]
            )));
        }
        let shape = ConvShape {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
        };
        let (oh, ow) = shape.out_hw();
        let out = conv::forward(&self.nodes[x.0].data, &self.nodes[w.0].data, &self.nodes[b.0].data, &shape);
        let requires = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(
            vec![shape.n, shape.cout, oh, ow],
            out,
            requires,
            Op::Conv2d { x: x.0, w: w.0, b: b.0, shape },
        ))
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let data: Vec<T> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let requires = self.rg(&[x.0]);
        self.push(shape, data, requires, Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        let data: Vec<T> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| T::from_f64(stable_sigmoid(v.as_f64())))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let requires = self.rg(&[x.0]);
        self.push(shape, data, requires, Op::Sigmoid { x: x.0 })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&l, &r)| l + r)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let requires = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, data, requires, Op::Add { a: a.0, b: b.0 }))
    }

    /// Nearest-neighbour 2x upsampling: `[n,c,h,w] -> [n,c,2h,2w]`.
    pub fn upsample2(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Config(format!("upsample2 expects [n,c,h,w], got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::ZERO; n * c * 4 * h * w];
        for plane in 0..n * c {
            let sp = &src[plane * h * w..(plane + 1) * h * w];
            let dp = &mut data[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = sp[i * w + j];
                    let base = 2 * i * 2 * w + 2 * j;
                    dp[base] = v;
                    dp[base + 1] = v;
                    dp[base + 2 * w] = v;
                    dp[base + 2 * w + 1] = v;
                }
            }
        }
        let requires = self.rg(&[x.0]);
        Ok(self.push(vec![n, c, 2 * h, 2 * w], data, requires, Op::Upsample2 { x: x.0 }))
    }

    /// Spatial mean: `[n,c,h,w] -> [n,c]`.
    pub fn global_avg_pool(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Config(format!("global_avg_pool expects [n,c,h,w], got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::ZERO; n * c];
        for plane in 0..n * c {
            let mut acc = 0.0f64;
            for v in &src[plane * h * w..(plane + 1) * h * w] {
                acc += v.as_f64();
            }
            data[plane] = T::from_f64(acc / (h * w) as f64);
        }
        let requires = self.rg(&[x.0]);
        Ok(self.push(vec![n, c], data, requires, Op::GlobalAvgPool { x: x.0 }))
    }

    /// Fully connected layer: `x: [n,nin]`, `w: [nout,nin]`, `b: [nout]` -> `[n,nout]`.
    pub fn dense(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[1] || bs[0] != ws[0] {
            return Err(Error::ShapeMismatch { op: "dense", lhs: xs, rhs: ws });
        }
        let (batch, nin, nout) = (xs[0], xs[1], ws[0]);
        let mut data = vec![T::ZERO; batch * nout];
        gemm_rm(
            batch,
            nin,
            nout,
            T::ONE,
            &self.nodes[x.0].data,
            false,
            &self.nodes[w.0].data,
            true,
            T::ZERO,
            &mut data,
        );
        {
            let bias = &self.nodes[b.0].data;
            for row in data.chunks_exact_mut(nout) {
                for (v, bv) in row.iter_mut().zip(bias) {
                    *v = *v + *bv;
                }
            }
        }
        let requires = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(
            vec![batch, nout],
            data,
            requires,
            Op::Dense { x: x.0, w: w.0, b: b.0, batch, nin, nout },
        ))
    }

    /// Channel concatenation of two `[n,c,h,w]` tensors with matching n/h/w.
    pub fn concat_channels(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(Error::ShapeMismatch { op: "concat_channels", lhs: sa, rhs: sb });
        }
        let (n, c_a, c_b, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let plane = h * w;
        let mut data = vec![T::ZERO; n * (c_a + c_b) * plane];
        for ni in 0..n {
            let dst = &mut data[ni * (c_a + c_b) * plane..(ni + 1) * (c_a + c_b) * plane];
            dst[..c_a * plane]
                .copy_from_slice(&self.nodes[a.0].data[ni * c_a * plane..(ni + 1) * c_a * plane]);
            dst[c_a * plane..]
                .copy_from_slice(&self.nodes[b.0].data[ni * c_b * plane..(ni + 1) * c_b * plane]);
        }
        let requires = self.rg(&[a.0, b.0]);
        Ok(self.push(
            vec![n, c_a + c_b, h, w],
            data,
            requires,
            Op::ConcatChannels { a: a.0, b: b.0, c_a, c_b },
        ))
    }

    /// Sum of all elements -> `[1]`.
    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let mut acc = 0.0f64;
        for v in &self.nodes[x.0].data {
            acc += v.as_f64();
        }
        let requires = self.rg(&[x.0]);
        self.push(vec![1], vec![T::from_f64(acc)], requires, Op::Sum { x: x.0 })
    }

    /// Mean binary cross-entropy on logits: numerically stable
    /// `mean(max(x,0) - x*t + ln(1 + exp(-|x|)))` -> `[1]`.
    pub fn bce_with_logits_mean(&mut self, x: Tensor, target: &[f64]) -> Result<Tensor> {
        let n = self.nodes[x.0].data.len();
        if target.len() != n {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits_mean",
                lhs: self.shape(x).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let mut acc = 0.0f64;
        for (v, &t) in self.nodes[x.0].data.iter().zip(target) {
            let xv = v.as_f64();
            acc += xv.max(0.0) - xv * t + (-xv.abs()).exp().ln_1p();
        }
        let requires = self.rg(&[x.0]);
        Ok(self.push(
            vec![1],
            vec![T::from_f64(acc / n as f64)],
            requires,
            Op::BceWithLogitsMean { x: x.0, target: target.to_vec() },
        ))
    }

    /// Slot-set regression loss under a fixed per-sample assignment:
    ///
    /// `L = mean over (sample, target slot) of
    ///      lambda_b * bce(b, clamp(b_hat)) + lambda_xy * b * ((qu-u_hat)^2 + (qv-v_hat)^2)`
    ///
    /// `preds: [n, 3m]` laid out `(b_hat, u_hat, v_hat)` per slot. The
    /// assignment in `targets.perm` is treated as a constant, so gradients
    /// flow only through the matched prediction slots.
    pub fn slot_set_loss(&mut self, preds: Tensor, targets: SlotTargets) -> Result<Tensor> {
        let s = self.shape(preds).to_vec();
        let m = targets.m;
        if s.len() != 2 || m == 0 || s[1] != 3 * m {
            return Err(Error::ShapeMismatch {
                op: "slot_set_loss",
                lhs: s,
                rhs: vec![3 * m],
            });
        }
        let n = s[0];
        if targets.b.len() != n * m
            || targets.qu.len() != n * m
            || targets.qv.len() != n * m
            || targets.perm.len() != n * m
        {
            return Err(Error::Config(format!(
                "slot_set_loss target arrays must all have length {} (n={n}, m={m}), got b={} qu={} qv={} perm={}",
                n * m,
                targets.b.len(),
                targets.qu.len(),
                targets.qv.len(),
                targets.perm.len()
            )));
        }
        for s_idx in 0..n {
            let perm = &targets.perm[s_idx * m..(s_idx + 1) * m];
            let mut seen = vec![false; m];
            for &p in perm {
                if p >= m || seen[p] {
                    return Err(Error::Config(format!(
                        "slot_set_loss: sample {s_idx} assignment {perm:?} is not a permutation of 0..{m}"
                    )));
                }
                seen[p] = true;
            }
        }
        let data = &self.nodes[preds.0].data;
        let mut acc = 0.0f64;
        for si in 0..n {
            for ti in 0..m {
                let flat = si * m + ti;
                let pj = targets.perm[flat];
                let b_hat = data[si * 3 * m + 3 * pj].as_f64();
                let p = b_hat.clamp(targets.eps, 1.0 - targets.eps);
                let b = targets.b[flat];
                acc += targets.lambda_b * -(b * p.ln() + (1.0 - b) * (1.0 - p).ln());
                if b != 0.0 {
                    let du = targets.qu[flat] - data[si * 3 * m + 3 * pj + 1].as_f64();
                    let dv = targets.qv[flat] - data[si * 3 * m + 3 * pj + 2].as_f64();
                    acc += targets.lambda_xy * b * (du * du + dv * dv);
                }
            }
        }
        let requires = self.rg(&[preds.0]);
        Ok(self.push(
            vec![1],
            vec![T::from_f64(acc / (n * m) as f64)],
            requires,
            Op::SlotSetLoss { preds: preds.0, targets },
        ))
    }

    /// Reverse sweep from `loss` (a `[1]` tensor). Fills `grad` for every
    /// tensor with `requires_grad`; tensors the sweep never reaches get zero
    /// gradients so callers can read them unconditionally.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.nodes[loss.0].shape != [1] {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let contribs = self.parent_contributions(id);
            for (pid, contrib) in contribs {
                let p = &mut self.nodes[pid];
                let len = p.data.len();
                let g = p.grad.get_or_insert_with(|| vec![T::ZERO; len]);
                for (gv, cv) in g.iter_mut().zip(&contrib) {
                    *gv = *gv + *cv;
                }
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![T::ZERO; node.data.len()]);
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `id` to each of its differentiable
    /// parents. Pure read; accumulation happens in `backward`.
    fn parent_contributions(&self, id: usize) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[id];
        let g = node.grad.as_deref().expect("grad present");
        let needs = |pid: usize| self.nodes[pid].requires_grad;
        let mut out: Vec<(usize, Vec<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, shape } => {
                let mut dx = needs(*x).then(|| vec![T::ZERO; self.nodes[*x].data.len()]);
                let mut dw = needs(*w).then(|| vec![T::ZERO; self.nodes[*w].data.len()]);
                let mut db = needs(*b).then(|| vec![T::ZERO; self.nodes[*b].data.len()]);
                conv::backward(
                    &self.nodes[*x].data,
                    &self.nodes[*w].data,
                    g,
                    shape,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    out.push((*x, d));
                }
                if let Some(d) = dw {
                    out.push((*w, d));
                }
                if let Some(d) = db {
                    out.push((*b, d));
                }
            }
            Op::Relu { x } => {
                if needs(*x) {
                    let d: Vec<T> = self.nodes[*x]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&xv, &gv)| if xv > T::ZERO { gv } else { T::ZERO })
                        .collect();
                    out.push((*x, d));
                }
            }
            Op::Sigmoid { x } => {
                if needs(*x) {
                    let d: Vec<T> = node
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&yv, &gv)| {
                            let y = yv.as_f64();
                            T::from_f64(gv.as_f64() * y * (1.0 - y))
                        })
                        .collect();
                    out.push((*x, d));
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Upsample2 { x } => {
                if needs(*x) {
                    let s = &self.nodes[*x].shape;
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let mut d = vec![T::ZERO; n * c * h * w];
                    for plane in 0..n * c {
                        let gp = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let dp = &mut d[plane * h * w..(plane + 1) * h * w];
                        for i in 0..h {
                            for j in 0..w {
                                let base = 2 * i * 2 * w + 2 * j;
                                let s4 = gp[base].as_f64()
                                    + gp[base + 1].as_f64()
                                    + gp[base + 2 * w].as_f64()
                                    + gp[base + 2 * w + 1].as_f64();
                                dp[i * w + j] = T::from_f64(s4);
                            }
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::GlobalAvgPool { x } => {
                if needs(*x) {
                    let s = &self.nodes[*x].shape;
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let inv = 1.0 / (h * w) as f64;
                    let mut d = vec![T::ZERO; n * c * h * w];
                    for plane in 0..n * c {
                        let gv = T::from_f64(g[plane].as_f64() * inv);
                        d[plane * h * w..(plane + 1) * h * w].fill(gv);
                    }
                    out.push((*x, d));
                }
            }
            Op::Dense { x, w, b, batch, nin, nout } => {
                if needs(*x) {
                    // dX[batch, nin] = g[batch, nout] * W[nout, nin]
                    let mut d = vec![T::ZERO; batch * nin];
                    gemm_rm(*batch, *nout, *nin, T::ONE, g, false, &self.nodes[*w].data, false, T::ZERO, &mut d);
                    out.push((*x, d));
                }
                if needs(*w) {
                    // dW[nout, nin] = g^T[nout, batch] * X[batch, nin]
                    let mut d = vec![T::ZERO; nout * nin];
                    gemm_rm(*nout, *batch, *nin, T::ONE, g, true, &self.nodes[*x].data, false, T::ZERO, &mut d);
                    out.push((*w, d));
                }
                if needs(*b) {
                    let mut d = vec![T::ZERO; *nout];
                    for row in g.chunks_exact(*nout) {
                        for (dv, gv) in d.iter_mut().zip(row) {
                            *dv = *dv + *gv;
                        }
                    }
                    out.push((*b, d));
                }
            }
            Op::ConcatChannels { a, b, c_a, c_b } => {
                let s = &node.shape;
                let (n, h, w) = (s[0], s[2], s[3]);
                let plane = h * w;
                if needs(*a) {
                    let mut d = vec![T::ZERO; n * c_a * plane];
                    for ni in 0..n {
                        d[ni * c_a * plane..(ni + 1) * c_a * plane].copy_from_slice(
                            &g[ni * (c_a + c_b) * plane..ni * (c_a + c_b) * plane + c_a * plane],
                        );
                    }
                    out.push((*a, d));
                }
                if needs(*b) {
                    let mut d = vec![T::ZERO; n * c_b * plane];
                    for ni in 0..n {
                        let start = ni * (c_a + c_b) * plane + c_a * plane;
                        d[ni * c_b * plane..(ni + 1) * c_b * plane]
                            .copy_from_slice(&g[start..start + c_b * plane]);
                    }
                    out.push((*b, d));
                }
            }
            Op::Sum { x } => {
                if needs(*x) {
                    out.push((*x, vec![g[0]; self.nodes[*x].data.len()]));
                }
            }
            Op::BceWithLogitsMean { x, target } => {
                if needs(*x) {
                    let scale = g[0].as_f64() / target.len() as f64;
                    let d: Vec<T> = self.nodes[*x]
                        .data
                        .iter()
                        .zip(target)
                        .map(|(&xv, &t)| {
                            T::from_f64(scale * (stable_sigmoid(xv.as_f64()) - t))
                        })
                        .collect();
                    out.push((*x, d));
                }
            }
            Op::SlotSetLoss { preds, targets } => {
                if needs(*preds) {
                    let data = &self.nodes[*preds].data;
                    let m = targets.m;
                    let n = data.len() / (3 * m);
                    let scale = g[0].as_f64() / (n * m) as f64;
                    let mut d = vec![T::ZERO; data.len()];
                    for si in 0..n {
                        for ti in 0..m {
                            let flat = si * m + ti;
                            let pj = targets.perm[flat];
                            let base = si * 3 * m + 3 * pj;
                            let b_hat = data[base].as_f64();
                            let b = targets.b[flat];
                            // Clamped BCE: zero slope outside [eps, 1-eps].
                            if b_hat > targets.eps && b_hat < 1.0 - targets.eps {
                                let db = targets.lambda_b * (b_hat - b) / (b_hat * (1.0 - b_hat));
                                d[base] = T::from_f64(d[base].as_f64() + scale * db);
                            }
                            if b != 0.0 {
                                let du = data[base + 1].as_f64() - targets.qu[flat];
                                let dv = data[base + 2].as_f64() - targets.qv[flat];
                                let c = scale * targets.lambda_xy * b * 2.0;
                                d[base + 1] = T::from_f64(d[base + 1].as_f64() + c * du);
                                d[base + 2] = T::from_f64(d[base + 2].as_f64() + c * dv);
                            }
                        }
                    }
                    out.push((*preds, d));
                }
            }
        }
        out
    }
}
