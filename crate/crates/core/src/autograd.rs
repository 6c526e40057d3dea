//! Reverse-mode differentiation on a linear tape.
//!
//! Every op computes its value eagerly. When the tape is recording and at
//! least one input is tracked, the op is appended together with whatever it
//! needs for its adjoint. `backward` walks the tape in exact reverse order.
//! A non-recording tape (`Tape::no_grad`) keeps nothing, so inference
//! memory is bounded by the live `Var`s.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{Param, ParamId};
use crate::tensor::{self, gemm, Tensor};

/// A value flowing through the tape, optionally tied to a tape node.
#[derive(Clone, Debug)]
pub struct Var {
    value: Tensor,
    node: Option<usize>,
}

impl Var {
    /// An untracked value; no gradient flows into it.
    pub fn constant(value: Tensor) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }
}

type In = (Option<usize>, Tensor);

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: In,
        b: In,
    },
    Linear {
        x: In,
        w: In,
        b: Option<usize>,
    },
    Add {
        a: Option<usize>,
        b: Option<usize>,
        b_numel: usize,
    },
    Mul {
        a: In,
        b: In,
    },
    Affine {
        x: Option<usize>,
        scale: f64,
    },
    ScaleRows {
        x: Option<usize>,
        factors: Vec<f64>,
    },
    Sigmoid {
        x: Option<usize>,
        out: Tensor,
    },
    Tanh {
        x: Option<usize>,
        out: Tensor,
    },
    Gelu {
        x: In,
    },
    LayerNorm {
        x: Option<usize>,
        gamma: In,
        beta: Option<usize>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        a: Option<usize>,
        b: Option<usize>,
        split: usize,
    },
    Slice {
        x: Option<usize>,
        start: usize,
        width: usize,
    },
    Permute {
        x: Option<usize>,
        axes: Vec<usize>,
    },
    Reshape {
        x: Option<usize>,
    },
    Select {
        x: Option<usize>,
        axis: usize,
        index: usize,
        shape: Vec<usize>,
    },
    Stack {
        parts: Vec<Option<usize>>,
        axis: usize,
    },
    MeanAxis {
        x: Option<usize>,
        axis: usize,
        shape: Vec<usize>,
    },
    Sum {
        x: Option<usize>,
    },
    CrossEntropy {
        logits: Option<usize>,
        residual: Vec<f64>,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that never records; ops only compute values.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded ops.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: &Tensor, op: Op) -> usize {
        self.nodes.push(Node {
            op,
            shape: value.shape().to_vec(),
        });
        self.nodes.len() - 1
    }

    fn record(&mut self, value: Tensor, inputs: &[Option<usize>], op: impl FnOnce() -> Op) -> Var {
        let node = if self.recording && inputs.iter().any(Option::is_some) {
            Some(self.push(&value, op()))
        } else {
            None
        };
        Var { value, node }
    }

    /// A leaf whose gradient can be read back with [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        let node = self.recording.then(|| self.push(&value, Op::Leaf { param: None }));
        Var { value, node }
    }

    pub fn param(&mut self, p: &Param) -> Var {
        let value = p.value.clone();
        let node = self
            .recording
            .then(|| self.push(&value, Op::Leaf { param: Some(p.id()) }));
        Var { value, node }
    }

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = tensor::matmul(&a.value, &b.value)?;
        Ok(self.record(value, &[a.node, b.node], || Op::MatMul {
            a: (a.node, a.value.clone()),
            b: (b.node, b.value.clone()),
        }))
    }

    pub fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let value = tensor::linear(&x.value, &w.value, b.map(|b| &b.value))?;
        let b_node = b.and_then(|b| b.node);
        Ok(self.record(value, &[x.node, w.node, b_node], || Op::Linear {
            x: (x.node, x.value.clone()),
            w: (w.node, w.value.clone()),
            b: b_node,
        }))
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = tensor::add(&a.value, &b.value)?;
        Ok(self.record(value, &[a.node, b.node], || Op::Add {
            a: a.node,
            b: b.node,
            b_numel: b.value.numel(),
        }))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = tensor::hadamard(&a.value, &b.value)?;
        Ok(self.record(value, &[a.node, b.node], || Op::Mul {
            a: (a.node, a.value.clone()),
            b: (b.node, b.value.clone()),
        }))
    }

    /// `scale·x + offset`, elementwise.
    pub fn affine(&mut self, x: &Var, scale: f64, offset: f64) -> Var {
        let value = x.value.map(|v| scale * v + offset);
        self.record(value, &[x.node], || Op::Affine { x: x.node, scale })
    }

    /// Multiplies the `i`-th slice along axis 0 by `factors[i]`.
    pub fn scale_rows(&mut self, x: &Var, factors: &[f64]) -> Result<Var> {
        if x.value.rank() == 0 || x.shape()[0] != factors.len() {
            return Err(Error::InvalidShape {
                op: "scale_rows",
                detail: format!("{} factors for shape {:?}", factors.len(), x.shape()),
            });
        }
        let inner = x.value.numel() / factors.len();
        let mut data = x.value.to_vec();
        for (chunk, &f) in data.chunks_exact_mut(inner).zip(factors) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.record(value, &[x.node], || Op::ScaleRows {
            x: x.node,
            factors: factors.to_vec(),
        }))
    }

    pub fn sigmoid(&mut self, x: &Var) -> Var {
        let value = tensor::sigmoid(&x.value);
        let out = value.clone();
        self.record(value, &[x.node], || Op::Sigmoid { x: x.node, out })
    }

    pub fn tanh(&mut self, x: &Var) -> Var {
        let value = tensor::tanh_act(&x.value);
        let out = value.clone();
        self.record(value, &[x.node], || Op::Tanh { x: x.node, out })
    }

    pub fn gelu(&mut self, x: &Var) -> Var {
        let value = tensor::gelu(&x.value);
        self.record(value, &[x.node], || Op::Gelu {
            x: (x.node, x.value.clone()),
        })
    }

    pub fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        tensor::check_norm_params(&x.value, &gamma.value, &beta.value)?;
        let (xhat, rstd) = tensor::layer_norm_parts(&x.value, eps);
        let mut out = xhat.clone();
        tensor::apply_affine(&mut out, &gamma.value, &beta.value);
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.record(value, &[x.node, gamma.node, beta.node], || Op::LayerNorm {
            x: x.node,
            gamma: (gamma.node, gamma.value.clone()),
            beta: beta.node,
            xhat,
            rstd,
        }))
    }

    pub fn concat_last(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = tensor::concat_last(&a.value, &b.value)?;
        Ok(self.record(value, &[a.node, b.node], || Op::Concat {
            a: a.node,
            b: b.node,
            split: a.value.last_dim(),
        }))
    }

    pub fn slice_last(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let value = tensor::slice_last(&x.value, start, len)?;
        Ok(self.record(value, &[x.node], || Op::Slice {
            x: x.node,
            start,
            width: x.value.last_dim(),
        }))
    }

    pub fn permute(&mut self, x: &Var, axes: &[usize]) -> Result<Var> {
        let value = tensor::permute(&x.value, axes)?;
        Ok(self.record(value, &[x.node], || Op::Permute {
            x: x.node,
            axes: tensor::inverse_axes(axes),
        }))
    }

    pub fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let value = x.value.reshape(shape)?;
        Ok(self.record(value, &[x.node], || Op::Reshape { x: x.node }))
    }

    pub fn select(&mut self, x: &Var, axis: usize, index: usize) -> Result<Var> {
        let value = tensor::select(&x.value, axis, index)?;
        Ok(self.record(value, &[x.node], || Op::Select {
            x: x.node,
            axis,
            index,
            shape: x.shape().to_vec(),
        }))
    }

    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| &p.value).collect();
        let value = tensor::stack(&values, axis)?;
        let nodes: Vec<Option<usize>> = parts.iter().map(|p| p.node).collect();
        Ok(self.record(value, &nodes, || Op::Stack {
            parts: nodes.clone(),
            axis,
        }))
    }

    pub fn mean_axis(&mut self, x: &Var, axis: usize) -> Result<Var> {
        let value = tensor::mean_axis(&x.value, axis)?;
        Ok(self.record(value, &[x.node], || Op::MeanAxis {
            x: x.node,
            axis,
            shape: x.shape().to_vec(),
        }))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: &Var) -> Var {
        let value = Tensor::scalar(tensor::sum_all(&x.value));
        self.record(value, &[x.node], || Op::Sum { x: x.node })
    }

    /// `Σ x ⊙ weights` for a constant weight tensor, as a rank-0 tensor.
    pub fn weighted_sum(&mut self, x: &Var, weights: &Tensor) -> Result<Var> {
        let w = Var::constant(weights.clone());
        let prod = self.mul(x, &w)?;
        Ok(self.sum(&prod))
    }

    /// Batch-mean cross-entropy against label-smoothed targets
    /// `q = (1 − smoothing)·onehot + smoothing/K`.
    pub fn cross_entropy(&mut self, logits: &Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let (loss, residual) = smoothed_xent(&logits.value, labels, smoothing)?;
        Ok(self.record(Tensor::scalar(loss), &[logits.node], || Op::CrossEntropy {
            logits: logits.node,
            residual,
        }))
    }

    /// Gradients of a scalar `output` with respect to every tracked leaf.
    pub fn backward(&self, output: &Var) -> Result<Gradients> {
        if output.value.numel() != 1 {
            return Err(Error::NonScalar(output.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut params = BTreeMap::new();
        let Some(root) = output.node else {
            return Ok(Gradients { grads, params });
        };
        grads[root] = Some(Tensor::ones(&self.nodes[root].shape));

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if let Op::Leaf { param } = node.op {
                if let (Some(id), Some(g)) = (param, &grads[i]) {
                    accumulate_param(&mut params, id, g);
                }
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.adjoint(&node.op, &g, &mut grads);
        }
        Ok(Gradients { grads, params })
    }

    fn adjoint(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (m, k, n) = (a.1.shape()[0], a.1.shape()[1], b.1.shape()[1]);
                if let Some(na) = a.0 {
                    let buf = self.grad_buf(grads, na);
                    gemm(m, n, k, gd, false, b.1.data(), true, buf, true);
                }
                if let Some(nb) = b.0 {
                    let buf = self.grad_buf(grads, nb);
                    gemm(k, m, n, a.1.data(), true, gd, false, buf, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (out_dim, in_dim) = (w.1.shape()[0], w.1.shape()[1]);
                let rows = x.1.rows();
                if let Some(nx) = x.0 {
                    let buf = self.grad_buf(grads, nx);
                    gemm(rows, out_dim, in_dim, gd, false, w.1.data(), false, buf, true);
                }
                if let Some(nw) = w.0 {
                    let buf = self.grad_buf(grads, nw);
                    gemm(out_dim, rows, in_dim, gd, true, x.1.data(), false, buf, true);
                }
                if let Some(nb) = *b {
                    let buf = self.grad_buf(grads, nb);
                    for row in gd.chunks_exact(out_dim) {
                        add_into(buf, row);
                    }
                }
            }
            Op::Add { a, b, b_numel } => {
                if let Some(na) = *a {
                    add_into(self.grad_buf(grads, na), gd);
                }
                if let Some(nb) = *b {
                    let buf = self.grad_buf(grads, nb);
                    for chunk in gd.chunks_exact(*b_numel) {
                        add_into(buf, chunk);
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(na) = a.0 {
                    let buf = self.grad_buf(grads, na);
                    for ((o, &gv), &bv) in buf.iter_mut().zip(gd).zip(b.1.data()) {
                        *o += gv * bv;
                    }
                }
                if let Some(nb) = b.0 {
                    let buf = self.grad_buf(grads, nb);
                    for ((o, &gv), &av) in buf.iter_mut().zip(gd).zip(a.1.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(nx) = *x {
                    for (o, &gv) in self.grad_buf(grads, nx).iter_mut().zip(gd) {
                        *o += gv * scale;
                    }
                }
            }
            Op::ScaleRows { x, factors } => {
                if let Some(nx) = *x {
                    let inner = gd.len() / factors.len();
                    let buf = self.grad_buf(grads, nx);
                    for ((dst, src), &f) in buf.chunks_exact_mut(inner).zip(gd.chunks_exact(inner)).zip(factors) {
                        for (o, &gv) in dst.iter_mut().zip(src) {
                            *o += gv * f;
                        }
                    }
                }
            }
            Op::Sigmoid { x, out } => {
                if let Some(nx) = *x {
                    let buf = self.grad_buf(grads, nx);
                    for ((o, &gv), &y) in buf.iter_mut().zip(gd).zip(out.data()) {
                        *o += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh { x, out } => {
                if let Some(nx) = *x {
                    let buf = self.grad_buf(grads, nx);
                    for ((o, &gv), &y) in buf.iter_mut().zip(gd).zip(out.data()) {
                        *o += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Gelu { x } => {
                if let Some(nx) = x.0 {
                    let buf = self.grad_buf(grads, nx);
                    for ((o, &gv), &v) in buf.iter_mut().zip(gd).zip(x.1.data()) {
                        *o += gv * (tensor::normal_cdf(v) + v * tensor::normal_pdf(v));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = gamma.1.numel();
                if let Some(ng) = gamma.0 {
                    let buf = self.grad_buf(grads, ng);
                    for (grow, xrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((o, &gv), &xv) in buf.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xv;
                        }
                    }
                }
                if let Some(nb) = *beta {
                    let buf = self.grad_buf(grads, nb);
                    for grow in gd.chunks_exact(c) {
                        add_into(buf, grow);
                    }
                }
                if let Some(nx) = *x {
                    let buf = self.grad_buf(grads, nx);
                    let mut dxhat = vec![0.0; c];
                    for (((dst, grow), xrow), &r) in buf
                        .chunks_exact_mut(c)
                        .zip(gd.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                        .zip(rstd)
                    {
                        for ((d, &gv), &gm) in dxhat.iter_mut().zip(grow).zip(gamma.1.data()) {
                            *d = gv * gm;
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat.iter().zip(xrow).map(|(d, x)| d * x).sum::<f64>() / c as f64;
                        for ((o, &d), &xv) in dst.iter_mut().zip(&dxhat).zip(xrow) {
                            *o += r * (d - mean_d - xv * mean_dx);
                        }
                    }
                }
            }
            Op::Concat { a, b, split } => {
                let width = g.last_dim();
                let rest = width - split;
                if let Some(na) = *a {
                    let buf = self.grad_buf(grads, na);
                    for (dst, src) in buf.chunks_exact_mut(*split).zip(gd.chunks_exact(width)) {
                        add_into(dst, &src[..*split]);
                    }
                }
                if let Some(nb) = *b {
                    let buf = self.grad_buf(grads, nb);
                    for (dst, src) in buf.chunks_exact_mut(rest).zip(gd.chunks_exact(width)) {
                        add_into(dst, &src[*split..]);
                    }
                }
            }
            Op::Slice { x, start, width } => {
                if let Some(nx) = *x {
                    let len = g.last_dim();
                    let buf = self.grad_buf(grads, nx);
                    for (dst, src) in buf.chunks_exact_mut(*width).zip(gd.chunks_exact(len)) {
                        add_into(&mut dst[*start..start + len], src);
                    }
                }
            }
            Op::Permute { x, axes } => {
                if let Some(nx) = *x {
                    let back = tensor::permute(g, axes).expect("inverse permutation");
                    add_into(self.grad_buf(grads, nx), back.data());
                }
            }
            Op::Reshape { x } => {
                if let Some(nx) = *x {
                    add_into(self.grad_buf(grads, nx), gd);
                }
            }
            Op::Select { x, axis, index, shape } => {
                if let Some(nx) = *x {
                    let inner: usize = shape[axis + 1..].iter().product();
                    let extent = shape[*axis];
                    let buf = self.grad_buf(grads, nx);
                    for (o, src) in gd.chunks_exact(inner).enumerate() {
                        let start = (o * extent + index) * inner;
                        add_into(&mut buf[start..start + inner], src);
                    }
                }
            }
            Op::Stack { parts, axis } => {
                let count = parts.len();
                let inner: usize = g.shape()[axis + 1..].iter().product();
                for (j, part) in parts.iter().enumerate() {
                    if let Some(np) = *part {
                        let buf = self.grad_buf(grads, np);
                        for (o, dst) in buf.chunks_exact_mut(inner).enumerate() {
                            let start = (o * count + j) * inner;
                            add_into(dst, &gd[start..start + inner]);
                        }
                    }
                }
            }
            Op::MeanAxis { x, axis, shape } => {
                if let Some(nx) = *x {
                    let inner: usize = shape[axis + 1..].iter().product();
                    let extent = shape[*axis];
                    let scale = 1.0 / extent as f64;
                    let buf = self.grad_buf(grads, nx);
                    for (o, src) in gd.chunks_exact(inner).enumerate() {
                        for e in 0..extent {
                            let start = (o * extent + e) * inner;
                            for (d, &gv) in buf[start..start + inner].iter_mut().zip(src) {
                                *d += gv * scale;
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(nx) = *x {
                    let gv = g.item();
                    self.grad_buf(grads, nx).iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::CrossEntropy { logits, residual } => {
                if let Some(nl) = *logits {
                    let gv = g.item();
                    for (o, &r) in self.grad_buf(grads, nl).iter_mut().zip(residual) {
                        *o += gv * r;
                    }
                }
            }
        }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Tensor>], node: usize) -> &'a mut [f64] {
        grads[node]
            .get_or_insert_with(|| Tensor::zeros(&self.nodes[node].shape))
            .data_mut()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate_param(params: &mut BTreeMap<ParamId, Tensor>, id: ParamId, g: &Tensor) {
    match params.get_mut(&id) {
        Some(acc) => add_into(acc.data_mut(), g.data()),
        None => {
            params.insert(id, g.clone());
        }
    }
}

/// Loss value and `∂loss/∂logits` for the smoothed cross-entropy.
pub(crate) fn smoothed_xent(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<(f64, Vec<f64>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::InvalidShape {
            op: "cross_entropy",
            detail: format!("logits {:?} with {} labels", logits.shape(), labels.len()),
        });
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    let off = smoothing / classes as f64;
    let mut per_sample = Vec::with_capacity(batch);
    let mut residual = Vec::with_capacity(logits.numel());
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<f64> = row.iter().map(|v| v - max).collect();
        let sum_exp: f64 = shifted.iter().map(|v| v.exp()).sum();
        let lse = sum_exp.ln();
        // −Σ q·log p = lse − Σ q·z (with Σ q = 1) on max-shifted logits
        let target = |k: usize| if k == label { 1.0 - smoothing + off } else { off };
        let qz: f64 = shifted.iter().enumerate().map(|(k, z)| target(k) * z).sum();
        per_sample.push(lse - qz);
        for (k, z) in shifted.iter().enumerate() {
            residual.push((z.exp() / sum_exp - target(k)) / batch as f64);
        }
    }
    Ok((tensor::shifted_mean(&per_sample), residual))
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf created by [`Tape::input`] or [`Tape::param`].
    /// Leaves that the output does not depend on get zeros.
    pub fn wrt(&self, v: &Var) -> Option<Tensor> {
        let node = v.node?;
        Some(self.grads[node].clone().unwrap_or_else(|| Tensor::zeros(v.shape())))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }
}
