use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Clamp below which a channel fiber is treated as having zero norm.
pub const L2_NORM_EPS: f64 = 1e-10;

/// Records operations for reverse-mode differentiation.
///
/// A tape is confined to one thread. After [`Tape::backward`] the recorded
/// graph is freed; values stay readable but a second backward is an error.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    freed: Cell<bool>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, k: f64 },
    Offset { x: usize },
    Relu { x: usize },
    Gelu { x: usize },
    Sigmoid { x: usize },
    Abs { x: usize },
    Ln { x: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    Conv2d { x: usize, k: usize, b: Option<usize>, geo: ConvGeometry, batch: usize, out_channels: usize },
    MaxPool { x: usize, argmax: Vec<usize>, planes: usize, h: usize, w: usize, kernel: usize, stride: usize },
    AvgPool { x: usize, planes: usize, h: usize, w: usize, kernel: usize, stride: usize },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, inf: usize, outf: usize },
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Softmax { x: usize },
    LogSoftmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Reduce { x: usize, map: Vec<usize>, scale: f64 },
    L2Normalize { x: usize, axis: usize, norms: Vec<f64> },
    MulChannels { x: usize, w: usize },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add { a, b } | Sub { a, b } | Mul { a, b } | Bmm { a, b, .. } => vec![*a, *b],
            Scale { x, .. }
            | Offset { x }
            | Relu { x }
            | Gelu { x }
            | Sigmoid { x }
            | Abs { x }
            | Ln { x }
            | Clamp { x, .. }
            | MaxPool { x, .. }
            | AvgPool { x, .. }
            | Softmax { x }
            | LogSoftmax { x }
            | Reduce { x, .. }
            | L2Normalize { x, .. }
            | Reshape { x }
            | Permute { x, .. }
            | Narrow { x, .. } => vec![*x],
            Conv2d { x, k, b, .. } => [Some(*x), Some(*k), *b].into_iter().flatten().collect(),
            Linear { x, w, b, .. } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            LayerNorm { x, gamma, beta, .. } | BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            MulChannels { x, w } => vec![*x, *w],
            Concat { xs, .. } => xs.clone(),
        }
    }
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to the leaves that requested them.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&v.id)
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(Node { value, op: Op::Leaf, requires_grad })
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(Node { value, op, requires_grad })
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Smallest distance from any recorded input to a point where an op is not
    /// differentiable (relu/abs at 0, clamp bounds, max-pool ties).
    /// Finite-difference checks use it to reject samples that straddle a kink.
    pub fn kink_margin(&self) -> f64 {
        let nodes = self.nodes.borrow();
        let mut margin = f64::INFINITY;
        for node in nodes.iter() {
            match &node.op {
                Op::Relu { x } | Op::Abs { x } => {
                    for v in nodes[*x].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for v in nodes[*x].value.data() {
                        margin = margin.min((v - lo).abs()).min((v - hi).abs());
                    }
                }
                Op::MaxPool { x, planes, h, w, kernel, stride, .. } => {
                    let data = nodes[*x].value.data();
                    let relu_fed = matches!(nodes[*x].op, Op::Relu { .. });
                    let (ho, wo) = (kernels::pooled(*h, *kernel, *stride), kernels::pooled(*w, *kernel, *stride));
                    for p in 0..*planes {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let mut vals: Vec<f64> = Vec::with_capacity(kernel * kernel);
                                for ky in 0..*kernel {
                                    for kx in 0..*kernel {
                                        vals.push(data[p * h * w + (oy * stride + ky) * w + ox * stride + kx]);
                                    }
                                }
                                vals.sort_by(|a, b| b.total_cmp(a));
                                // a window lying entirely on a relu floor is locally
                                // constant; the relu's own margin covers leaving it
                                if relu_fed && vals[0] == 0.0 {
                                    continue;
                                }
                                if vals.len() > 1 {
                                    margin = margin.min(vals[0] - vals[1]);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// created with `requires_grad`, then frees the recorded graph.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(self, loss.tape) {
            return Err(Error::invalid("loss belongs to a different tape"));
        }
        if self.freed.get() {
            return Err(Error::GraphFreed);
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = nodes[id].op {
                out.by_id.insert(id, Tensor::from_parts(nodes[id].value.shape().to_vec(), g));
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads);
        }
        for node in nodes.iter_mut() {
            node.op = Op::Leaf;
        }
        self.freed.set(true);
        Ok(out)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contribution: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = nodes[id].value.data();
    let val = |i: usize| nodes[i].value.data();
    let mut acc = |i: usize, c: Vec<f64>| accumulate(nodes, grads, i, c);
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            acc(*a, g.to_vec());
            let blen = nodes[*b].value.numel();
            let mut gb = vec![0.0; blen];
            for (i, gi) in g.iter().enumerate() {
                gb[i % blen] += gi;
            }
            acc(*b, gb);
        }
        Op::Sub { a, b } => {
            acc(*a, g.to_vec());
            acc(*b, g.iter().map(|v| -v).collect());
        }
        Op::Mul { a, b } => {
            let (va, vb) = (val(*a), val(*b));
            acc(*a, g.iter().zip(vb).map(|(g, b)| g * b).collect());
            acc(*b, g.iter().zip(va).map(|(g, a)| g * a).collect());
        }
        Op::Scale { x, k } => acc(*x, g.iter().map(|v| v * k).collect()),
        Op::Offset { x } => acc(*x, g.to_vec()),
        Op::Relu { x } => {
            acc(*x, g.iter().zip(val(*x)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())
        }
        Op::Gelu { x } => acc(*x, g.iter().zip(val(*x)).map(|(g, &x)| g * gelu_grad(x)).collect()),
        Op::Sigmoid { x } => acc(*x, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()),
        Op::Abs { x } => acc(*x, g.iter().zip(val(*x)).map(|(g, &x)| g * sign(x)).collect()),
        Op::Ln { x } => acc(*x, g.iter().zip(val(*x)).map(|(g, x)| g / x).collect()),
        Op::Clamp { x, lo, hi } => acc(
            *x,
            g.iter()
                .zip(val(*x))
                .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                .collect(),
        ),
        Op::Conv2d { x, k, b, geo, batch, out_channels } => {
            let grads = kernels::conv2d_backward(val(*x), *batch, geo, val(*k), *out_channels, g);
            acc(*x, grads.input);
            acc(*k, grads.kernel);
            if let Some(b) = b {
                acc(*b, grads.bias);
            }
        }
        Op::MaxPool { x, argmax, .. } => {
            let mut gi = vec![0.0; nodes[*x].value.numel()];
            for (o, &src) in argmax.iter().enumerate() {
                gi[src] += g[o];
            }
            acc(*x, gi);
        }
        Op::AvgPool { x, planes, h, w, kernel, stride } => {
            acc(*x, kernels::avgpool_backward(g, *planes, *h, *w, *kernel, *stride))
        }
        Op::Linear { x, w, b, rows, inf, outf } => {
            let mut gx = vec![0.0; rows * inf];
            kernels::gemm(*rows, *outf, *inf, g, false, val(*w), false, &mut gx);
            let mut gw = vec![0.0; outf * inf];
            kernels::gemm(*outf, *rows, *inf, g, true, val(*x), false, &mut gw);
            acc(*x, gx);
            acc(*w, gw);
            if let Some(b) = b {
                let mut gb = vec![0.0; *outf];
                for r in 0..*rows {
                    for (o, gbo) in gb.iter_mut().enumerate() {
                        *gbo += g[r * outf + o];
                    }
                }
                acc(*b, gb);
            }
        }
        Op::Bmm { a, b, batch, m, k, n } => {
            let (va, vb) = (val(*a), val(*b));
            let mut ga = vec![0.0; batch * m * k];
            let mut gb = vec![0.0; batch * k * n];
            for bi in 0..*batch {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                kernels::gemm(*m, *n, *k, gs, false, &vb[bi * k * n..(bi + 1) * k * n], true, &mut ga[bi * m * k..(bi + 1) * m * k]);
                kernels::gemm(*k, *m, *n, &va[bi * m * k..(bi + 1) * m * k], true, gs, false, &mut gb[bi * k * n..(bi + 1) * k * n]);
            }
            acc(*a, ga);
            acc(*b, gb);
        }
        Op::Softmax { x } => {
            let d = *nodes[*x].value.shape().last().unwrap();
            let mut gx = vec![0.0; g.len()];
            for r in 0..g.len() / d {
                let (ys, gs) = (&out[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                for j in 0..d {
                    gx[r * d + j] = ys[j] * (gs[j] - dot);
                }
            }
            acc(*x, gx);
        }
        Op::LogSoftmax { x } => {
            let d = *nodes[*x].value.shape().last().unwrap();
            let mut gx = vec![0.0; g.len()];
            for r in 0..g.len() / d {
                let (ys, gs) = (&out[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                let total: f64 = gs.iter().sum();
                for j in 0..d {
                    gx[r * d + j] = gs[j] - ys[j].exp() * total;
                }
            }
            acc(*x, gx);
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let d = *nodes[*x].value.shape().last().unwrap();
            let gam = val(*gamma);
            let mut gx = vec![0.0; g.len()];
            let mut gg = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for r in 0..g.len() / d {
                let gs = &g[r * d..(r + 1) * d];
                let xh = &xhat[r * d..(r + 1) * d];
                let dxh: Vec<f64> = gs.iter().zip(gam).map(|(g, c)| g * c).collect();
                let sum_d: f64 = dxh.iter().sum();
                let sum_dx: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    gx[r * d + j] = inv_std[r] / d as f64 * (d as f64 * dxh[j] - sum_d - xh[j] * sum_dx);
                    gg[j] += gs[j] * xh[j];
                    gbeta[j] += gs[j];
                }
            }
            acc(*x, gx);
            acc(*gamma, gg);
            acc(*beta, gbeta);
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            let shape = nodes[*x].value.shape();
            let (n, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            let m = (n * spatial) as f64;
            let gam = val(*gamma);
            let mut gg = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * spatial;
                    for s in 0..spatial {
                        gg[ci] += g[base + s] * xhat[base + s];
                        gbeta[ci] += g[base + s];
                    }
                }
            }
            let mut gx = vec![0.0; g.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * spatial;
                    for s in 0..spatial {
                        let i = base + s;
                        gx[i] = if *train {
                            gam[ci] * inv_std[ci] / m * (m * g[i] - gbeta[ci] - xhat[i] * gg[ci])
                        } else {
                            g[i] * gam[ci] * inv_std[ci]
                        };
                    }
                }
            }
            acc(*x, gx);
            acc(*gamma, gg);
            acc(*beta, gbeta);
        }
        Op::Reduce { x, map, scale } => acc(*x, map.iter().map(|&o| g[o] * scale).collect()),
        Op::L2Normalize { x, axis, norms } => {
            let shape = nodes[*x].value.shape();
            let (len, inner) = (shape[*axis], shape[axis + 1..].iter().product::<usize>());
            let mut gx = vec![0.0; g.len()];
            for (f, &nrm) in norms.iter().enumerate() {
                let (outer, within) = (f / inner, f % inner);
                let idx = |j: usize| (outer * len + j) * inner + within;
                let raw = (0..len).map(|j| val(*x)[idx(j)].powi(2)).sum::<f64>().sqrt();
                let dot: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                for j in 0..len {
                    let i = idx(j);
                    gx[i] = if raw > L2_NORM_EPS { (g[i] - out[i] * dot) / nrm } else { g[i] / nrm };
                }
            }
            acc(*x, gx);
        }
        Op::MulChannels { x, w } => {
            let shape = nodes[*x].value.shape();
            let nd = shape.len();
            let (c, hw) = (shape[nd - 3], shape[nd - 2] * shape[nd - 1]);
            let (vx, vw) = (val(*x), val(*w));
            let mut gw = vec![0.0; c];
            let gx: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(i, gi)| {
                    let ch = (i / hw) % c;
                    gw[ch] += gi * vx[i];
                    gi * vw[ch]
                })
                .collect();
            acc(*x, gx);
            acc(*w, gw);
        }
        Op::Reshape { x } => acc(*x, g.to_vec()),
        Op::Permute { x, perm } => {
            let (gx, _) = kernels::permute(g, nodes[id].value.shape(), &kernels::inverse_permutation(perm));
            acc(*x, gx);
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = nodes[*x].value.shape();
            let len = nodes[id].value.shape()[*axis];
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let mut gx = vec![0.0; nodes[*x].value.numel()];
            for o in 0..outer {
                for j in 0..len {
                    let src = (o * len + j) * inner;
                    let dst = (o * in_shape[*axis] + start + j) * inner;
                    gx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                }
            }
            acc(*x, gx);
        }
        Op::Concat { xs, axis } => {
            let out_shape = nodes[id].value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            for &x in xs {
                let len = nodes[x].value.shape()[*axis];
                let mut gx = Vec::with_capacity(nodes[x].value.numel());
                for o in 0..outer {
                    let src = (o * total + offset) * inner;
                    gx.extend_from_slice(&g[src..src + len * inner]);
                }
                acc(x, gx);
                offset += len;
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn same_tape(a: Var<'_>, b: Var<'_>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::invalid("operands recorded on different tapes"))
    }
}

fn check_same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Maps each flat input index to its flat index after dropping `axes`.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    let out_shape: Vec<usize> =
        shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
    let kept: Vec<usize> = (0..shape.len()).filter(|i| !axes.contains(i)).collect();
    let out_strides = kernels::strides(&out_shape);
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    let mut map = Vec::with_capacity(numel(shape));
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..numel(shape) {
        map.push(kept.iter().zip(&out_strides).map(|(&ax, s)| idx[ax] * s).sum());
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (map, out_shape, count)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.tape.value(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph (stop-gradient).
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, op)
    }

    /// Elementwise sum. `other` may also be a trailing-suffix shape of `self`,
    /// in which case it is broadcast over the leading axes.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(*self, other)?;
        let (a, b) = (self.value(), other.value());
        if !a.shape().ends_with(b.shape()) {
            return Err(Error::shape(format!("add: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let blen = b.numel();
        let data = a.data().iter().enumerate().map(|(i, x)| x + b.data()[i % blen]).collect();
        Ok(self.tape.push(Tensor::from_parts(a.shape().to_vec(), data), Op::Add { a: self.id, b: other.id }))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(*self, other)?;
        let (a, b) = (self.value(), other.value());
        check_same_shape("sub", a.shape(), b.shape())?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Ok(self.tape.push(Tensor::from_parts(a.shape().to_vec(), data), Op::Sub { a: self.id, b: other.id }))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(*self, other)?;
        let (a, b) = (self.value(), other.value());
        check_same_shape("mul", a.shape(), b.shape())?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Ok(self.tape.push(Tensor::from_parts(a.shape().to_vec(), data), Op::Mul { a: self.id, b: other.id }))
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self).expect("same shape")
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        self.unary(|v| v * k, Op::Scale { x: self.id, k })
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|v| v + c, Op::Offset { x: self.id })
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|v| v.max(0.0), Op::Relu { x: self.id })
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(gelu, Op::Gelu { x: self.id })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(|v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x: self.id })
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(f64::abs, Op::Abs { x: self.id })
    }

    /// Natural log; rejects nonpositive entries.
    pub fn ln(&self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("ln of a nonpositive value".into()));
        }
        Ok(self.unary(f64::ln, Op::Ln { x: self.id }))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(|v| v.clamp(lo, hi), Op::Clamp { x: self.id, lo, hi })
    }

    /// 2-D convolution over `[N,C,H,W]` with kernel `[K,C,kh,kw]` and optional
    /// bias `[K]`; zero padding.
    pub fn conv2d(&self, kernel: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Result<Var<'t>> {
        same_tape(*self, kernel)?;
        let (x, k) = (self.value(), kernel.value());
        let (&[n, c, h, w], &[kout, kc, kh, kw]) = (x.shape(), k.shape()) else {
            return Err(Error::shape(format!(
                "conv2d expects [N,C,H,W] input and [K,C,kh,kw] kernel, got {:?} and {:?}",
                x.shape(),
                k.shape()
            )));
        };
        if c != kc {
            return Err(Error::shape(format!("conv2d: input has {c} channels but kernel expects {kc}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(format!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}+{padding}")));
        }
        let bias_val = match bias {
            Some(b) => {
                same_tape(*self, b)?;
                let bv = b.value();
                if bv.shape() != [kout] {
                    return Err(Error::shape(format!("conv2d bias {:?} for {kout} filters", bv.shape())));
                }
                Some(bv)
            }
            None => None,
        };
        let geo = ConvGeometry { channels: c, height: h, width: w, kh, kw, stride, padding };
        let data = kernels::conv2d_forward(x.data(), n, &geo, k.data(), kout, bias_val.as_ref().map(|b| b.data()));
        let out = Tensor::from_parts(vec![n, kout, geo.out_height(), geo.out_width()], data);
        Ok(self.tape.push(
            out,
            Op::Conv2d { x: self.id, k: kernel.id, b: bias.map(|b| b.id), geo, batch: n, out_channels: kout },
        ))
    }

    fn pool_dims(&self, kernel: usize, stride: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
        let shape = self.shape();
        if shape.len() < 2 || kernel == 0 || stride == 0 {
            return Err(Error::shape(format!("pool {kernel}/{stride} on {shape:?}")));
        }
        let nd = shape.len();
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        if kernel > h || kernel > w {
            return Err(Error::shape(format!("pool window {kernel} exceeds {h}x{w}")));
        }
        let planes = shape[..nd - 2].iter().product();
        let mut out_shape = shape[..nd - 2].to_vec();
        out_shape.push(kernels::pooled(h, kernel, stride));
        out_shape.push(kernels::pooled(w, kernel, stride));
        Ok((planes, h, w, out_shape))
    }

    /// Max pooling over the trailing two axes (no padding).
    pub fn maxpool2d(&self, kernel: usize, stride: usize) -> Result<Var<'t>> {
        let (planes, h, w, out_shape) = self.pool_dims(kernel, stride)?;
        let (data, argmax) = kernels::maxpool_forward(self.value().data(), planes, h, w, kernel, stride);
        Ok(self.tape.push(
            Tensor::from_parts(out_shape, data),
            Op::MaxPool { x: self.id, argmax, planes, h, w, kernel, stride },
        ))
    }

    /// Average pooling over the trailing two axes (no padding).
    pub fn avgpool2d(&self, kernel: usize, stride: usize) -> Result<Var<'t>> {
        let (planes, h, w, out_shape) = self.pool_dims(kernel, stride)?;
        let data = kernels::avgpool_forward(self.value().data(), planes, h, w, kernel, stride);
        Ok(self.tape.push(
            Tensor::from_parts(out_shape, data),
            Op::AvgPool { x: self.id, planes, h, w, kernel, stride },
        ))
    }

    /// `x · Wᵀ + b` over the last axis; `weight` is `[out, in]`.
    pub fn linear(&self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        same_tape(*self, weight)?;
        let (x, w) = (self.value(), weight.value());
        let (Some(&inf), &[outf, win]) = (x.shape().last(), w.shape()) else {
            return Err(Error::shape(format!("linear: weight must be 2-D, got {:?}", w.shape())));
        };
        if inf != win {
            return Err(Error::shape(format!("linear: input features {inf} vs weight {:?}", w.shape())));
        }
        let rows = x.numel() / inf;
        let mut data = vec![0.0; rows * outf];
        kernels::gemm(rows, inf, outf, x.data(), false, w.data(), true, &mut data);
        if let Some(b) = bias {
            same_tape(*self, b)?;
            let bv = b.value();
            if bv.shape() != [outf] {
                return Err(Error::shape(format!("linear bias {:?} for {outf} outputs", bv.shape())));
            }
            for r in 0..rows {
                for (o, bo) in bv.data().iter().enumerate() {
                    data[r * outf + o] += bo;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = outf;
        Ok(self.tape.push(
            Tensor::from_parts(shape, data),
            Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id), rows, inf, outf },
        ))
    }

    /// Batched matrix product `[B,m,k] · [B,k,n]`; 2-D operands are a batch of one.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(*self, other)?;
        let (a, b) = (self.value(), other.value());
        let (batch, m, k, k2, n) = match (a.shape(), b.shape()) {
            (&[m, k], &[k2, n]) => (1, m, k, k2, n),
            (&[ba, m, k], &[bb, k2, n]) if ba == bb => (ba, m, k, k2, n),
            (sa, sb) => return Err(Error::shape(format!("matmul: {sa:?} vs {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &a.data()[bi * m * k..(bi + 1) * m * k],
                false,
                &b.data()[bi * k * n..(bi + 1) * k * n],
                false,
                &mut data[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if a.ndim() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(self.tape.push(Tensor::from_parts(shape, data), Op::Bmm { a: self.id, b: other.id, batch, m, k, n }))
    }

    fn rows_last(&self) -> Result<(Tensor, usize)> {
        let v = self.value();
        let d = *v.shape().last().ok_or_else(|| Error::shape("operation needs at least one axis"))?;
        Ok((v, d))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let (v, d) = self.rows_last()?;
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            data.extend(e.into_iter().map(|x| x / s));
        }
        Ok(self.tape.push(Tensor::from_parts(v.shape().to_vec(), data), Op::Softmax { x: self.id }))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let (v, d) = self.rows_last()?;
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        Ok(self.tape.push(Tensor::from_parts(v.shape().to_vec(), data), Op::LogSoftmax { x: self.id }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        same_tape(*self, gamma)?;
        same_tape(*self, beta)?;
        let (v, d) = self.rows_last()?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape(format!("layer_norm affine params must be [{d}]")));
        }
        let rows = v.numel() / d;
        let mut xhat = Vec::with_capacity(v.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, x) in row.iter().enumerate() {
                let h = (x - mean) * is;
                xhat.push(h);
                data.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std },
        ))
    }

    fn batch_norm_impl(
        &self,
        gamma: Var<'t>,
        beta: Var<'t>,
        stats: Option<(&Tensor, &Tensor)>,
        eps: f64,
    ) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        same_tape(*self, gamma)?;
        same_tape(*self, beta)?;
        let v = self.value();
        let shape = v.shape();
        if shape.len() < 2 {
            return Err(Error::shape(format!("batch_norm needs [N,C,...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(format!("batch_norm affine params must be [{c}]")));
        }
        let x = v.data();
        let (mean, var) = match stats {
            Some((m, s)) => {
                if m.shape() != [c] || s.shape() != [c] {
                    return Err(Error::shape(format!("batch_norm statistics must be [{c}]")));
                }
                (m.to_vec(), s.to_vec())
            }
            None => {
                let count = (n * spatial) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        mean[ci] += x[(ni * c + ci) * spatial..][..spatial].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for ni in 0..n {
                    for ci in 0..c {
                        var[ci] += x[(ni * c + ci) * spatial..][..spatial]
                            .iter()
                            .map(|v| (v - mean[ci]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut data = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                for s in 0..spatial {
                    let h = (x[base + s] - mean[ci]) * inv_std[ci];
                    xhat[base + s] = h;
                    data[base + s] = h * gv.data()[ci] + bv.data()[ci];
                }
            }
        }
        let out = self.tape.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, train: stats.is_none() },
        );
        Ok((out, mean, var))
    }

    /// Batch normalization with stored statistics (channel axis 1).
    pub fn batch_norm_inference(
        &self,
        gamma: Var<'t>,
        beta: Var<'t>,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var<'t>> {
        self.batch_norm_impl(gamma, beta, Some((running_mean, running_var)), eps).map(|r| r.0)
    }

    /// Batch normalization with per-batch statistics. Also returns the batch
    /// mean and biased variance per channel.
    pub fn batch_norm_train(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        self.batch_norm_impl(gamma, beta, None, eps)
    }

    fn reduce(&self, axes: &[usize], mean: bool) -> Result<Var<'t>> {
        let v = self.value();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= v.ndim()) {
            return Err(Error::shape(format!("reduction over axis {bad} of a {}-D tensor", v.ndim())));
        }
        let (map, out_shape, count) = reduction_map(v.shape(), &axes);
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let mut data = vec![0.0; numel(&out_shape)];
        for (i, &o) in map.iter().enumerate() {
            data[o] += v.data()[i];
        }
        data.iter_mut().for_each(|d| *d *= scale);
        Ok(self.tape.push(Tensor::from_parts(out_shape, data), Op::Reduce { x: self.id, map, scale }))
    }

    /// Sum over `axes`, removing them.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(axes, false)
    }

    /// Mean over `axes`, removing them.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(axes, true)
    }

    pub fn sum_all(&self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(&axes, false).expect("valid axes")
    }

    pub fn mean_all(&self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(&axes, true).expect("valid axes")
    }

    /// Divide every fiber along `axis` by its Euclidean norm (clamped below by 1e-10).
    pub fn l2_normalize(&self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!("normalize over axis {axis} of {shape:?}")));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let fibers = v.numel() / len;
        let mut norms = Vec::with_capacity(fibers);
        let mut data = vec![0.0; v.numel()];
        for f in 0..fibers {
            let (outer, within) = (f / inner, f % inner);
            let idx = |j: usize| (outer * len + j) * inner + within;
            let nrm = (0..len).map(|j| v.data()[idx(j)].powi(2)).sum::<f64>().sqrt().max(L2_NORM_EPS);
            for j in 0..len {
                data[idx(j)] = v.data()[idx(j)] / nrm;
            }
            norms.push(nrm);
        }
        Ok(self.tape.push(Tensor::from_parts(shape.to_vec(), data), Op::L2Normalize { x: self.id, axis, norms }))
    }

    /// Unit-normalize each spatial position's channel fiber of a `[..,C,H,W]` map.
    pub fn l2_normalize_channels(&self) -> Result<Var<'t>> {
        let nd = self.shape().len();
        if nd < 3 {
            return Err(Error::shape(format!("channel normalization needs [..,C,H,W], got {nd}-D")));
        }
        self.l2_normalize(nd - 3)
    }

    /// Scale channel `c` of a `[..,C,H,W]` map by `w[c]`.
    pub fn mul_channels(&self, w: Var<'t>) -> Result<Var<'t>> {
        same_tape(*self, w)?;
        let (x, wv) = (self.value(), w.value());
        let nd = x.ndim();
        if nd < 3 || wv.shape() != [x.shape()[nd - 3]] {
            return Err(Error::shape(format!("channel weights {:?} for map {:?}", wv.shape(), x.shape())));
        }
        let (c, hw) = (x.shape()[nd - 3], x.shape()[nd - 2] * x.shape()[nd - 1]);
        let data = x.data().iter().enumerate().map(|(i, v)| v * wv.data()[(i / hw) % c]).collect();
        Ok(self.tape.push(Tensor::from_parts(x.shape().to_vec(), data), Op::MulChannels { x: self.id, w: w.id }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape.to_vec())?;
        Ok(self.tape.push(v, Op::Reshape { x: self.id }))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..v.ndim()).collect::<Vec<_>>() {
            return Err(Error::shape(format!("invalid permutation {perm:?} for {:?}", v.shape())));
        }
        let (data, shape) = kernels::permute(v.data(), v.shape(), perm);
        Ok(self.tape.push(Tensor::from_parts(shape, data), Op::Permute { x: self.id, perm: perm.to_vec() }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!("narrow axis {axis} [{start}, {}) of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&v.data()[src..src + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(self.tape.push(Tensor::from_parts(out_shape, data), Op::Narrow { x: self.id, axis, start }))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} of {base:?}")));
        }
        for (p, v) in parts.iter().zip(&values) {
            same_tape(*first, *p)?;
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape(format!("concat: {s:?} vs {base:?}")));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(first.tape.push(
            Tensor::from_parts(shape, data),
            Op::Concat { xs: parts.iter().map(|p| p.id).collect(), axis },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let g = tape.backward(x.sum_all()).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 4]);
    }

    #[test]
    fn sum_of_squares_gives_2x() {
        let tape = Tape::new();
        let xs = [1.0, -2.0, 3.0, 0.5];
        let x = tape.param(t(&[4], &xs));
        let g = tape.backward(x.square().sum_all()).unwrap();
        let expect: Vec<f64> = xs.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.wrt(x).data(), &expect[..]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.backward(x.relu()), Err(Error::Shape(_))));
    }

    #[test]
    fn graph_freed_after_backward() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = x.sum_all();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::GraphFreed)));
        assert_eq!(loss.item().unwrap(), 3.0);
    }

    #[test]
    fn relu_values() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_channels_fiber() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 1, 1], &[3.0, 4.0]));
        let y = x.l2_normalize_channels().unwrap().value();
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);
        let again = tape.constant(y.clone()).l2_normalize_channels().unwrap().value();
        assert!(again.max_abs_diff(&y) < 1e-15);
    }

    #[test]
    fn l2_normalize_zero_fiber_stays_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros([3, 2, 2]));
        let y = x.l2_normalize_channels().unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));
        let g = tape.backward(y.sum_all()).unwrap();
        assert!(g.wrt(x).is_finite());
    }

    #[test]
    fn reduction_over_missing_axis_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(x.sum_axes(&[2]), Err(Error::Shape(_))));
        assert_eq!(x.mean_axes(&[1]).unwrap().shape(), vec![2]);
    }

    #[test]
    fn conv_channel_mismatch_is_descriptive() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        let err = x.conv2d(k, None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]));
        let y = x.softmax().unwrap().value();
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let d = x.detach();
        let loss = x.mul(d).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        // only the non-detached factor contributes: d(x*c)/dx = c
        assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);
        assert!(g.get(d).is_none());
    }

    #[test]
    fn kink_margin_sees_relu_inputs() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.5, -0.02, 1.0]));
        let _ = x.relu();
        assert!((tape.kink_margin() - 0.02).abs() < 1e-15);
    }
}
