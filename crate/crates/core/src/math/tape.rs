//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles together
//! with whatever intermediates the reverse pass needs. Leaves created with
//! [`Tape::leaf`] receive gradients; leaves created with [`Tape::constant`]
//! do not, and nothing downstream of constants-only is differentiated.
//!
//! Broadcasting is limited to trailing-shape addition ([`Var::add_trailing`],
//! a bias or positional table repeated over leading axes) and the explicit
//! [`Var::expand_axis`]. Everything else requires identical shapes.

use std::cell::{Cell, RefCell};

use super::kernels::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Variance stabilizer inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Primitive-op and flop counters accumulated by a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpStats {
    pub forward_ops: u64,
    pub forward_flops: u64,
    pub backward_ops: u64,
    pub backward_flops: u64,
}

impl OpStats {
    pub fn total_flops(&self) -> u64 {
        self.forward_flops + self.backward_flops
    }

    pub fn merge(&mut self, other: &OpStats) {
        self.forward_ops += other.forward_ops;
        self.forward_flops += other.forward_flops;
        self.backward_ops += other.backward_ops;
        self.backward_flops += other.backward_flops;
    }
}

enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddTrailing(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Abs(usize),
    Tanh(usize),
    Gelu { x: usize, tanh: Vec<f64> },
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Softmax(usize),
    LogSoftmax(usize),
    TransposeLast2(usize),
    Reshape(usize),
    ExpandAxis { x: usize, axis: usize, n: usize },
    Concat(Vec<usize>),
    SliceLast { x: usize, start: usize },
    Gather { table: usize, idx: Vec<usize> },
    Pick { x: usize, idx: Vec<usize> },
    SumAll(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer record of one forward computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    stats: Cell<OpStats>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the leaf was a constant or unused.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf with zeros substituted for "not reached".
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.shape()),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(256)),
            stats: Cell::new(OpStats::default()),
        }
    }

    pub fn stats(&self) -> OpStats {
        self.stats.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input treated as a constant by the reverse pass.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Constant, false)
    }

    /// Sinusoidal embedding of one scalar per batch row, recorded as a
    /// constant `[times.len(), dim]`. Frequencies are log-spaced over
    /// `[1, 1e4]`; the first half of each row holds sines, the second
    /// half cosines (odd `dim` leaves a trailing zero).
    pub fn sinusoidal(&self, times: &[f64], dim: usize) -> Var<'_> {
        let value = sinusoidal_embedding(times, dim);
        self.count_forward(value.len() as u64 * 4);
        self.push_raw(value, Op::Constant, false)
    }

    /// Concatenates along the trailing axis; leading shapes must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].rank() - 1];
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            if v.rank() == 0 || &v.shape()[..v.rank() - 1] != lead {
                return Err(Error::shape(
                    "concat",
                    format!("leading shape {:?} vs {:?}", lead, v.shape()),
                ));
            }
            widths.push(v.last_dim());
        }
        let total: usize = widths.iter().sum();
        let rows = values[0].len() / widths[0].max(1);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push("concat", Tensor::new(shape, out)?, Op::Concat(ids.clone()), &ids, 0)
    }

    fn count_forward(&self, flops: u64) {
        let mut s = self.stats.get();
        s.forward_ops += 1;
        s.forward_flops += flops;
        self.stats.set(s);
    }

    fn count_backward(&self, flops: u64) {
        let mut s = self.stats.get();
        s.backward_ops += 1;
        s.backward_flops += flops;
        self.stats.set(s);
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(
        &self,
        name: &'static str,
        value: Tensor,
        op: Op,
        parents: &[usize],
        flops: u64,
    ) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.count_forward(flops);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass: gradients of `<cotangent, output>` with respect to every
    /// differentiable leaf.
    pub fn backward(&self, output: Var<'_>, cotangent: &Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.shape() != cotangent.shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "cotangent {:?} vs output {:?}",
                    cotangent.shape(),
                    out.value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        let mut result: Vec<Option<Tensor>> = Vec::new();
        result.resize_with(nodes.len(), || None);
        if !out.requires_grad {
            return Ok(Gradients { grads: result });
        }
        grads[output.id] = Some(cotangent.data().to_vec());

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut ctx = BackCtx {
                nodes: &nodes,
                grads: &mut grads,
                flops: 0,
            };
            match &node.op {
                Op::Leaf => {
                    result[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    continue;
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let k = bv.shape()[0];
                    let m = bv.shape()[1];
                    let n = av.len() / k.max(1);
                    if let Some(ga) = ctx.buf(*a) {
                        gemm(n, m, k, &g, (m, 1), bv.data(), (1, m), ga, 1.0);
                        ctx.flops += (2 * n * m * k) as u64;
                    }
                    if let Some(gb) = ctx.buf(*b) {
                        gemm(k, n, m, av.data(), (1, k), &g, (m, 1), gb, 1.0);
                        ctx.flops += (2 * n * m * k) as u64;
                    }
                }
                Op::Add(a, b) => {
                    ctx.acc(*a, &g, |_, g| g);
                    ctx.acc(*b, &g, |_, g| g);
                }
                Op::Sub(a, b) => {
                    ctx.acc(*a, &g, |_, g| g);
                    ctx.acc(*b, &g, |_, g| -g);
                }
                Op::Mul(a, b) => {
                    let bv = nodes[*b].value.clone();
                    let av = nodes[*a].value.clone();
                    ctx.acc(*a, &g, |i, g| g * bv.data()[i]);
                    ctx.acc(*b, &g, |i, g| g * av.data()[i]);
                }
                Op::AddTrailing(a, b) => {
                    ctx.acc(*a, &g, |_, g| g);
                    let width = nodes[*b].value.len();
                    if let Some(gb) = ctx.buf(*b) {
                        for chunk in g.chunks(width) {
                            for (o, &v) in gb.iter_mut().zip(chunk) {
                                *o += v;
                            }
                        }
                        ctx.flops += g.len() as u64;
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    ctx.acc(*a, &g, |_, g| g * c);
                }
                Op::AddScalar(a) => ctx.acc(*a, &g, |_, g| g),
                Op::Square(a) => {
                    let av = nodes[*a].value.clone();
                    ctx.acc(*a, &g, |i, g| 2.0 * av.data()[i] * g);
                }
                Op::Abs(a) => {
                    let av = nodes[*a].value.clone();
                    ctx.acc(*a, &g, |i, g| {
                        let x = av.data()[i];
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.clone();
                    ctx.acc(*a, &g, |i, g| g * (1.0 - y.data()[i] * y.data()[i]));
                }
                Op::Gelu { x, tanh } => {
                    let xv = nodes[*x].value.clone();
                    ctx.acc(*x, &g, |i, g| {
                        let x = xv.data()[i];
                        let t = tanh[i];
                        let dudx = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dudx)
                    });
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    if let Some(gx) = ctx.buf(*x) {
                        for (r, &inv) in inv_std.iter().enumerate() {
                            let row = r * d..(r + 1) * d;
                            let gr = &g[row.clone()];
                            let yr = &y[row.clone()];
                            let mean_g = gr.iter().sum::<f64>() / d as f64;
                            let mean_gy =
                                gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for ((o, &gi), &yi) in gx[row].iter_mut().zip(gr).zip(yr) {
                                *o += inv * (gi - mean_g - yi * mean_gy);
                            }
                        }
                        ctx.flops += 6 * g.len() as u64;
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    if let Some(ga) = ctx.buf(*a) {
                        for ((go, gr), yr) in ga.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((o, &gi), &yi) in go.iter_mut().zip(gr).zip(yr) {
                                *o += yi * (gi - dot);
                            }
                        }
                        ctx.flops += 4 * g.len() as u64;
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    if let Some(ga) = ctx.buf(*a) {
                        for ((go, gr), yr) in ga.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                            let total: f64 = gr.iter().sum();
                            for ((o, &gi), &yi) in go.iter_mut().zip(gr).zip(yr) {
                                *o += gi - yi.exp() * total;
                            }
                        }
                        ctx.flops += 4 * g.len() as u64;
                    }
                }
                Op::TransposeLast2(a) => {
                    // node is [.., q, p]; parent is [.., p, q]
                    let shape = node.value.shape();
                    let (q, p) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                    if let Some(ga) = ctx.buf(*a) {
                        transpose_acc(&g, ga, q, p);
                        ctx.flops += g.len() as u64;
                    }
                }
                Op::Reshape(a) => ctx.acc(*a, &g, |_, g| g),
                Op::ExpandAxis { x, axis, n } => {
                    let xs = nodes[*x].value.shape();
                    let inner: usize = xs[*axis..].iter().product();
                    let n = *n;
                    if let Some(gx) = ctx.buf(*x) {
                        for (o, block) in g.chunks(n * inner).enumerate() {
                            let dst = &mut gx[o * inner..(o + 1) * inner];
                            for rep in block.chunks(inner) {
                                for (d, &v) in dst.iter_mut().zip(rep) {
                                    *d += v;
                                }
                            }
                        }
                        ctx.flops += g.len() as u64;
                    }
                }
                Op::Concat(parts) => {
                    let widths: Vec<usize> =
                        parts.iter().map(|&p| nodes[p].value.last_dim()).collect();
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        if let Some(gp) = ctx.buf(p) {
                            for (dst, src) in gp.chunks_mut(w).zip(g.chunks(total)) {
                                for (d, &v) in dst.iter_mut().zip(&src[offset..offset + w]) {
                                    *d += v;
                                }
                            }
                        }
                        offset += w;
                    }
                    ctx.flops += g.len() as u64;
                }
                Op::SliceLast { x, start } => {
                    let width = nodes[*x].value.last_dim();
                    let len = node.value.last_dim();
                    let start = *start;
                    if let Some(gx) = ctx.buf(*x) {
                        for (dst, src) in gx.chunks_mut(width).zip(g.chunks(len)) {
                            for (d, &v) in dst[start..start + len].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                        ctx.flops += g.len() as u64;
                    }
                }
                Op::Gather { table, idx } => {
                    let e = nodes[*table].value.last_dim();
                    if let Some(gt) = ctx.buf(*table) {
                        for (r, &i) in idx.iter().enumerate() {
                            for (d, &v) in gt[i * e..(i + 1) * e].iter_mut().zip(&g[r * e..(r + 1) * e]) {
                                *d += v;
                            }
                        }
                        ctx.flops += g.len() as u64;
                    }
                }
                Op::Pick { x, idx } => {
                    let c = nodes[*x].value.last_dim();
                    if let Some(gx) = ctx.buf(*x) {
                        for (r, &i) in idx.iter().enumerate() {
                            gx[r * c + i] += g[r];
                        }
                        ctx.flops += g.len() as u64;
                    }
                }
                Op::SumAll(a) => {
                    let gv = g[0];
                    ctx.acc(*a, &g, move |_, _| gv);
                }
            }
            let flops = ctx.flops;
            self.count_backward(flops);
        }
        Ok(Gradients { grads: result })
    }
}

struct BackCtx<'a> {
    nodes: &'a [Node],
    grads: &'a mut Vec<Option<Vec<f64>>>,
    flops: u64,
}

impl BackCtx<'_> {
    /// Zero-initialised gradient buffer for `id`, or `None` if it needs none.
    fn buf(&mut self, id: usize) -> Option<&mut [f64]> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let len = self.nodes[id].value.len();
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    /// Accumulates `f(i, g[i])` into the gradient of `id`. For parents whose
    /// size differs from `g` (sum reductions), `f` is evaluated per parent
    /// element with `g[0]`.
    fn acc(&mut self, id: usize, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        let Some(buf) = self.buf(id) else { return };
        if buf.len() == g.len() {
            for (i, (o, &gi)) in buf.iter_mut().zip(g).enumerate() {
                *o += f(i, gi);
            }
        } else {
            for (i, o) in buf.iter_mut().enumerate() {
                *o += f(i, g[0]);
            }
        }
        self.flops += buf.len() as u64;
    }
}

fn transpose_acc(src: &[f64], dst: &mut [f64], rows: usize, cols: usize) {
    // src is [.., rows, cols]; dst is [.., cols, rows]
    let block = rows * cols;
    for (s, d) in src.chunks(block).zip(dst.chunks_mut(block)) {
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] += s[r * cols + c];
            }
        }
    }
}

fn transpose_into(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    transpose_acc(src, &mut out, rows, cols);
    out
}

/// Sinusoidal feature table, one row per time value (see [`Tape::sinusoidal`]).
pub fn sinusoidal_embedding(times: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half <= 1 {
                1.0
            } else {
                (4.0 * std::f64::consts::LN_10 * k as f64 / (half - 1) as f64).exp()
            }
        })
        .collect();
    let mut data = Vec::with_capacity(times.len() * dim);
    for &t in times {
        data.extend(freqs.iter().map(|f| (f * t).sin()));
        data.extend(freqs.iter().map(|f| (f * t).cos()));
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::new(vec![times.len(), dim], data).expect("embedding shape")
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<(Tensor, Tensor)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok((a, b))
    }

    fn unary(
        &self,
        name: &'static str,
        op: Op,
        f: impl Fn(f64) -> f64,
        flops_per: u64,
    ) -> Result<Var<'t>> {
        let v = self.value().map(f);
        let flops = flops_per * v.len() as u64;
        self.tape.push(name, v, op, &[self.id], flops)
    }

    /// `[.., k] x [k, m] -> [.., m]`.
    pub fn matmul(&self, w: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), w.value());
        if b.rank() != 2 || a.rank() == 0 || a.last_dim() != b.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (k, m) = (b.shape()[0], b.shape()[1]);
        let n = a.len() / k.max(1);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, a.data(), (k, 1), b.data(), (m, 1), &mut out, 0.0);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        self.tape.push(
            "matmul",
            Tensor::new(shape, out)?,
            Op::MatMul(self.id, w.id),
            &[self.id, w.id],
            (2 * n * k * m) as u64,
        )
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "add")?;
        let v = a.zip_map(&b, |x, y| x + y)?;
        let n = v.len() as u64;
        self.tape.push("add", v, Op::Add(self.id, other.id), &[self.id, other.id], n)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "sub")?;
        let v = a.zip_map(&b, |x, y| x - y)?;
        let n = v.len() as u64;
        self.tape.push("sub", v, Op::Sub(self.id, other.id), &[self.id, other.id], n)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "mul")?;
        let v = a.zip_map(&b, |x, y| x * y)?;
        let n = v.len() as u64;
        self.tape.push("mul", v, Op::Mul(self.id, other.id), &[self.id, other.id], n)
    }

    /// Adds `b` repeated over the leading axes of `self`; `b.shape` must be a
    /// suffix of `self.shape` (bias vectors, positional tables).
    pub fn add_trailing(&self, b: &Var<'t>) -> Result<Var<'t>> {
        let (a, bv) = (self.value(), b.value());
        let ok = bv.rank() <= a.rank() && a.shape()[a.rank() - bv.rank()..] == *bv.shape();
        if !ok || bv.is_empty() {
            return Err(Error::shape(
                "add_trailing",
                format!("{:?} + {:?}", a.shape(), bv.shape()),
            ));
        }
        let w = bv.len();
        let mut out = a.into_data();
        for chunk in out.chunks_mut(w) {
            for (o, &x) in chunk.iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let n = out.len() as u64;
        self.tape.push(
            "add_trailing",
            Tensor::new(self.shape(), out)?,
            Op::AddTrailing(self.id, b.id),
            &[self.id, b.id],
            n,
        )
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, c), move |x| x * c, 1)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", Op::AddScalar(self.id), move |x| x + c, 1)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary("square", Op::Square(self.id), |x| x * x, 1)
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        self.unary("abs", Op::Abs(self.id), f64::abs, 1)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", Op::Tanh(self.id), f64::tanh, 8)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'t>> {
        let x = self.value();
        let tanh: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| (GELU_K * (v + GELU_C * v * v * v)).tanh())
            .collect();
        let out: Vec<f64> = x
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| 0.5 * v * (1.0 + t))
            .collect();
        let n = out.len() as u64;
        self.tape.push(
            "gelu",
            Tensor::new(x.shape().to_vec(), out)?,
            Op::Gelu { x: self.id, tanh },
            &[self.id],
            12 * n,
        )
    }

    /// Normalizes over the trailing axis (no affine).
    pub fn layer_norm(&self) -> Result<Var<'t>> {
        let x = self.value();
        let d = x.last_dim();
        let mut out = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.len() / d.max(1));
        for row in x.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            out.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let n = out.len() as u64;
        self.tape.push(
            "layer_norm",
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LayerNorm { x: self.id, inv_std },
            &[self.id],
            5 * n,
        )
    }

    pub fn softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let d = x.last_dim();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|v| (v - max).exp()));
            let total: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|v| *v /= total);
        }
        let n = out.len() as u64;
        self.tape.push(
            "softmax",
            Tensor::new(x.shape().to_vec(), out)?,
            Op::Softmax(self.id),
            &[self.id],
            4 * n,
        )
    }

    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let d = x.last_dim();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let n = out.len() as u64;
        self.tape.push(
            "log_softmax",
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LogSoftmax(self.id),
            &[self.id],
            4 * n,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() < 2 {
            return Err(Error::shape("transpose_last2", format!("{:?}", x.shape())));
        }
        let r = x.rank();
        let (p, q) = (x.shape()[r - 2], x.shape()[r - 1]);
        let out = transpose_into(x.data(), p, q);
        let mut shape = x.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let n = out.len() as u64;
        self.tape.push(
            "transpose_last2",
            Tensor::new(shape, out)?,
            Op::TransposeLast2(self.id),
            &[self.id],
            n,
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape.to_vec())?;
        self.tape.push("reshape", v, Op::Reshape(self.id), &[self.id], 0)
    }

    /// Inserts a new axis of size `n` at `axis`, repeating the input.
    pub fn expand_axis(&self, axis: usize, n: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis > x.rank() {
            return Err(Error::shape(
                "expand_axis",
                format!("axis {axis} for {:?}", x.shape()),
            ));
        }
        let inner: usize = x.shape()[axis..].iter().product();
        let mut out = Vec::with_capacity(x.len() * n);
        for block in x.data().chunks(inner.max(1)) {
            for _ in 0..n {
                out.extend_from_slice(block);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.insert(axis, n);
        let len = out.len() as u64;
        self.tape.push(
            "expand_axis",
            Tensor::new(shape, out)?,
            Op::ExpandAxis { x: self.id, axis, n },
            &[self.id],
            len,
        )
    }

    /// `[.., width] -> [.., len]` taking columns `start..start + len`.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let w = x.last_dim();
        if x.rank() == 0 || start + len > w {
            return Err(Error::shape(
                "slice_last",
                format!("{start}..{} of {:?}", start + len, x.shape()),
            ));
        }
        let mut out = Vec::with_capacity(x.len() / w * len);
        for row in x.data().chunks(w) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let n = out.len() as u64;
        self.tape.push(
            "slice_last",
            Tensor::new(shape, out)?,
            Op::SliceLast { x: self.id, start },
            &[self.id],
            n,
        )
    }

    /// Row lookup into a `[rows, width]` table: `[idx.len(), width]`.
    pub fn gather(&self, idx: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        if table.rank() != 2 {
            return Err(Error::shape("gather", format!("table {:?}", table.shape())));
        }
        let (rows, e) = (table.shape()[0], table.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * e);
        for &i in idx {
            if i >= rows {
                return Err(Error::contract(format!("gather index {i} >= {rows}")));
            }
            out.extend_from_slice(&table.data()[i * e..(i + 1) * e]);
        }
        let n = out.len() as u64;
        self.tape.push(
            "gather",
            Tensor::new(vec![idx.len(), e], out)?,
            Op::Gather {
                table: self.id,
                idx: idx.to_vec(),
            },
            &[self.id],
            n,
        )
    }

    /// Selects one entry per row of `[.., c]`: result has the leading shape.
    pub fn pick(&self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.last_dim();
        if x.rank() == 0 || x.len() / c != idx.len() {
            return Err(Error::shape(
                "pick",
                format!("{} indices for {:?}", idx.len(), x.shape()),
            ));
        }
        let mut out = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= c {
                return Err(Error::contract(format!("pick index {i} >= {c}")));
            }
            out.push(x.data()[r * c + i]);
        }
        let shape = x.shape()[..x.rank() - 1].to_vec();
        let n = out.len() as u64;
        self.tape.push(
            "pick",
            Tensor::new(shape, out)?,
            Op::Pick {
                x: self.id,
                idx: idx.to_vec(),
            },
            &[self.id],
            n,
        )
    }

    pub fn sum_all(&self) -> Result<Var<'t>> {
        let x = self.value();
        let total = x.data().iter().sum();
        self.tape.push(
            "sum_all",
            Tensor::scalar(total),
            Op::SumAll(self.id),
            &[self.id],
            x.len() as u64,
        )
    }

    pub fn mean_all(&self) -> Result<Var<'t>> {
        let n = self.value().len();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        self.sum_all()?.scale(1.0 / n as f64)
    }
}
