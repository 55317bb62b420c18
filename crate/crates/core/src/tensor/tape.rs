use std::cell::RefCell;
use std::fmt;

use super::kernels::{self, split_axis, Conv1dGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Backward rule for an operation defined outside this module.
///
/// The tape hands over the input values, the stored output and the incoming
/// gradient; the op returns one optional gradient buffer per input (same length
/// as that input's data).
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    IndexRows { src: usize, index: Vec<usize> },
    ScatterRows { src: usize, index: Vec<usize> },
    Sum(usize),
    Mean(usize),
    SumAxis { src: usize, axis: usize },
    MaxAxis { src: usize, axis: usize, winners: Vec<usize> },
    VarianceRows(usize),
    Softmax(usize),
    LayerNorm { src: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(usize),
    Relu(usize),
    Sqrt(usize),
    SquaredL2(usize),
    Conv1d { x: usize, w: usize, bias: Option<usize>, geom: Conv1dGeom },
    Conv1dTranspose { x: usize, w: usize, bias: Option<usize>, geom: Conv1dGeom },
    OverlapAdd { src: usize, hop: usize, counts: Vec<f64> },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape is single-threaded; give each thread its own.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads[v.id].as_ref().map(|g| Tensor {
            shape: self.shapes[v.id].clone(),
            data: g.clone(),
        })
    }

    /// Gradient as a raw slice; `None` when no gradient reached the variable.
    pub fn slice(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads[v.id].as_deref()
    }
}

const SQRT_GRAD_FLOOR: f64 = 1e-8;
const LAYER_NORM_EPS: f64 = 1e-5;

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
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

    /// Differentiable input (a parameter or anything a gradient is wanted for).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Records a value computed outside the tape together with its backward rule.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, op: Box<dyn CustomOp>) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let needs = self.needs(&ids);
        self.push(value, Op::Custom { inputs: ids, op }, needs)
    }

    /// Walks the tape backward from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", loss_node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].needs_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.to_vec());
            }
            if wants(*b) {
                accumulate(&mut grads[*b], g.to_vec());
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.to_vec());
            }
            if wants(*b) {
                accumulate(&mut grads[*b], g.iter().map(|x| -x).collect());
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let d = g.iter().zip(&val(*b).data).map(|(g, y)| g * y).collect();
                accumulate(&mut grads[*a], d);
            }
            if wants(*b) {
                let d = g.iter().zip(&val(*a).data).map(|(g, x)| g * x).collect();
                accumulate(&mut grads[*b], d);
            }
        }
        Op::AddBias(a, bias) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.to_vec());
            }
            if wants(*bias) {
                let n = val(*bias).numel();
                let mut d = vec![0.0; n];
                for chunk in g.chunks(n) {
                    for (dv, gv) in d.iter_mut().zip(chunk) {
                        *dv += gv;
                    }
                }
                accumulate(&mut grads[*bias], d);
            }
        }
        Op::Scale(a, f) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.iter().map(|x| x * f).collect());
            }
        }
        Op::AddScalar(a) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.to_vec());
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
            let n = val(*b).shape[1];
            if wants(*a) {
                let mut d = vec![0.0; m * k];
                kernels::matmul_grad_a(g, &val(*b).data, &mut d, m, k, n);
                accumulate(&mut grads[*a], d);
            }
            if wants(*b) {
                let mut d = vec![0.0; k * n];
                kernels::matmul_grad_b(g, &val(*a).data, &mut d, m, k, n);
                accumulate(&mut grads[*b], d);
            }
        }
        Op::Transpose(a) => {
            if wants(*a) {
                let (r, c) = (val(*a).shape[0], val(*a).shape[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Reshape(a) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.to_vec());
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split_axis(&out.shape, *axis);
            let total = out.shape[*axis];
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape[*axis];
                if wants(p) {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    accumulate(&mut grads[p], d);
                }
                offset += len;
            }
        }
        Op::Slice { src, axis, start } => {
            if wants(*src) {
                let shape = &val(*src).shape;
                let (outer, full, inner) = split_axis(shape, *axis);
                let len = out.shape[*axis];
                let mut d = vec![0.0; val(*src).numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let srcb = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[srcb..srcb + len * inner]);
                }
                accumulate(&mut grads[*src], d);
            }
        }
        Op::IndexRows { src, index } => {
            if wants(*src) {
                let cols = row_len(val(*src));
                let mut d = vec![0.0; val(*src).numel()];
                for (r, &i) in index.iter().enumerate() {
                    for c in 0..cols {
                        d[i * cols + c] += g[r * cols + c];
                    }
                }
                accumulate(&mut grads[*src], d);
            }
        }
        Op::ScatterRows { src, index } => {
            if wants(*src) {
                let cols = row_len(val(*src));
                let mut d = vec![0.0; val(*src).numel()];
                for (r, &i) in index.iter().enumerate() {
                    d[r * cols..(r + 1) * cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                }
                accumulate(&mut grads[*src], d);
            }
        }
        Op::Sum(a) => {
            if wants(*a) {
                accumulate(&mut grads[*a], vec![g[0]; val(*a).numel()]);
            }
        }
        Op::Mean(a) => {
            if wants(*a) {
                let n = val(*a).numel();
                accumulate(&mut grads[*a], vec![g[0] / n as f64; n]);
            }
        }
        Op::SumAxis { src, axis } => {
            if wants(*src) {
                let (outer, len, inner) = split_axis(&val(*src).shape, *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        d[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(&mut grads[*src], d);
            }
        }
        Op::MaxAxis { src, axis, winners } => {
            if wants(*src) {
                let (_, len, inner) = split_axis(&val(*src).shape, *axis);
                let mut d = vec![0.0; val(*src).numel()];
                for (j, &w) in winners.iter().enumerate() {
                    let (o, i) = (j / inner, j % inner);
                    d[(o * len + w) * inner + i] += g[j];
                }
                accumulate(&mut grads[*src], d);
            }
        }
        Op::VarianceRows(a) => {
            if wants(*a) {
                let x = val(*a);
                let (n, cols) = (x.shape[0], x.shape[1]);
                let means = column_means(x);
                let mut d = vec![0.0; n * cols];
                let denom = (n - 1) as f64;
                for r in 0..n {
                    for c in 0..cols {
                        d[r * cols + c] = g[c] * 2.0 * (x.data[r * cols + c] - means[c]) / denom;
                    }
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Softmax(a) => {
            if wants(*a) {
                let n = row_len(out);
                let mut d = vec![0.0; out.numel()];
                for ((yrow, grow), drow) in out.data.chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((dv, &y), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = y * (gv - dot);
                    }
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::LayerNorm {
            src,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = &val(*gain).data;
            let n = gv.len();
            if wants(*src) {
                let mut d = vec![0.0; xhat.len()];
                for (r, ((xh, gr), dr)) in xhat.chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)).enumerate() {
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(g, w)| g * w).collect();
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for ((dv, &dh), &h) in dr.iter_mut().zip(&dxhat).zip(xh) {
                        *dv = rstd[r] * (dh - m1 - h * m2);
                    }
                }
                accumulate(&mut grads[*src], d);
            }
            if wants(*gain) {
                let mut d = vec![0.0; n];
                for (xh, gr) in xhat.chunks(n).zip(g.chunks(n)) {
                    for ((dv, h), gv) in d.iter_mut().zip(xh).zip(gr) {
                        *dv += h * gv;
                    }
                }
                accumulate(&mut grads[*gain], d);
            }
            if wants(*bias) {
                let mut d = vec![0.0; n];
                for gr in g.chunks(n) {
                    for (dv, gv) in d.iter_mut().zip(gr) {
                        *dv += gv;
                    }
                }
                accumulate(&mut grads[*bias], d);
            }
        }
        Op::Gelu(a) => {
            if wants(*a) {
                let d = g.iter().zip(&val(*a).data).map(|(g, &x)| g * kernels::gelu_grad(x)).collect();
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Relu(a) => {
            if wants(*a) {
                let d = g.iter().zip(&val(*a).data).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect();
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Sqrt(a) => {
            if wants(*a) {
                let d = g.iter().zip(&out.data).map(|(g, y)| g * 0.5 / y.max(SQRT_GRAD_FLOOR)).collect();
                accumulate(&mut grads[*a], d);
            }
        }
        Op::SquaredL2(a) => {
            if wants(*a) {
                let d = val(*a).data.iter().map(|x| 2.0 * x * g[0]).collect();
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Conv1d { x, w, bias, geom } => {
            let mut dx = wants(*x).then(|| vec![0.0; val(*x).numel()]);
            let mut dw = wants(*w).then(|| vec![0.0; val(*w).numel()]);
            kernels::conv1d_backward(&val(*x).data, &val(*w).data, g, geom, dx.as_deref_mut(), dw.as_deref_mut());
            if let Some(d) = dx {
                accumulate(&mut grads[*x], d);
            }
            if let Some(d) = dw {
                accumulate(&mut grads[*w], d);
            }
            if let Some(b) = bias.filter(|&b| wants(b)) {
                accumulate(&mut grads[b], channel_sums(g, geom.batch, geom.out_ch, geom.out_len));
            }
        }
        Op::Conv1dTranspose { x, w, bias, geom } => {
            let mut dx = wants(*x).then(|| vec![0.0; val(*x).numel()]);
            let mut dw = wants(*w).then(|| vec![0.0; val(*w).numel()]);
            kernels::conv1d_transpose_backward(&val(*x).data, &val(*w).data, g, geom, dx.as_deref_mut(), dw.as_deref_mut());
            if let Some(d) = dx {
                accumulate(&mut grads[*x], d);
            }
            if let Some(d) = dw {
                accumulate(&mut grads[*w], d);
            }
            if let Some(b) = bias.filter(|&b| wants(b)) {
                accumulate(&mut grads[b], channel_sums(g, geom.batch, geom.out_ch, geom.out_len));
            }
        }
        Op::OverlapAdd { src, hop, counts } => {
            if wants(*src) {
                let s = &val(*src).shape;
                let (ch, n, w) = (s[0], s[1], s[2]);
                let len = counts.len();
                let mut d = vec![0.0; ch * n * w];
                for c in 0..ch {
                    for i in 0..n {
                        for j in 0..w {
                            let t = i * hop + j;
                            if t < len {
                                d[(c * n + i) * w + j] = g[c * len + t] / counts[t];
                            }
                        }
                    }
                }
                accumulate(&mut grads[*src], d);
            }
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let ds = op.backward(&ins, out, g);
            for (&i, d) in inputs.iter().zip(ds) {
                if let Some(d) = d.filter(|_| wants(i)) {
                    accumulate(&mut grads[i], d);
                }
            }
        }
    }
}

fn row_len(t: &Tensor) -> usize {
    *t.shape.last().unwrap_or(&1)
}

fn column_means(x: &Tensor) -> Vec<f64> {
    let (n, cols) = (x.shape[0], x.shape[1]);
    let mut m = vec![0.0; cols];
    for row in x.data.chunks(cols) {
        for (mv, xv) in m.iter_mut().zip(row) {
            *mv += xv;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

fn channel_sums(g: &[f64], batch: usize, ch: usize, len: usize) -> Vec<f64> {
    let mut d = vec![0.0; ch];
    for b in 0..batch {
        for (c, dv) in d.iter_mut().enumerate() {
            *dv += g[(b * ch + c) * len..(b * ch + c + 1) * len].iter().sum::<f64>();
        }
    }
    d
}

fn shapes_str(ts: &[&[usize]]) -> String {
    ts.iter().map(|s| format!("{:?}", s)).collect::<Vec<_>>().join(" vs ")
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)
        };
        let needs = self.requires_grad();
        self.tape.push(value, op, needs)
    }

    fn elementwise(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape != b.shape {
                return Err(Error::shape(name, shapes_str(&[&a.shape, &b.shape])));
            }
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, op, needs))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a vector of length `last_dim` to every row.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            let n = row_len(a);
            if b.ndim() != 1 || b.numel() != n {
                return Err(Error::shape("add_bias", shapes_str(&[&a.shape, &b.shape])));
            }
            let mut data = a.data.clone();
            for row in data.chunks_mut(n) {
                for (x, bv) in row.iter_mut().zip(&b.data) {
                    *x += bv;
                }
            }
            Tensor {
                shape: a.shape.clone(),
                data,
            }
        };
        let needs = self.tape.needs(&[self.id, bias.id]);
        Ok(self.tape.push(value, Op::AddBias(self.id, bias.id), needs))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, factor), |a| a.map(|x| x * factor))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |a| a.map(|x| x + c))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::shape("matmul", shapes_str(&[&a.shape, &b.shape])));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut c = vec![0.0; m * n];
            kernels::matmul_acc(&a.data, &b.data, &mut c, m, k, n);
            Tensor {
                shape: vec![m, n],
                data: c,
            }
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), needs))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", shape)));
        }
        Ok(self.unary(Op::Transpose(self.id), |a| {
            let (r, c) = (a.shape[0], a.shape[1]);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = a.data[i * c + j];
                }
            }
            Tensor {
                shape: vec![c, r],
                data: d,
            }
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let cur = self.shape();
        if cur.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::shape("reshape", shapes_str(&[&cur, shape])));
        }
        Ok(self.unary(Op::Reshape(self.id), |a| Tensor {
            shape: shape.to_vec(),
            data: a.data.clone(),
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let shapes: Vec<&[usize]> = parts.iter().map(|p| nodes[p.id].value.shape.as_slice()).collect();
            let base = shapes[0];
            if axis >= base.len()
                || shapes.iter().any(|s| {
                    s.len() != base.len() || s.iter().zip(base).enumerate().any(|(d, (a, b))| d != axis && a != b)
                })
            {
                return Err(Error::shape("concat", shapes_str(&shapes)));
            }
            let total: usize = shapes.iter().map(|s| s[axis]).sum();
            let (outer, _, inner) = split_axis(base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.id].value;
                    let len = t.shape[axis] * inner;
                    data.extend_from_slice(&t.data[o * len..(o + 1) * len]);
                }
            }
            let mut shape = base.to_vec();
            shape[axis] = total;
            Tensor { shape, data }
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = tape.needs(&ids);
        Ok(tape.push(value, Op::Concat { parts: ids, axis }, needs))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{:?} axis {} range {}..{}", shape, axis, start, start + len),
            ));
        }
        Ok(self.unary(Op::Slice { src: self.id, axis, start }, |a| {
            let (outer, full, inner) = split_axis(&a.shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let b = (o * full + start) * inner;
                data.extend_from_slice(&a.data[b..b + len * inner]);
            }
            let mut s = a.shape.clone();
            s[axis] = len;
            Tensor { shape: s, data }
        }))
    }

    /// Gathers rows (first axis) of a 2-D tensor.
    pub fn index_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || index.iter().any(|&i| i >= shape[0]) {
            return Err(Error::shape("index_rows", format!("{:?} with index {:?}", shape, index)));
        }
        let idx = index.to_vec();
        Ok(self.unary(
            Op::IndexRows {
                src: self.id,
                index: idx.clone(),
            },
            |a| {
                let cols = a.shape[1];
                let mut data = Vec::with_capacity(idx.len() * cols);
                for &i in &idx {
                    data.extend_from_slice(&a.data[i * cols..(i + 1) * cols]);
                }
                Tensor {
                    shape: vec![idx.len(), cols],
                    data,
                }
            },
        ))
    }

    /// Places row `r` of `self` at row `index[r]` of a zero `[rows, cols]` tensor.
    pub fn scatter_rows(&self, index: &[usize], rows: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; rows];
        let dup = index.iter().any(|&i| i >= rows || std::mem::replace(&mut seen[i], true));
        if shape.len() != 2 || shape[0] != index.len() || dup {
            return Err(Error::shape(
                "scatter_rows",
                format!("{:?} into {} rows with index {:?}", shape, rows, index),
            ));
        }
        let idx = index.to_vec();
        Ok(self.unary(
            Op::ScatterRows {
                src: self.id,
                index: idx.clone(),
            },
            |a| {
                let cols = a.shape[1];
                let mut data = vec![0.0; rows * cols];
                for (r, &i) in idx.iter().enumerate() {
                    data[i * cols..(i + 1) * cols].copy_from_slice(&a.data[r * cols..(r + 1) * cols]);
                }
                Tensor {
                    shape: vec![rows, cols],
                    data,
                }
            },
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Tensor::scalar(a.data.iter().sum()))
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |a| {
            Tensor::scalar(a.data.iter().sum::<f64>() / a.numel() as f64)
        })
    }

    /// Sums out `axis`.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("{:?} axis {}", shape, axis)));
        }
        Ok(self.unary(Op::SumAxis { src: self.id, axis }, |a| {
            let (outer, len, inner) = split_axis(&a.shape, axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let b = (o * len + l) * inner;
                    for i in 0..inner {
                        data[o * inner + i] += a.data[b + i];
                    }
                }
            }
            let mut s = a.shape.clone();
            s.remove(axis);
            Tensor { shape: s, data }
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("{:?} axis {}", self.shape(), axis)))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    /// Maximum along `axis` (removed from the shape) and the winning index of
    /// every output element. Ties resolve to the lowest index; the gradient is
    /// routed to the winner only.
    pub fn max_axis(&self, axis: usize) -> Result<(Var<'t>, Vec<usize>)> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("max_axis", format!("{:?} axis {}", shape, axis)));
        }
        let (value, winners) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let (outer, len, inner) = split_axis(&a.shape, axis);
            let mut data = vec![0.0; outer * inner];
            let mut winners = vec![0usize; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = a.data[o * len * inner + i];
                    let mut arg = 0;
                    for l in 1..len {
                        let v = a.data[(o * len + l) * inner + i];
                        if v > best {
                            best = v;
                            arg = l;
                        }
                    }
                    data[o * inner + i] = best;
                    winners[o * inner + i] = arg;
                }
            }
            let mut s = a.shape.clone();
            s.remove(axis);
            (Tensor { shape: s, data }, winners)
        };
        let needs = self.requires_grad();
        let v = self.tape.push(
            value,
            Op::MaxAxis {
                src: self.id,
                axis,
                winners: winners.clone(),
            },
            needs,
        );
        Ok((v, winners))
    }

    /// Unbiased per-column variance of a `[N, d]` batch (N >= 2).
    pub fn variance_rows(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] < 2 {
            return Err(Error::shape("variance_rows", format!("{:?}", shape)));
        }
        Ok(self.unary(Op::VarianceRows(self.id), |a| {
            let (n, cols) = (a.shape[0], a.shape[1]);
            let m = column_means(a);
            let mut v = vec![0.0; cols];
            for row in a.data.chunks(cols) {
                for ((vv, x), mv) in v.iter_mut().zip(row).zip(&m) {
                    *vv += (x - mv) * (x - mv);
                }
            }
            v.iter_mut().for_each(|x| *x /= (n - 1) as f64);
            Tensor::vector(v)
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        self.unary(Op::Softmax(self.id), |a| {
            let n = row_len(a);
            let mut data = a.data.clone();
            for row in data.chunks_mut(n) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                row.iter_mut().for_each(|x| *x /= s);
            }
            Tensor {
                shape: a.shape.clone(),
                data,
            }
        })
    }

    /// Layer normalization over the last axis with learned `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let (value, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let (a, gv, bv) = (&nodes[self.id].value, &nodes[gain.id].value, &nodes[bias.id].value);
            let n = row_len(a);
            if gv.shape != [n] || bv.shape != [n] {
                return Err(Error::shape("layer_norm", shapes_str(&[&a.shape, &gv.shape, &bv.shape])));
            }
            let rows = a.numel() / n;
            let mut xhat = vec![0.0; a.numel()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; a.numel()];
            for r in 0..rows {
                let x = &a.data[r * n..(r + 1) * n];
                let mean = x.iter().sum::<f64>() / n as f64;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd[r] = rs;
                for c in 0..n {
                    let h = (x[c] - mean) * rs;
                    xhat[r * n + c] = h;
                    out[r * n + c] = h * gv.data[c] + bv.data[c];
                }
            }
            (
                Tensor {
                    shape: a.shape.clone(),
                    data: out,
                },
                xhat,
                rstd,
            )
        };
        let needs = self.tape.needs(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                src: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), |a| a.map(kernels::gelu))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |a| a.map(|x| x.max(0.0)))
    }

    /// Square root of non-negative values (negative inputs clamp to zero). The
    /// backward pass floors the denominator so a zero input stays finite.
    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), |a| a.map(|x| x.max(0.0).sqrt()))
    }

    /// Sum of squared entries.
    pub fn squared_l2(&self) -> Var<'t> {
        self.unary(Op::SquaredL2(self.id), |a| {
            Tensor::scalar(a.data.iter().map(|x| x * x).sum())
        })
    }

    /// 1-D convolution (cross-correlation). `self: [B, Cin, L]`,
    /// `weight: [Cout, Cin/groups, K]`, optional `bias: [Cout]`.
    pub fn conv1d(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Var<'t>> {
        let (value, geom) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
            let bad = || Error::shape("conv1d", shapes_str(&[&x.shape, &w.shape]));
            if x.ndim() != 3 || w.ndim() != 3 || stride == 0 || dilation == 0 || groups == 0 {
                return Err(bad());
            }
            let (batch, in_ch, in_len) = (x.shape[0], x.shape[1], x.shape[2]);
            let (out_ch, cin_g, kernel) = (w.shape[0], w.shape[1], w.shape[2]);
            if in_ch % groups != 0 || out_ch % groups != 0 || cin_g != in_ch / groups {
                return Err(bad());
            }
            let span = dilation * (kernel - 1) + 1;
            if in_len + 2 * padding < span {
                return Err(bad());
            }
            let out_len = (in_len + 2 * padding - span) / stride + 1;
            let bias_val = match bias {
                Some(b) => {
                    let bv = &nodes[b.id].value;
                    if bv.shape != [out_ch] {
                        return Err(bad());
                    }
                    Some(bv.data.as_slice())
                }
                None => None,
            };
            let geom = Conv1dGeom {
                batch,
                in_ch,
                in_len,
                out_ch,
                out_len,
                kernel,
                stride,
                padding,
                dilation,
                groups,
            };
            let data = kernels::conv1d_forward(&x.data, &w.data, bias_val, &geom);
            (
                Tensor {
                    shape: vec![batch, out_ch, out_len],
                    data,
                },
                geom,
            )
        };
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let needs = self.tape.needs(&ids);
        Ok(self.tape.push(
            value,
            Op::Conv1d {
                x: self.id,
                w: weight.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            needs,
        ))
    }

    /// Transposed 1-D convolution. `self: [B, Cin, Lin]`, `weight: [Cin, Cout, K]`.
    pub fn conv1d_transpose(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var<'t>> {
        let (value, geom) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
            let bad = || Error::shape("conv1d_transpose", shapes_str(&[&x.shape, &w.shape]));
            if x.ndim() != 3 || w.ndim() != 3 || w.shape[0] != x.shape[1] || stride == 0 || dilation == 0 {
                return Err(bad());
            }
            let (batch, in_ch, in_len) = (x.shape[0], x.shape[1], x.shape[2]);
            let (out_ch, kernel) = (w.shape[1], w.shape[2]);
            let full = (in_len - 1) * stride + dilation * (kernel - 1) + 1;
            if full <= 2 * padding {
                return Err(bad());
            }
            let out_len = full - 2 * padding;
            let bias_val = match bias {
                Some(b) => {
                    let bv = &nodes[b.id].value;
                    if bv.shape != [out_ch] {
                        return Err(bad());
                    }
                    Some(bv.data.as_slice())
                }
                None => None,
            };
            let geom = Conv1dGeom {
                batch,
                in_ch,
                in_len,
                out_ch,
                out_len,
                kernel,
                stride,
                padding,
                dilation,
                groups: 1,
            };
            let data = kernels::conv1d_transpose_forward(&x.data, &w.data, bias_val, &geom);
            (
                Tensor {
                    shape: vec![batch, out_ch, out_len],
                    data,
                },
                geom,
            )
        };
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let needs = self.tape.needs(&ids);
        Ok(self.tape.push(
            value,
            Op::Conv1dTranspose {
                x: self.id,
                w: weight.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            needs,
        ))
    }

    /// Reassembles `[C, n, w]` windows taken every `hop` samples into a `[C, len]`
    /// signal, averaging samples covered by more than one window. Window samples
    /// past `len` are dropped.
    pub fn overlap_add(&self, hop: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 3 || shape[1] == 0 || hop == 0 || hop > shape[2] || (shape[1] - 1) * hop >= len {
            return Err(Error::shape("overlap_add", format!("{:?} hop {} len {}", shape, hop, len)));
        }
        let (ch, n, w) = (shape[0], shape[1], shape[2]);
        let mut counts = vec![0.0; len];
        for i in 0..n {
            for j in 0..w {
                if i * hop + j < len {
                    counts[i * hop + j] += 1.0;
                }
            }
        }
        if counts.iter().any(|&c| c == 0.0) {
            return Err(Error::shape("overlap_add", format!("{:?} hop {} leaves gaps in {}", shape, hop, len)));
        }
        let cnt = counts.clone();
        Ok(self.unary(
            Op::OverlapAdd {
                src: self.id,
                hop,
                counts,
            },
            |a| {
                let mut data = vec![0.0; ch * len];
                for c in 0..ch {
                    for i in 0..n {
                        for j in 0..w {
                            let t = i * hop + j;
                            if t < len {
                                data[c * len + t] += a.data[(c * n + i) * w + j];
                            }
                        }
                    }
                    for t in 0..len {
                        data[c * len + t] /= cnt[t];
                    }
                }
                Tensor {
                    shape: vec![ch, len],
                    data,
                }
            },
        ))
    }
}
