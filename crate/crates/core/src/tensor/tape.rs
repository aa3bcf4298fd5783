//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever its
//! backward rule needs. Nodes are appended after their inputs, so a reverse
//! scan over the tape is a valid topological order for backpropagation.

use std::cell::{Ref, RefCell};

use super::kernels::{self, ConvGeom};
use super::value::{axis_split, matmul_dims};
use super::{Real, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulNT { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Reshape { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: T },
    AddBias { a: usize, bias: usize, cols: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    /// Statistics kept in f64: with a small row spread, f32 rounding in the
    /// normalised values is amplified by 1/std in the gradient.
    LayerNorm { x: usize, gain: usize, bias: usize, cols: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    MeanRows { a: usize, rows: usize, cols: usize },
    Sum { a: usize },
    Mean { a: usize },
    Concat { parts: Vec<(usize, usize)>, axis: usize, rows: usize },
    SliceRows { a: usize, start: usize, cols: usize },
    SliceCols { a: usize, start: usize, end: usize, rows: usize, cols: usize },
    MaskedFill { a: usize, mask: Vec<bool> },
    L2NormRows { a: usize, cols: usize, norms: Vec<T> },
    Embedding { table: usize, ids: Vec<usize>, dim: usize },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom, cols: Vec<T>, c_out: usize },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize, vocab: usize },
    BceLogits { logits: usize, targets: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Tensor::new(&self.shapes[var.id], g.clone()).ok()
    }

    pub fn raw(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id)?.as_deref()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf; it participates in backprop iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_vec(&self, shape: &[usize], data: Vec<T>) -> Result<Var<'_, T>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Gathers rows `ids` of an embedding table `[vocab, dim]`.
    pub fn embedding(&self, table: Var<'_, T>, ids: &[usize]) -> Result<Var<'_, T>> {
        let (value, dim) = {
            let nodes = self.nodes();
            let t = &nodes[table.id];
            if t.shape.len() != 2 {
                return Err(Error::shape("embedding", &t.shape, &[ids.len()]));
            }
            let (vocab, dim) = (t.shape[0], t.shape[1]);
            if ids.is_empty() {
                return Err(Error::Contract("embedding lookup with no ids".into()));
            }
            let mut out = Vec::with_capacity(ids.len() * dim);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::Input(format!("token id {id} >= vocabulary {vocab}")));
                }
                out.extend_from_slice(&t.value[id * dim..(id + 1) * dim]);
            }
            (out, dim)
        };
        let rg = self.rg(&[table.id]);
        Ok(self.push(
            vec![ids.len(), dim],
            value,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
                dim,
            },
            rg,
        ))
    }

    /// Concatenates along axis 0 (any rank, equal trailing dims) or along the
    /// last axis of rank-2 inputs.
    pub fn concat(&self, parts: &[Var<'_, T>], axis: usize) -> Result<Var<'_, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let nodes = self.nodes();
        let base = nodes[first.id].shape.clone();
        let mut meta = Vec::with_capacity(parts.len());
        let (shape, value) = if axis == 0 {
            let mut total = 0;
            let mut value = Vec::new();
            for p in parts {
                let s = &nodes[p.id].shape;
                if s.len() != base.len() || s[1..] != base[1..] {
                    return Err(Error::shape("concat", &base, s));
                }
                meta.push((p.id, s[0]));
                total += s[0];
                value.extend_from_slice(&nodes[p.id].value);
            }
            let mut shape = base.clone();
            shape[0] = total;
            (shape, value)
        } else if axis == 1 && base.len() == 2 {
            let rows = base[0];
            let mut total = 0;
            for p in parts {
                let s = &nodes[p.id].shape;
                if s.len() != 2 || s[0] != rows {
                    return Err(Error::shape("concat", &base, s));
                }
                meta.push((p.id, s[1]));
                total += s[1];
            }
            let mut value = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &(id, c) in &meta {
                    value.extend_from_slice(&nodes[id].value[r * c..(r + 1) * c]);
                }
            }
            (vec![rows, total], value)
        } else {
            return Err(Error::Contract(format!(
                "concat axis {axis} unsupported for shape {base:?}"
            )));
        };
        let rg = meta.iter().any(|&(id, _)| nodes[id].requires_grad);
        let rows = base[0];
        drop(nodes);
        Ok(self.push(shape, value, Op::Concat { parts: meta, axis, rows }, rg))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]);
    f(slot);
}

fn backprop_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |id: usize| -> &[T] { &nodes[id].value };
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            accumulate(nodes, grads, a, |ga| kernels::gemm_nt(g, val(b), ga, m, n, k));
            accumulate(nodes, grads, b, |gb| kernels::gemm_tn(val(a), g, gb, k, m, n));
        }
        &Op::MatMulNT { a, b, m, k, n } => {
            accumulate(nodes, grads, a, |ga| kernels::gemm_nn(g, val(b), ga, m, n, k));
            accumulate(nodes, grads, b, |gb| kernels::gemm_tn(g, val(a), gb, n, m, k));
        }
        &Op::Transpose { a, rows, cols } => {
            let gt = kernels::transpose(g, cols, rows);
            accumulate(nodes, grads, a, |ga| add_into(ga, &gt));
        }
        &Op::Reshape { a } => accumulate(nodes, grads, a, |ga| add_into(ga, g)),
        &Op::Add { a, b } => {
            accumulate(nodes, grads, a, |ga| add_into(ga, g));
            accumulate(nodes, grads, b, |gb| add_into(gb, g));
        }
        &Op::Sub { a, b } => {
            accumulate(nodes, grads, a, |ga| add_into(ga, g));
            accumulate(nodes, grads, b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
        }
        &Op::Mul { a, b } => {
            accumulate(nodes, grads, a, |ga| {
                for ((x, &y), &bv) in ga.iter_mut().zip(g).zip(val(b)) {
                    *x += y * bv;
                }
            });
            accumulate(nodes, grads, b, |gb| {
                for ((x, &y), &av) in gb.iter_mut().zip(g).zip(val(a)) {
                    *x += y * av;
                }
            });
        }
        &Op::Scale { a, s } => {
            accumulate(nodes, grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * s));
        }
        &Op::AddBias { a, bias, cols } => {
            accumulate(nodes, grads, a, |ga| add_into(ga, g));
            accumulate(nodes, grads, bias, |gb| {
                for row in g.chunks_exact(cols) {
                    add_into(gb, row);
                }
            });
        }
        &Op::Relu { a } => {
            accumulate(nodes, grads, a, |ga| {
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(val(a)) {
                    if v > T::zero() {
                        *x += y;
                    }
                }
            });
        }
        &Op::Sigmoid { a } => {
            accumulate(nodes, grads, a, |ga| {
                for ((x, &y), &s) in ga.iter_mut().zip(g).zip(&node.value) {
                    *x += y * s * (T::one() - s);
                }
            });
        }
        &Op::Softmax { a, outer, len, inner } => {
            let y = &node.value;
            accumulate(nodes, grads, a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mut s = T::zero();
                        for j in 0..len {
                            s += g[at(j)] * y[at(j)];
                        }
                        for j in 0..len {
                            ga[at(j)] += y[at(j)] * (g[at(j)] - s);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, cols, xhat, rstd } => {
            let (x, gain, bias, cols) = (*x, *gain, *bias, *cols);
            let gv = val(gain);
            accumulate(nodes, grads, x, |gx| {
                let n = cols as f64;
                for (r, (grow, xrow)) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)).enumerate() {
                    let d: Vec<f64> = (0..cols).map(|c| grow[c].as_f64() * gv[c].as_f64()).collect();
                    let mean_d = d.iter().sum::<f64>() / n;
                    let mean_dx = d.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..cols {
                        gx[r * cols + c] += T::lit(rstd[r] * (d[c] - mean_d - xrow[c] * mean_dx));
                    }
                }
            });
            accumulate(nodes, grads, gain, |gg| {
                for (grow, xrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                    for c in 0..cols {
                        gg[c] += grow[c] * T::lit(xrow[c]);
                    }
                }
            });
            accumulate(nodes, grads, bias, |gb| {
                for grow in g.chunks_exact(cols) {
                    add_into(gb, grow);
                }
            });
        }
        &Op::MeanRows { a, rows, cols } => {
            let inv = T::one() / T::lit(rows as f64);
            accumulate(nodes, grads, a, |ga| {
                for row in ga.chunks_exact_mut(cols) {
                    for (x, &y) in row.iter_mut().zip(g) {
                        *x += y * inv;
                    }
                }
            });
        }
        &Op::Sum { a } => accumulate(nodes, grads, a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
        &Op::Mean { a } => {
            let n = T::lit(nodes[a].value.len() as f64);
            accumulate(nodes, grads, a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
        }
        Op::Concat { parts, axis, rows } => {
            if *axis == 0 {
                let mut offset = 0;
                for &(id, _) in parts {
                    let len = nodes[id].value.len();
                    accumulate(nodes, grads, id, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            } else {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut col = 0;
                for &(id, c) in parts {
                    accumulate(nodes, grads, id, |gp| {
                        for r in 0..*rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + col..r * total + col + c]);
                        }
                    });
                    col += c;
                }
            }
        }
        &Op::SliceRows { a, start, cols } => {
            accumulate(nodes, grads, a, |ga| add_into(&mut ga[start * cols..start * cols + g.len()], g));
        }
        &Op::SliceCols { a, start, end, rows, cols } => {
            let w = end - start;
            accumulate(nodes, grads, a, |ga| {
                for r in 0..rows {
                    add_into(&mut ga[r * cols + start..r * cols + end], &g[r * w..(r + 1) * w]);
                }
            });
        }
        Op::MaskedFill { a, mask } => {
            accumulate(nodes, grads, *a, |ga| {
                for ((x, &y), &m) in ga.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *x += y;
                    }
                }
            });
        }
        Op::L2NormRows { a, cols, norms } => {
            let y = &node.value;
            accumulate(nodes, grads, *a, |ga| {
                for (r, &norm) in norms.iter().enumerate() {
                    let row = r * cols..(r + 1) * cols;
                    let gy = &g[row.clone()];
                    let yr = &y[row.clone()];
                    let proj: T = gy.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                    for ((x, &gv), &yv) in ga[row].iter_mut().zip(gy).zip(yr) {
                        *x += (gv - yv * proj) / norm;
                    }
                }
            });
        }
        Op::Embedding { table, ids, dim } => {
            accumulate(nodes, grads, *table, |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                }
            });
        }
        Op::Conv2d { x, w, b, geom, cols, c_out } => {
            let (kk, hw) = (geom.col_rows(), geom.col_cols());
            accumulate(nodes, grads, *w, |gw| kernels::gemm_nt(g, cols, gw, *c_out, hw, kk));
            accumulate(nodes, grads, *b, |gb| {
                for (o, row) in g.chunks_exact(hw).enumerate() {
                    gb[o] += row.iter().copied().sum::<T>();
                }
            });
            if nodes[*x].requires_grad {
                let mut gcols = vec![T::zero(); kk * hw];
                kernels::gemm_tn(val(*w), g, &mut gcols, kk, *c_out, hw);
                accumulate(nodes, grads, *x, |gx| kernels::col2im(&gcols, geom, gx));
            }
        }
        Op::CrossEntropy { logits, targets, probs, count, vocab } => {
            let inv = g[0] / T::lit(*count as f64);
            accumulate(nodes, grads, *logits, |gl| {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let row = &probs[r * vocab..(r + 1) * vocab];
                    for (c, &p) in row.iter().enumerate() {
                        let onehot = if c == t { T::one() } else { T::zero() };
                        gl[r * vocab + c] += (p - onehot) * inv;
                    }
                }
            });
        }
        Op::BceLogits { logits, targets } => {
            let inv = g[0] / T::lit(targets.len() as f64);
            accumulate(nodes, grads, *logits, |gl| {
                for ((x, &z), &y) in gl.iter_mut().zip(val(*logits)).zip(targets) {
                    let s = T::one() / (T::one() + (-z).exp());
                    *x += (s - y) * inv;
                }
            });
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].shape.clone()
    }

    pub fn value(&self) -> Tensor<T> {
        let nodes = self.tape.nodes();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("tape invariant")
    }

    pub fn data(&self) -> Vec<T> {
        self.tape.nodes()[self.id].value.clone()
    }

    pub fn item(&self) -> T {
        self.tape.nodes()[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    fn unary(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(shape, value, op, rg)
    }

    fn binary(&self, other: &Var<'t, T>, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(shape, value, op, rg)
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (value, m, k, n) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (m, k, n) = matmul_dims(&a.shape, &b.shape)?;
            let mut out = vec![T::zero(); m * n];
            kernels::gemm_nn(&a.value, &b.value, &mut out, m, k, n);
            (out, m, k, n)
        };
        Ok(self.binary(other, vec![m, n], value, Op::MatMul { a: self.id, b: other.id, m, k, n }))
    }

    /// `self · otherᵀ` for `self: [m,k]`, `other: [n,k]`.
    pub fn matmul_t(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (value, m, k, n) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
                return Err(Error::shape("matmul_t", &a.shape, &b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
            let mut out = vec![T::zero(); m * n];
            kernels::gemm_nt(&a.value, &b.value, &mut out, m, k, n);
            (out, m, k, n)
        };
        Ok(self.binary(other, vec![m, n], value, Op::MatMulNT { a: self.id, b: other.id, m, k, n }))
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let (value, rows, cols) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 2 {
                return Err(Error::Contract(format!("transpose needs rank 2, got {:?}", a.shape)));
            }
            let (r, c) = (a.shape[0], a.shape[1]);
            (kernels::transpose(&a.value, r, c), r, c)
        };
        Ok(self.unary(vec![cols, rows], value, Op::Transpose { a: self.id, rows, cols }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if shape.iter().product::<usize>() != a.value.len() || shape.contains(&0) {
                return Err(Error::shape("reshape", &a.shape, shape));
            }
            a.value.clone()
        };
        Ok(self.unary(shape.to_vec(), value, Op::Reshape { a: self.id }))
    }

    fn zip_with(&self, other: &Var<'t, T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        self.same_tape(other)?;
        let nodes = self.tape.nodes();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape != b.shape {
            return Err(Error::shape(name, &a.shape, &b.shape));
        }
        Ok((a.shape.clone(), a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect()))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, value) = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, shape, value, Op::Add { a: self.id, b: other.id }))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, value) = self.zip_with(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, shape, value, Op::Sub { a: self.id, b: other.id }))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, value) = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, shape, value, Op::Mul { a: self.id, b: other.id }))
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            (a.shape.clone(), a.value.iter().map(|&v| v * s).collect())
        };
        self.unary(shape, value, Op::Scale { a: self.id, s })
    }

    /// Adds a bias vector over the last axis.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(bias)?;
        let (shape, value, cols) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[bias.id]);
            let cols = *a.shape.last().unwrap();
            if b.value.len() != cols {
                return Err(Error::shape("add_bias", &a.shape, &b.shape));
            }
            let mut out = a.value.clone();
            for row in out.chunks_exact_mut(cols) {
                add_into(row, &b.value);
            }
            (a.shape.clone(), out, cols)
        };
        Ok(self.binary(bias, shape, value, Op::AddBias { a: self.id, bias: bias.id, cols }))
    }

    fn map(&self, f: impl Fn(T) -> T) -> (Vec<usize>, Vec<T>) {
        let nodes = self.tape.nodes();
        let a = &nodes[self.id];
        (a.shape.clone(), a.value.iter().map(|&v| f(v)).collect())
    }

    pub fn relu(&self) -> Var<'t, T> {
        let (shape, value) = self.map(|v| if v > T::zero() { v } else { T::zero() });
        self.unary(shape, value, Op::Relu { a: self.id })
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let (shape, value) = self.map(|v| T::one() / (T::one() + (-v).exp()));
        self.unary(shape, value, Op::Sigmoid { a: self.id })
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let (shape, value, outer, len, inner) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let (outer, len, inner) = axis_split(&a.shape, axis)?;
            let mut out = a.value.clone();
            kernels::softmax_axis(&mut out, outer, len, inner);
            (a.shape.clone(), out, outer, len, inner)
        };
        Ok(self.unary(shape, value, Op::Softmax { a: self.id, outer, len, inner }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Var<'t, T>> {
        let rank = self.tape.nodes()[self.id].shape.len();
        self.softmax(rank - 1)
    }

    /// Layer normalization over the last axis with epsilon 1e-5.
    pub fn layernorm(&self, gain: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let (shape, value, cols, xhat, rstd) = {
            let nodes = self.tape.nodes();
            let (x, gv, bv) = (&nodes[self.id], &nodes[gain.id], &nodes[bias.id]);
            let cols = *x.shape.last().unwrap();
            if gv.value.len() != cols || bv.value.len() != cols {
                return Err(Error::shape("layernorm", &x.shape, &gv.shape));
            }
            let n = cols as f64;
            let mut xhat = Vec::with_capacity(x.value.len());
            let mut rstd = Vec::with_capacity(x.value.len() / cols);
            let mut out = Vec::with_capacity(x.value.len());
            for row in x.value.chunks_exact(cols) {
                let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
                let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
                let r = 1.0 / (var + LN_EPS).sqrt();
                rstd.push(r);
                for c in 0..cols {
                    let xh = (row[c].as_f64() - mean) * r;
                    xhat.push(xh);
                    out.push(T::lit(xh * gv.value[c].as_f64() + bv.value[c].as_f64()));
                }
            }
            (x.shape.clone(), out, cols, xhat, rstd)
        };
        let rg = self.tape.rg(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, cols, xhat, rstd },
            rg,
        ))
    }

    /// Mean over rows of a rank-2 tensor, giving `[1, cols]`.
    pub fn mean_rows(&self) -> Result<Var<'t, T>> {
        let (value, rows, cols) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 2 {
                return Err(Error::Contract(format!("mean_rows needs rank 2, got {:?}", a.shape)));
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut out = vec![T::zero(); cols];
            for row in a.value.chunks_exact(cols) {
                add_into(&mut out, row);
            }
            let inv = T::one() / T::lit(rows as f64);
            out.iter_mut().for_each(|v| *v *= inv);
            (out, rows, cols)
        };
        Ok(self.unary(vec![1, cols], value, Op::MeanRows { a: self.id, rows, cols }))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.tape.nodes()[self.id].value.iter().copied().sum::<T>();
        self.unary(vec![1], vec![s], Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let s = {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            v.iter().copied().sum::<T>() / T::lit(v.len() as f64)
        };
        self.unary(vec![1], vec![s], Op::Mean { a: self.id })
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let (value, cols) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 2 || start >= end || end > a.shape[0] {
                return Err(Error::shape("slice_rows", &a.shape, &[start, end]));
            }
            let cols = a.shape[1];
            (a.value[start * cols..end * cols].to_vec(), cols)
        };
        Ok(self.unary(vec![end - start, cols], value, Op::SliceRows { a: self.id, start, cols }))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let (value, rows, cols) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 2 || start >= end || end > a.shape[1] {
                return Err(Error::shape("slice_cols", &a.shape, &[start, end]));
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut out = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                out.extend_from_slice(&a.value[r * cols + start..r * cols + end]);
            }
            (out, rows, cols)
        };
        Ok(self.unary(vec![rows, end - start], value, Op::SliceCols { a: self.id, start, end, rows, cols }))
    }

    /// Replaces entries where `mask` is true with `fill`; those entries pass no gradient.
    pub fn masked_fill(&self, mask: &[bool], fill: T) -> Result<Var<'t, T>> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if mask.len() != a.value.len() {
                return Err(Error::shape("masked_fill", &a.shape, &[mask.len()]));
            }
            let v = a.value.iter().zip(mask).map(|(&v, &m)| if m { fill } else { v }).collect();
            (a.shape.clone(), v)
        };
        Ok(self.unary(shape, value, Op::MaskedFill { a: self.id, mask: mask.to_vec() }))
    }

    /// Scales each row of a rank-2 tensor to unit Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Result<Var<'t, T>> {
        let (shape, value, cols, norms) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 2 {
                return Err(Error::Contract(format!("l2_normalize_rows needs rank 2, got {:?}", a.shape)));
            }
            let cols = a.shape[1];
            let mut norms = Vec::with_capacity(a.shape[0]);
            let mut out = Vec::with_capacity(a.value.len());
            for row in a.value.chunks_exact(cols) {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::lit(NORM_EPS));
                norms.push(n);
                out.extend(row.iter().map(|&v| v / n));
            }
            (a.shape.clone(), out, cols, norms)
        };
        Ok(self.unary(shape, value, Op::L2NormRows { a: self.id, cols, norms }))
    }

    /// 2-D convolution of a `[c_in, h, w]` input with `[c_out, c_in, k, k]` weights.
    pub fn conv2d(&self, weight: &Var<'t, T>, bias: &Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        let (value, geom, cols, c_out) = {
            let nodes = self.tape.nodes();
            let (x, w, b) = (&nodes[self.id], &nodes[weight.id], &nodes[bias.id]);
            if x.shape.len() != 3 || w.shape.len() != 4 || w.shape[1] != x.shape[0] || w.shape[2] != w.shape[3] {
                return Err(Error::shape("conv2d", &x.shape, &w.shape));
            }
            let c_out = w.shape[0];
            if b.value.len() != c_out {
                return Err(Error::shape("conv2d bias", &w.shape, &b.shape));
            }
            let geom = ConvGeom::new(x.shape[0], x.shape[1], x.shape[2], w.shape[2], stride, pad)
                .ok_or_else(|| Error::shape("conv2d", &x.shape, &w.shape))?;
            let cols = kernels::im2col(&x.value, &geom);
            let hw = geom.col_cols();
            let mut out = vec![T::zero(); c_out * hw];
            for (o, row) in out.chunks_exact_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = b.value[o]);
            }
            kernels::gemm_nn(&w.value, &cols, &mut out, c_out, geom.col_rows(), hw);
            (out, geom, cols, c_out)
        };
        let rg = self.tape.rg(&[self.id, weight.id, bias.id]);
        Ok(self.tape.push(
            vec![c_out, geom.h_out, geom.w_out],
            value,
            Op::Conv2d { x: self.id, w: weight.id, b: bias.id, geom, cols, c_out },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[n, vocab]` logits; `None` targets are ignored.
    pub fn cross_entropy(&self, targets: &[Option<usize>]) -> Result<Var<'t, T>> {
        let (loss, probs, count, vocab) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 2 || a.shape[0] != targets.len() {
                return Err(Error::shape("cross_entropy", &a.shape, &[targets.len()]));
            }
            let vocab = a.shape[1];
            let mut probs = a.value.clone();
            kernels::softmax_axis(&mut probs, a.shape[0], vocab, 1);
            let mut loss = T::zero();
            let mut count = 0usize;
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                if t >= vocab {
                    return Err(Error::Input(format!("target {t} >= vocabulary {vocab}")));
                }
                // log-sum-exp form for accuracy on confident rows
                let row = &a.value[r * vocab..(r + 1) * vocab];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                loss += lse - row[t];
                count += 1;
            }
            if count == 0 {
                return Err(Error::Contract("cross_entropy with every target ignored".into()));
            }
            (loss / T::lit(count as f64), probs, count, vocab)
        };
        Ok(self.unary(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), probs, count, vocab },
        ))
    }

    /// Mean binary cross-entropy on logits against targets in [0, 1].
    pub fn bce_with_logits(&self, targets: &[T]) -> Result<Var<'t, T>> {
        let loss = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.value.len() != targets.len() || targets.is_empty() {
                return Err(Error::shape("bce_with_logits", &a.shape, &[targets.len()]));
            }
            let s: T = a
                .value
                .iter()
                .zip(targets)
                .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
                .sum();
            s / T::lit(targets.len() as f64)
        };
        Ok(self.unary(vec![1], vec![loss], Op::BceLogits { logits: self.id, targets: targets.to_vec() }))
    }
}
