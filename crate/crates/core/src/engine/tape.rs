//! Dynamic reverse-mode tape.
//!
//! Every forward pass records its operations on a fresh [`Tape`]; calling
//! [`Tape::backward`] walks the records in reverse and returns gradients for
//! the tracked leaves. Untracked nodes (constants, frozen parameters, and
//! anything computed only from them) are skipped on the way back.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::engine::conv::{chunk_len, col2im, conv_out_len, im2col, ConvGeom};
use crate::engine::element::gemm;
use crate::engine::params::{ParamKey, ParamStore};
use crate::engine::tensor::numel;
use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};

/// Per-channel statistics measured by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance over the normalized elements.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Sum(usize),
    Abs(usize),
    Square(usize),
    Relu(usize),
    Sigmoid(usize),
    Reshape(usize),
    Linear { x: usize, w: usize, b: Option<usize>, n: usize, i: usize, o: usize },
    Conv2d { x: usize, k: usize, b: Option<usize>, geom: ConvGeom },
    Upsample2x(usize),
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    SliceRows { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    RowNorm(usize),
    RowCosine { a: usize, b: usize, na: Vec<T>, nb: Vec<T> },
    DiffW(usize),
    DiffH(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(..) => "sum",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Reshape(..) => "reshape",
            Op::Linear { .. } => "fully_connected",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(..) => "upsample2x",
            Op::BatchNorm { .. } => "batch_norm",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::RowNorm(..) => "row_norm",
            Op::RowCosine { .. } => "row_cosine",
            Op::DiffW(..) => "diff_w",
            Op::DiffH(..) => "diff_h",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
    param: Option<ParamKey>,
}

/// Records one forward pass.
pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to the tracked leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Vec<T>>,
    params: Vec<(ParamKey, usize)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a tracked leaf, `None` if the loss does not depend on it.
    pub fn wrt(&self, var: &Var<'_, T>) -> Option<&[T]> {
        self.leaves.get(&var.id).map(Vec::as_slice)
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamKey, &[T])> {
        self.params.iter().filter_map(|(k, id)| self.leaves.get(id).map(|g| (*k, g.as_slice())))
    }
}

fn add_into<T: Element>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, tracked: bool) -> Result<Var<'_, T>> {
        self.push_leaf(shape, value, op, tracked, None)
    }

    fn push_leaf(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        tracked: bool,
        param: Option<ParamKey>,
    ) -> Result<Var<'_, T>> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op.name()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, op, tracked, param });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    /// Untracked input.
    pub fn constant(&self, t: &Tensor<T>) -> Result<Var<'_, T>> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`] when
    /// `t.requires_grad()` is set.
    pub fn leaf(&self, t: &Tensor<T>) -> Result<Var<'_, T>> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Tracked leaf bound to a stored parameter.
    pub fn param(&self, store: &ParamStore<T>, name: &str) -> Result<Var<'_, T>> {
        let key = store.key(name)?;
        let t = store.get(name)?;
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true, Some(key))
    }

    /// Parameter read as a constant: no gradient flows to it.
    pub fn frozen_param(&self, store: &ParamStore<T>, name: &str) -> Result<Var<'_, T>> {
        self.constant(store.get(name)?)
    }

    /// Reverse-mode pass from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", root.shape)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        let mut out = Gradients { leaves: HashMap::new(), params: Vec::new() };
        if !root.tracked {
            return Ok(out);
        }
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                if let Some(k) = node.param {
                    out.params.push((k, id));
                }
                out.leaves.insert(id, g);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }
        Ok(out)
    }
}

/// Propagates `g` (gradient w.r.t. `node`'s output) to its inputs.
fn backprop<T: Element>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let tracked = |i: usize| nodes[i].tracked;
    let len = |i: usize| nodes[i].value.len();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            if tracked(*a) {
                add_into(&mut grads[*a], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
            if tracked(*b) {
                add_into(&mut grads[*b], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += sign * g));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if tracked(*a) {
                add_into(&mut grads[*a], g.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
            }
            if tracked(*b) {
                add_into(&mut grads[*b], g.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
        }
        Op::Scale(a, s) => {
            add_into(&mut grads[*a], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += *s * g));
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            add_into(&mut grads[*a], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
        }
        Op::Sum(a) => {
            let g0 = g[0];
            add_into(&mut grads[*a], len(*a), |d| d.iter_mut().for_each(|d| *d += g0));
        }
        Op::Abs(a) => {
            let x = &nodes[*a].value;
            add_into(&mut grads[*a], g.len(), |d| {
                for i in 0..d.len() {
                    let s = if x[i] > T::zero() {
                        T::one()
                    } else if x[i] < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    d[i] += s * g[i];
                }
            });
        }
        Op::Square(a) => {
            let x = &nodes[*a].value;
            let two = T::one() + T::one();
            add_into(&mut grads[*a], g.len(), |d| {
                for i in 0..d.len() {
                    d[i] += two * x[i] * g[i];
                }
            });
        }
        Op::Relu(a) => {
            let x = &nodes[*a].value;
            add_into(&mut grads[*a], g.len(), |d| {
                for i in 0..d.len() {
                    if x[i] > T::zero() {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            add_into(&mut grads[*a], g.len(), |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (T::one() - y[i]);
                }
            });
        }
        Op::Linear { x, w, b, n, i, o } => {
            let (n, i, o) = (*n, *i, *o);
            if tracked(*x) {
                let wv = &nodes[*w].value;
                add_into(&mut grads[*x], n * i, |d| gemm(false, false, n, o, i, g, wv, T::one(), d));
            }
            if tracked(*w) {
                let xv = &nodes[*x].value;
                add_into(&mut grads[*w], o * i, |d| gemm(true, false, o, n, i, g, xv, T::one(), d));
            }
            if let Some(b) = b {
                if tracked(*b) {
                    add_into(&mut grads[*b], o, |d| {
                        for row in g.chunks_exact(o) {
                            d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                        }
                    });
                }
            }
        }
        Op::Conv2d { x, k, b, geom } => conv_backward(nodes, *x, *k, *b, geom, g, grads),
        Op::Upsample2x(a) => {
            let s = &nodes[*a].shape;
            let (h, w) = (s[2], s[3]);
            add_into(&mut grads[*a], len(*a), |d| {
                for (p, dplane) in d.chunks_exact_mut(h * w).enumerate() {
                    let gplane = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for r in 0..h {
                        for c in 0..w {
                            let top = 2 * r * 2 * w + 2 * c;
                            let bot = top + 2 * w;
                            dplane[r * w + c] += gplane[top] + gplane[top + 1] + gplane[bot] + gplane[bot + 1];
                        }
                    }
                }
            });
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            let s = &nodes[*x].shape;
            let (n, c) = (s[0], s[1]);
            let plane = numel(&s[2..]);
            let m = T::from_usize(n * plane).unwrap();
            let gam = &nodes[*gamma].value;
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * plane;
                    for j in off..off + plane {
                        sum_g[ci] += g[j];
                        sum_gx[ci] += g[j] * xhat[j];
                    }
                }
            }
            if tracked(*x) {
                add_into(&mut grads[*x], g.len(), |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            let scale = gam[ci] * inv_std[ci];
                            for j in off..off + plane {
                                if *train {
                                    d[j] += scale * (g[j] - sum_g[ci] / m - xhat[j] * sum_gx[ci] / m);
                                } else {
                                    d[j] += scale * g[j];
                                }
                            }
                        }
                    }
                });
            }
            if tracked(*gamma) {
                add_into(&mut grads[*gamma], c, |d| d.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v));
            }
            if tracked(*beta) {
                add_into(&mut grads[*beta], c, |d| d.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v));
            }
        }
        Op::SliceRows { x, start } => {
            let w = numel(&nodes[*x].shape[1..]);
            let off = start * w;
            add_into(&mut grads[*x], len(*x), |d| {
                d[off..off + g.len()].iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            });
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let l = len(p);
                if tracked(p) {
                    let src = &g[off..off + l];
                    add_into(&mut grads[p], l, |d| d.iter_mut().zip(src).for_each(|(d, &g)| *d += g));
                }
                off += l;
            }
        }
        Op::ConcatCols(parts) => {
            let n = node.shape[0];
            let total = node.shape[1];
            let mut col = 0;
            for &p in parts {
                let f = nodes[p].shape[1];
                if tracked(p) {
                    add_into(&mut grads[p], n * f, |d| {
                        for r in 0..n {
                            let src = &g[r * total + col..r * total + col + f];
                            d[r * f..(r + 1) * f].iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                        }
                    });
                }
                col += f;
            }
        }
        Op::RowNorm(a) => {
            let xv = &nodes[*a].value;
            let f = nodes[*a].shape[1];
            let norms = &node.value;
            add_into(&mut grads[*a], xv.len(), |d| {
                for (r, &nr) in norms.iter().enumerate() {
                    if nr > T::zero() {
                        let s = g[r] / nr;
                        for j in r * f..(r + 1) * f {
                            d[j] += s * xv[j];
                        }
                    }
                }
            });
        }
        Op::RowCosine { a, b, na, nb } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let f = nodes[*a].shape[1];
            let cos = &node.value;
            for (this, other, nt, no) in [(*a, bv, na, nb), (*b, av, nb, na)] {
                if !tracked(this) {
                    continue;
                }
                let tv = &nodes[this].value;
                add_into(&mut grads[this], tv.len(), |d| {
                    for r in 0..cos.len() {
                        let denom = nt[r] * no[r];
                        if denom > T::zero() {
                            let inv = g[r] / denom;
                            let self_term = g[r] * cos[r] / (nt[r] * nt[r]);
                            for j in r * f..(r + 1) * f {
                                d[j] += inv * other[j] - self_term * tv[j];
                            }
                        }
                    }
                });
            }
        }
        Op::DiffW(a) => {
            let s = &nodes[*a].shape;
            let w = s[3];
            let rows = numel(&s[..3]);
            add_into(&mut grads[*a], len(*a), |d| {
                for r in 0..rows {
                    for j in 0..w - 1 {
                        let gv = g[r * (w - 1) + j];
                        d[r * w + j + 1] += gv;
                        d[r * w + j] -= gv;
                    }
                }
            });
        }
        Op::DiffH(a) => {
            let s = &nodes[*a].shape;
            let (h, w) = (s[2], s[3]);
            let planes = s[0] * s[1];
            add_into(&mut grads[*a], len(*a), |d| {
                for p in 0..planes {
                    for i in 0..h - 1 {
                        for j in 0..w {
                            let gv = g[p * (h - 1) * w + i * w + j];
                            d[p * h * w + (i + 1) * w + j] += gv;
                            d[p * h * w + i * w + j] -= gv;
                        }
                    }
                }
            });
        }
    }
}

/// Samples `[s0, s1)` of `x` unfolded side by side into one column matrix.
fn unfold_chunk<T: Element>(geom: &ConvGeom, x: &[T], s0: usize, s1: usize, cols: &mut Vec<T>) -> usize {
    let (in_len, plane) = (geom.c * geom.h * geom.w, geom.out_plane());
    let ld = (s1 - s0) * plane;
    cols.resize(geom.patch() * ld, T::zero());
    for (j, ni) in (s0..s1).enumerate() {
        im2col(geom, &x[ni * in_len..(ni + 1) * in_len], cols, ld, j * plane);
    }
    ld
}

fn conv_forward<T: Element>(geom: &ConvGeom, x: &[T], k: &[T]) -> Vec<T> {
    let (patch, plane, o) = (geom.patch(), geom.out_plane(), geom.o);
    let mut y = vec![T::zero(); geom.n * o * plane];
    let mut cols = Vec::new();
    let mut out = Vec::new();
    let step = chunk_len(geom);
    for s0 in (0..geom.n).step_by(step) {
        let s1 = (s0 + step).min(geom.n);
        let ld = unfold_chunk(geom, x, s0, s1, &mut cols);
        if s1 - s0 == 1 {
            gemm(false, false, o, patch, ld, k, &cols, T::zero(), &mut y[s0 * o * plane..s1 * o * plane]);
            continue;
        }
        out.resize(o * ld, T::zero());
        gemm(false, false, o, patch, ld, k, &cols, T::zero(), &mut out);
        // [O, B*plane] -> [B, O, plane]
        for (j, ni) in (s0..s1).enumerate() {
            for oi in 0..o {
                let src = &out[oi * ld + j * plane..oi * ld + (j + 1) * plane];
                y[(ni * o + oi) * plane..(ni * o + oi + 1) * plane].copy_from_slice(src);
            }
        }
    }
    y
}

fn conv_backward<T: Element>(
    nodes: &[Node<T>],
    x: usize,
    k: usize,
    b: Option<usize>,
    geom: &ConvGeom,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (patch, plane, o) = (geom.patch(), geom.out_plane(), geom.o);
    let in_len = geom.c * geom.h * geom.w;
    let xv = &nodes[x].value;
    let kv = &nodes[k].value;
    let want_dk = nodes[k].tracked;
    let want_dx = nodes[x].tracked;
    let step = chunk_len(geom);
    let mut cols = Vec::new();
    let mut gchunk = Vec::new();
    let mut dk = want_dk.then(|| grads[k].take().unwrap_or_else(|| vec![T::zero(); kv.len()]));
    let mut dx = want_dx.then(|| grads[x].take().unwrap_or_else(|| vec![T::zero(); xv.len()]));
    for s0 in (0..geom.n).step_by(step) {
        let s1 = (s0 + step).min(geom.n);
        let ld = (s1 - s0) * plane;
        // upstream gradient as [O, B*plane]
        gchunk.resize(o * ld, T::zero());
        for (j, ni) in (s0..s1).enumerate() {
            for oi in 0..o {
                let src = &g[(ni * o + oi) * plane..(ni * o + oi + 1) * plane];
                gchunk[oi * ld + j * plane..oi * ld + (j + 1) * plane].copy_from_slice(src);
            }
        }
        if let Some(dk) = dk.as_mut() {
            unfold_chunk(geom, xv, s0, s1, &mut cols);
            gemm(false, true, o, ld, patch, &gchunk, &cols, T::one(), dk);
        }
        if let Some(dx) = dx.as_mut() {
            cols.resize(patch * ld, T::zero());
            gemm(true, false, patch, o, ld, kv, &gchunk, T::zero(), &mut cols);
            for (j, ni) in (s0..s1).enumerate() {
                col2im(geom, &cols, ld, j * plane, &mut dx[ni * in_len..(ni + 1) * in_len]);
            }
        }
    }
    if let Some(dk) = dk {
        grads[k] = Some(dk);
    }
    if let Some(dx) = dx {
        grads[x] = Some(dx);
    }
    if let Some(b) = b {
        if nodes[b].tracked {
            add_into(&mut grads[b], o, |d| {
                for (p, chunk) in g.chunks_exact(plane).enumerate() {
                    d[p % o] += chunk.iter().copied().sum::<T>();
                }
            });
        }
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Vec<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> T {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].value[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    fn tracked_any(&self, ids: &[usize]) -> bool {
        let nodes = self.tape.nodes.borrow();
        ids.iter().any(|&i| nodes[i].tracked)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables recorded on different tapes");
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape, b.shape)));
            }
            (a.shape.clone(), a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect())
        };
        let tracked = self.tracked_any(&[self.id, other.id]);
        self.tape.push(shape, value, op(self.id, other.id), tracked)
    }

    fn unary(self, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.shape.clone(), a.value.iter().map(|&x| f(x)).collect(), a.tracked)
        };
        self.tape.push(shape, value, op, tracked)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(self, s: T) -> Result<Var<'t, T>> {
        self.unary(|x| x * s, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: T) -> Result<Var<'t, T>> {
        self.unary(|x| x + s, Op::AddScalar(self.id))
    }

    pub fn abs(self) -> Result<Var<'t, T>> {
        self.unary(|x| x.abs(), Op::Abs(self.id))
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(|x| if x > T::zero() { x } else { T::zero() }, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary(
            |x| {
                // split by sign so exp never overflows
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let (value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.value.iter().copied().sum::<T>(), a.tracked)
        };
        self.tape.push(vec![1], vec![value], Op::Sum(self.id), tracked)
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = T::from_usize(self.numel()).unwrap();
        self.sum()?.scale(T::one() / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let (value, tracked, old) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.value.clone(), a.tracked, a.shape.clone())
        };
        if numel(shape) != value.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{old:?} -> {shape:?}")));
        }
        self.tape.push(shape.to_vec(), value, Op::Reshape(self.id), tracked)
    }

    /// Collapses all trailing axes: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten_rows(self) -> Result<Var<'t, T>> {
        let s = self.shape();
        self.reshape(&[s[0], numel(&s[1..])])
    }

    /// `x W^T + b` with `x: [N, I]`, `W: [O, I]`, `b: [O]`.
    pub fn fully_connected(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        self.same_tape(&w);
        let (shape, value, n, i, o) = {
            let nodes = self.tape.nodes.borrow();
            let (xn, wn) = (&nodes[self.id], &nodes[w.id]);
            if xn.shape.len() != 2 || wn.shape.len() != 2 || xn.shape[1] != wn.shape[1] {
                return Err(Error::shape("fully_connected", format!("input {:?} vs weight {:?}", xn.shape, wn.shape)));
            }
            let (n, i, o) = (xn.shape[0], xn.shape[1], wn.shape[0]);
            let mut y = vec![T::zero(); n * o];
            gemm(false, true, n, i, o, &xn.value, &wn.value, T::zero(), &mut y);
            if let Some(b) = &b {
                let bn = &nodes[b.id];
                if bn.shape != [o] {
                    return Err(Error::shape("fully_connected", format!("bias {:?} vs {o} outputs", bn.shape)));
                }
                for row in y.chunks_exact_mut(o) {
                    row.iter_mut().zip(&bn.value).for_each(|(y, &b)| *y += b);
                }
            }
            (vec![n, o], y, n, i, o)
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let tracked = self.tracked_any(&ids);
        self.tape.push(shape, value, Op::Linear { x: self.id, w: w.id, b: b.map(|b| b.id), n, i, o }, tracked)
    }

    /// Zero-padded 2-D cross-correlation, NCHW input with OIHW kernel.
    pub fn conv2d(self, kernel: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        self.same_tape(&kernel);
        let (geom, value) = {
            let nodes = self.tape.nodes.borrow();
            let (xn, kn) = (&nodes[self.id], &nodes[kernel.id]);
            let (xs, ks) = (&xn.shape, &kn.shape);
            if xs.len() != 4 || ks.len() != 4 {
                return Err(Error::shape("conv2d", format!("need 4-d input and kernel, got {xs:?} and {ks:?}")));
            }
            if xs[1] != ks[1] {
                return Err(Error::shape("conv2d", format!("input has {} channels, kernel expects {}", xs[1], ks[1])));
            }
            let geom = ConvGeom { n: xs[0], c: xs[1], h: xs[2], w: xs[3], o: ks[0], kh: ks[2], kw: ks[3], stride, pad };
            if conv_out_len(geom.h, geom.kh, stride, pad).is_none()
                || conv_out_len(geom.w, geom.kw, stride, pad).is_none()
            {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "kernel {}x{} exceeds padded input {}x{} (pad {pad}, stride {stride})",
                        geom.kh, geom.kw, geom.h, geom.w
                    ),
                ));
            }
            let mut y = conv_forward(&geom, &xn.value, &kn.value);
            if let Some(b) = &bias {
                let bn = &nodes[b.id];
                if bn.shape != [geom.o] {
                    return Err(Error::shape("conv2d", format!("bias {:?} vs {} output channels", bn.shape, geom.o)));
                }
                for (p, chunk) in y.chunks_exact_mut(geom.out_plane()).enumerate() {
                    let bv = bn.value[p % geom.o];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
            (geom, y)
        };
        let mut ids = vec![self.id, kernel.id];
        ids.extend(bias.map(|b| b.id));
        let tracked = self.tracked_any(&ids);
        let shape = vec![geom.n, geom.o, geom.out_h(), geom.out_w()];
        self.tape.push(shape, value, Op::Conv2d { x: self.id, k: kernel.id, b: bias.map(|b| b.id), geom }, tracked)
    }

    /// Nearest-neighbour x2 upsampling of both spatial axes.
    pub fn upsample2x(self) -> Result<Var<'t, T>> {
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 4 {
                return Err(Error::shape("upsample2x", format!("need NCHW input, got {:?}", a.shape)));
            }
            let (h, w) = (a.shape[2], a.shape[3]);
            let mut y = vec![T::zero(); a.value.len() * 4];
            for (p, src) in a.value.chunks_exact(h * w).enumerate() {
                let dst = &mut y[p * 4 * h * w..(p + 1) * 4 * h * w];
                for r in 0..2 * h {
                    for c in 0..2 * w {
                        dst[r * 2 * w + c] = src[(r / 2) * w + c / 2];
                    }
                }
            }
            (vec![a.shape[0], a.shape[1], 2 * h, 2 * w], y, a.tracked)
        };
        self.tape.push(shape, value, Op::Upsample2x(self.id), tracked)
    }

    /// Training-mode batch norm over `[N, C, ...]`: normalizes each channel
    /// over batch and spatial axes, then applies `gamma`/`beta`.
    ///
    /// Returns the batch statistics so the caller can update running stats.
    #[allow(clippy::needless_range_loop)]
    pub fn batch_norm_train(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: T,
    ) -> Result<(Var<'t, T>, ChannelStats<T>)> {
        let (shape, n, c, plane) = self.bn_dims(&gamma, &beta)?;
        let m = n * plane;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let (value, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mf = T::from_usize(m).unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * plane;
                    mean[ci] += x[off..off + plane].iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|v| *v = *v / mf);
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * plane;
                    var[ci] += x[off..off + plane].iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<T>();
                }
            }
            let biased: Vec<T> = var.iter().map(|&s| s / mf).collect();
            let inv_std: Vec<T> = biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let unbiased = if m > 1 { T::from_usize(m - 1).unwrap() } else { T::one() };
            var.iter_mut().for_each(|v| *v = *v / unbiased);
            let (y, xhat) = self.bn_apply(&nodes, n, c, plane, &mean, &inv_std, gamma.id, beta.id);
            (y, xhat, inv_std)
        };
        let tracked = self.tracked_any(&[self.id, gamma.id, beta.id]);
        let op = Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, train: true };
        let out = self.tape.push(shape, value, op, tracked)?;
        Ok((out, ChannelStats { mean, var }))
    }

    /// Evaluation-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var<'t, T>> {
        let (shape, n, c, plane) = self.bn_dims(&gamma, &beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats for {} channels, input has {c}", running_mean.len()),
            ));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (value, xhat) = {
            let nodes = self.tape.nodes.borrow();
            self.bn_apply(&nodes, n, c, plane, running_mean, &inv_std, gamma.id, beta.id)
        };
        let tracked = self.tracked_any(&[self.id, gamma.id, beta.id]);
        let op = Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, train: false };
        self.tape.push(shape, value, op, tracked)
    }

    fn bn_dims(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>) -> Result<(Vec<usize>, usize, usize, usize)> {
        let nodes = self.tape.nodes.borrow();
        let s = &nodes[self.id].shape;
        if s.len() < 2 {
            return Err(Error::shape("batch_norm", format!("need [N, C, ...] input, got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        if n == 0 {
            return Err(Error::shape("batch_norm", "empty batch"));
        }
        if nodes[gamma.id].shape != [c] || nodes[beta.id].shape != [c] {
            return Err(Error::shape("batch_norm", format!("affine params must have shape [{c}]")));
        }
        Ok((s.clone(), n, c, numel(&s[2..])))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        nodes: &[Node<T>],
        n: usize,
        c: usize,
        plane: usize,
        mean: &[T],
        inv_std: &[T],
        gamma: usize,
        beta: usize,
    ) -> (Vec<T>, Vec<T>) {
        let x = &nodes[self.id].value;
        let (g, b) = (&nodes[gamma].value, &nodes[beta].value);
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                for j in off..off + plane {
                    xhat[j] = (x[j] - mean[ci]) * inv_std[ci];
                    y[j] = g[ci] * xhat[j] + b[ci];
                }
            }
        }
        (y, xhat)
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if len == 0 || start + len > a.shape[0] {
                return Err(Error::shape("slice_rows", format!("rows {start}..{} of {}", start + len, a.shape[0])));
            }
            let w = numel(&a.shape[1..]);
            let mut shape = a.shape.clone();
            shape[0] = len;
            (shape, a.value[start * w..(start + len) * w].to_vec(), a.tracked)
        };
        self.tape.push(shape, value, Op::SliceRows { x: self.id, start }, tracked)
    }

    /// Stacks variables along the leading axis.
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "nothing to concat"))?;
        let (shape, value) = {
            let nodes = first.tape.nodes.borrow();
            let tail = nodes[first.id].shape[1..].to_vec();
            let mut rows = 0;
            let mut value = Vec::new();
            for p in parts {
                first.same_tape(p);
                let n = &nodes[p.id];
                if n.shape[1..] != tail[..] {
                    return Err(Error::shape("concat_rows", format!("{:?} vs {:?}", n.shape, nodes[first.id].shape)));
                }
                rows += n.shape[0];
                value.extend_from_slice(&n.value);
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            (shape, value)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let tracked = first.tracked_any(&ids);
        first.tape.push(shape, value, Op::ConcatRows(ids), tracked)
    }

    /// Joins `[N, F_i]` matrices side by side into `[N, sum F_i]`.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "nothing to concat"))?;
        let (shape, value) = {
            let nodes = first.tape.nodes.borrow();
            let n = nodes[first.id].shape[0];
            let mut total = 0;
            for p in parts {
                first.same_tape(p);
                let s = &nodes[p.id].shape;
                if s.len() != 2 || s[0] != n {
                    return Err(Error::shape("concat_cols", format!("{s:?} vs {} rows", n)));
                }
                total += s[1];
            }
            let mut value = Vec::with_capacity(n * total);
            for r in 0..n {
                for p in parts {
                    let f = nodes[p.id].shape[1];
                    value.extend_from_slice(&nodes[p.id].value[r * f..(r + 1) * f]);
                }
            }
            (vec![n, total], value)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let tracked = first.tracked_any(&ids);
        first.tape.push(shape, value, Op::ConcatCols(ids), tracked)
    }

    /// Euclidean norm of each row of a `[N, F]` matrix, shape `[N]`.
    ///
    /// The gradient at a zero row is taken as zero.
    pub fn row_norm(self) -> Result<Var<'t, T>> {
        let (n, value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 2 {
                return Err(Error::shape("row_norm", format!("need [N, F], got {:?}", a.shape)));
            }
            let f = a.shape[1];
            let v: Vec<T> = a.value.chunks_exact(f).map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
            (a.shape[0], v, a.tracked)
        };
        self.tape.push(vec![n], value, Op::RowNorm(self.id), tracked)
    }

    /// Cosine similarity between matching rows of two `[N, F]` matrices.
    ///
    /// A row pair where either side has zero norm yields 0 with zero gradient.
    pub fn row_cosine(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (n, value, na, nb) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || a.shape != b.shape {
                return Err(Error::shape("row_cosine", format!("{:?} vs {:?}", a.shape, b.shape)));
            }
            let f = a.shape[1];
            let norm =
                |v: &[T]| -> Vec<T> { v.chunks_exact(f).map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt()).collect() };
            let (na, nb) = (norm(&a.value), norm(&b.value));
            let cos = a
                .value
                .chunks_exact(f)
                .zip(b.value.chunks_exact(f))
                .enumerate()
                .map(|(r, (ra, rb))| {
                    let d = na[r] * nb[r];
                    if d > T::zero() {
                        ra.iter().zip(rb).map(|(&x, &y)| x * y).sum::<T>() / d
                    } else {
                        T::zero()
                    }
                })
                .collect();
            (a.shape[0], cos, na, nb)
        };
        let tracked = self.tracked_any(&[self.id, other.id]);
        self.tape.push(vec![n], value, Op::RowCosine { a: self.id, b: other.id, na, nb }, tracked)
    }

    /// Horizontal forward differences `x[.., j+1] - x[.., j]` of an NCHW tensor.
    pub fn diff_w(self) -> Result<Var<'t, T>> {
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 4 || a.shape[3] < 2 {
                return Err(Error::shape("diff_w", format!("need NCHW with W >= 2, got {:?}", a.shape)));
            }
            let w = a.shape[3];
            let v: Vec<T> = a.value.chunks_exact(w).flat_map(|r| r.windows(2).map(|p| p[1] - p[0])).collect();
            let mut s = a.shape.clone();
            s[3] = w - 1;
            (s, v, a.tracked)
        };
        self.tape.push(shape, value, Op::DiffW(self.id), tracked)
    }

    /// Vertical forward differences `x[.., i+1, :] - x[.., i, :]`.
    pub fn diff_h(self) -> Result<Var<'t, T>> {
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 4 || a.shape[2] < 2 {
                return Err(Error::shape("diff_h", format!("need NCHW with H >= 2, got {:?}", a.shape)));
            }
            let (h, w) = (a.shape[2], a.shape[3]);
            let mut v = Vec::with_capacity(a.value.len() / h * (h - 1));
            for plane in a.value.chunks_exact(h * w) {
                for i in 0..h - 1 {
                    for j in 0..w {
                        v.push(plane[(i + 1) * w + j] - plane[i * w + j]);
                    }
                }
            }
            let mut s = a.shape.clone();
            s[2] = h - 1;
            (s, v, a.tracked)
        };
        self.tape.push(shape, value, Op::DiffH(self.id), tracked)
    }
}
