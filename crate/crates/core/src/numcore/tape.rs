//! Dynamically recorded reverse-mode tape over dense `f64` tensors.
//!
//! Every op appends a node holding its output and enough saved state to
//! run the vector-Jacobian product later. A [`Value`] is a cheap copyable
//! handle into one tape; handles from different tapes must never be mixed.
//! Nodes built only from constants carry `needs_grad = false` and are
//! skipped entirely during the backward sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::params::{ParamId, ParamStore};
use super::{NumError, Tensor};

/// Logit written into masked positions. Softmax-style ops treat any entry at
/// or below this value as excluded.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Neg,
    Relu,
    Tanh,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Square,
    Scale(f64),
    Offset(f64),
    Clamp(f64, f64),
    WrapAngle,
}

enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    /// `a · bᵀ`
    MatMulT {
        a: usize,
        b: usize,
    },
    SumAll(usize),
    SumLast(usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        last_axis: bool,
    },
    GatherRows {
        src: usize,
        idx: Vec<usize>,
    },
    ScatterRows {
        base: usize,
        upd: usize,
        idx: Vec<usize>,
    },
    SliceLast {
        src: usize,
        start: usize,
    },
    MaskFill {
        src: usize,
        mask: Vec<bool>,
    },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    HeadDot {
        q: usize,
        k: usize,
        heads: usize,
        scale: f64,
    },
    HeadMix {
        alpha: usize,
        v: usize,
        heads: usize,
    },
    Sinusoid {
        x: usize,
        freqs: Vec<f64>,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Nll {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SmoothL1 {
        a: usize,
        b: usize,
        delta: f64,
    },
    ClampEach {
        x: usize,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Value<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Accumulated gradients of one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        let off = rank - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    let mut out = Vec::with_capacity(rank);
    for i in 0..rank {
        let (da, db) = (dim(a, i), dim(b, i));
        out.push(if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        });
    }
    Some(out)
}

/// Maps every flat index of `out` to the flat index of `src` it reads from,
/// or `None` when the shapes are identical.
fn broadcast_map(out: &[usize], src: &[usize]) -> Option<Vec<usize>> {
    if out == src {
        return None;
    }
    let rank = out.len();
    let off = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        if i >= off {
            let d = src[i - off];
            strides[i] = if d == 1 { 0 } else { acc };
            acc *= d;
        }
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..numel {
        map.push(idx);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            idx += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            idx -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Some(map)
}

fn wrap_angle(a: f64) -> f64 {
    crate::geom::wrap_angle(a)
}

/// `c = a · b` for row-major `a: [m, k]`, `b: [k, n]`, with optional transposes
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    // a is stored [m,k] (or [k,m] when transposed), b is [k,n] (or [n,k]).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Value<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Value {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Non-differentiable input.
    pub fn constant(&self, t: Tensor) -> Value<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Differentiable input that is not a registered parameter.
    pub fn leaf(&self, t: Tensor) -> Value<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    pub fn scalar(&self, v: f64) -> Value<'_> {
        self.constant(Tensor::scalar(v))
    }

    pub fn vector(&self, v: Vec<f64>) -> Value<'_> {
        self.constant(Tensor::from_vec(v))
    }

    pub fn zeros(&self, shape: &[usize]) -> Value<'_> {
        self.constant(Tensor::zeros(shape))
    }

    /// Inserts a parameter, reusing the node if it was already inserted on
    /// this tape.
    pub fn param<'t>(&'t self, store: &ParamStore, id: ParamId) -> Value<'t> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Value { tape: self, id: node };
        }
        let t = store.get(id).clone();
        let v = self.leaf(t);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Reads out the gradient of every parameter of `store` (zeros for
    /// parameters that never entered this tape).
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        let params = self.params.borrow();
        store
            .ids()
            .map(|id| {
                let shape = store.get(id).shape().to_vec();
                match params.get(&id).and_then(|&n| grads.grads.get(n)).and_then(|g| g.as_ref()) {
                    Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect()
    }

    /// Runs the backward sweep from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Value<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let n = root.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0; nodes[root.id].data.len()]);

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
            if !nodes[id].needs_grad {
                return None;
            }
            let len = nodes[id].data.len();
            Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
        }

        for i in (0..n).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Binary {
                    kind,
                    a,
                    b,
                    map_a,
                    map_b,
                } => {
                    let (a, b) = (*a, *b);
                    let ad = &nodes[a].data;
                    let bd = &nodes[b].data;
                    let ia = |o: usize| map_a.as_ref().map_or(o, |m| m[o]);
                    let ib = |o: usize| map_b.as_ref().map_or(o, |m| m[o]);
                    if let Some(ga) = acc(&mut grads, &nodes, a) {
                        for (o, go) in g.iter().enumerate() {
                            ga[ia(o)] += match kind {
                                BinKind::Add | BinKind::Sub => *go,
                                BinKind::Mul => go * bd[ib(o)],
                                BinKind::Div => go / bd[ib(o)],
                            };
                        }
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, b) {
                        for (o, go) in g.iter().enumerate() {
                            gb[ib(o)] += match kind {
                                BinKind::Add => *go,
                                BinKind::Sub => -go,
                                BinKind::Mul => go * ad[ia(o)],
                                BinKind::Div => {
                                    let bv = bd[ib(o)];
                                    -go * ad[ia(o)] / (bv * bv)
                                }
                            };
                        }
                    }
                }
                Op::Unary { kind, x } => {
                    let xd = &nodes[*x].data;
                    let yd = &node.data;
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for o in 0..g.len() {
                            let go = g[o];
                            gx[o] += match *kind {
                                UnaryKind::Neg => -go,
                                UnaryKind::Relu => {
                                    if xd[o] > 0.0 {
                                        go
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Tanh => go * (1.0 - yd[o] * yd[o]),
                                UnaryKind::Exp => go * yd[o],
                                UnaryKind::Log => go / xd[o],
                                UnaryKind::Sin => go * xd[o].cos(),
                                UnaryKind::Cos => -go * xd[o].sin(),
                                UnaryKind::Sqrt => go * 0.5 / yd[o],
                                UnaryKind::Square => 2.0 * go * xd[o],
                                UnaryKind::Scale(c) => go * c,
                                UnaryKind::Offset(_) | UnaryKind::WrapAngle => go,
                                UnaryKind::Clamp(lo, hi) => {
                                    if xd[o] >= lo && xd[o] <= hi {
                                        go
                                    } else {
                                        0.0
                                    }
                                }
                            };
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
                    let nn = nodes[b].shape[1];
                    if nodes[a].needs_grad {
                        let bd = &nodes[b].data;
                        let ga = acc(&mut grads, &nodes, a).unwrap();
                        // dA = G · Bᵀ
                        gemm(m, nn, k, &g, false, bd, true, ga, 1.0);
                    }
                    if nodes[b].needs_grad {
                        let ad = &nodes[a].data;
                        let gb = acc(&mut grads, &nodes, b).unwrap();
                        // dB = Aᵀ · G
                        gemm(k, m, nn, ad, true, &g, false, gb, 1.0);
                    }
                }
                Op::MatMulT { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
                    let nn = nodes[b].shape[0];
                    if m > 0 && nn > 0 && k > 0 {
                        if nodes[a].needs_grad {
                            let bd = &nodes[b].data;
                            let ga = acc(&mut grads, &nodes, a).unwrap();
                            // dA = G · B
                            gemm(m, nn, k, &g, false, bd, false, ga, 1.0);
                        }
                        if nodes[b].needs_grad {
                            let ad = &nodes[a].data;
                            let gb = acc(&mut grads, &nodes, b).unwrap();
                            // dB = Gᵀ · A
                            gemm(nn, m, k, &g, true, ad, false, gb, 1.0);
                        }
                    }
                }
                Op::SumAll(x) => {
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for v in gx.iter_mut() {
                            *v += g[0];
                        }
                    }
                }
                Op::SumLast(x) => {
                    let w = *nodes[*x].shape.last().unwrap_or(&1);
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (r, go) in g.iter().enumerate() {
                            for v in &mut gx[r * w..(r + 1) * w] {
                                *v += go;
                            }
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (a, b) in gx.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                }
                Op::Concat { inputs, last_axis } => {
                    if *last_axis {
                        let out_w = *node.shape.last().unwrap();
                        let rows = g.len() / out_w.max(1);
                        let mut col = 0;
                        for &inp in inputs {
                            let w = *nodes[inp].shape.last().unwrap();
                            if let Some(gx) = acc(&mut grads, &nodes, inp) {
                                for r in 0..rows {
                                    for c in 0..w {
                                        gx[r * w + c] += g[r * out_w + col + c];
                                    }
                                }
                            }
                            col += w;
                        }
                    } else {
                        let mut off = 0;
                        for &inp in inputs {
                            let len = nodes[inp].data.len();
                            if let Some(gx) = acc(&mut grads, &nodes, inp) {
                                for (a, b) in gx.iter_mut().zip(&g[off..off + len]) {
                                    *a += b;
                                }
                            }
                            off += len;
                        }
                    }
                }
                Op::GatherRows { src, idx } => {
                    let row: usize = nodes[*src].shape[1..].iter().product();
                    if let Some(gs) = acc(&mut grads, &nodes, *src) {
                        for (r, &s) in idx.iter().enumerate() {
                            for c in 0..row {
                                gs[s * row + c] += g[r * row + c];
                            }
                        }
                    }
                }
                Op::ScatterRows { base, upd, idx } => {
                    let row: usize = node.shape[1..].iter().product();
                    if let Some(gb) = acc(&mut grads, &nodes, *base) {
                        let mut replaced = vec![false; node.shape[0]];
                        for &s in idx {
                            replaced[s] = true;
                        }
                        for (r, rep) in replaced.iter().enumerate() {
                            if !rep {
                                for c in 0..row {
                                    gb[r * row + c] += g[r * row + c];
                                }
                            }
                        }
                    }
                    if let Some(gu) = acc(&mut grads, &nodes, *upd) {
                        for (r, &s) in idx.iter().enumerate() {
                            for c in 0..row {
                                gu[r * row + c] += g[s * row + c];
                            }
                        }
                    }
                }
                Op::SliceLast { src, start } => {
                    let w_in = *nodes[*src].shape.last().unwrap();
                    let w = *node.shape.last().unwrap();
                    let rows = if w == 0 { 0 } else { g.len() / w };
                    if let Some(gs) = acc(&mut grads, &nodes, *src) {
                        for r in 0..rows {
                            for c in 0..w {
                                gs[r * w_in + start + c] += g[r * w + c];
                            }
                        }
                    }
                }
                Op::MaskFill { src, mask } => {
                    if let Some(gs) = acc(&mut grads, &nodes, *src) {
                        for (o, m) in mask.iter().enumerate() {
                            if !m {
                                gs[o] += g[o];
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    let w = *node.shape.last().unwrap();
                    let y = &node.data;
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for r in 0..y.len() / w.max(1) {
                            let ys = &y[r * w..(r + 1) * w];
                            let gs = &g[r * w..(r + 1) * w];
                            let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                            for c in 0..w {
                                gx[r * w + c] += ys[c] * (gs[c] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let w = *node.shape.last().unwrap();
                    let rows = rstd.len();
                    let gd = nodes[*gain].data.clone();
                    if nodes[*x].needs_grad {
                        let gx = acc(&mut grads, &nodes, *x).unwrap();
                        for r in 0..rows {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..w {
                                let d = g[r * w + c] * gd[c];
                                mean_d += d;
                                mean_dx += d * xhat[r * w + c];
                            }
                            mean_d /= w as f64;
                            mean_dx /= w as f64;
                            for c in 0..w {
                                let d = g[r * w + c] * gd[c];
                                gx[r * w + c] += rstd[r] * (d - mean_d - xhat[r * w + c] * mean_dx);
                            }
                        }
                    }
                    if let Some(gg) = acc(&mut grads, &nodes, *gain) {
                        for r in 0..rows {
                            for c in 0..w {
                                gg[c] += g[r * w + c] * xhat[r * w + c];
                            }
                        }
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *bias) {
                        for r in 0..rows {
                            for c in 0..w {
                                gb[c] += g[r * w + c];
                            }
                        }
                    }
                }
                Op::HeadDot { q, k, heads, scale } => {
                    let (q, k) = (*q, *k);
                    let n = nodes[q].shape[0];
                    let d = nodes[q].shape[1];
                    let kk = node.shape[2];
                    let dh = d / heads;
                    if nodes[q].needs_grad {
                        let kd = &nodes[k].data;
                        let gq = acc(&mut grads, &nodes, q).unwrap();
                        for i in 0..n {
                            for h in 0..*heads {
                                for j in 0..kk {
                                    let go = g[(i * heads + h) * kk + j] * scale;
                                    if go == 0.0 {
                                        continue;
                                    }
                                    let krow = &kd[(i * kk + j) * d + h * dh..(i * kk + j) * d + (h + 1) * dh];
                                    let qrow = &mut gq[i * d + h * dh..i * d + (h + 1) * dh];
                                    for (a, b) in qrow.iter_mut().zip(krow) {
                                        *a += go * b;
                                    }
                                }
                            }
                        }
                    }
                    if nodes[k].needs_grad {
                        let qd = &nodes[q].data;
                        let gk = acc(&mut grads, &nodes, k).unwrap();
                        for i in 0..n {
                            for h in 0..*heads {
                                for j in 0..kk {
                                    let go = g[(i * heads + h) * kk + j] * scale;
                                    if go == 0.0 {
                                        continue;
                                    }
                                    let qrow = &qd[i * d + h * dh..i * d + (h + 1) * dh];
                                    let krow = &mut gk[(i * kk + j) * d + h * dh..(i * kk + j) * d + (h + 1) * dh];
                                    for (a, b) in krow.iter_mut().zip(qrow) {
                                        *a += go * b;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::HeadMix { alpha, v, heads } => {
                    let (alpha, v) = (*alpha, *v);
                    let n = node.shape[0];
                    let d = node.shape[1];
                    let kk = nodes[alpha].shape[2];
                    let dh = d / heads;
                    if nodes[alpha].needs_grad {
                        let vd = &nodes[v].data;
                        let ga = acc(&mut grads, &nodes, alpha).unwrap();
                        for i in 0..n {
                            for h in 0..*heads {
                                let grow = &g[i * d + h * dh..i * d + (h + 1) * dh];
                                for j in 0..kk {
                                    let vrow = &vd[(i * kk + j) * d + h * dh..(i * kk + j) * d + (h + 1) * dh];
                                    ga[(i * heads + h) * kk + j] +=
                                        grow.iter().zip(vrow).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                    if nodes[v].needs_grad {
                        let ad = &nodes[alpha].data;
                        let gv = acc(&mut grads, &nodes, v).unwrap();
                        for i in 0..n {
                            for h in 0..*heads {
                                let grow = &g[i * d + h * dh..i * d + (h + 1) * dh];
                                for j in 0..kk {
                                    let a = ad[(i * heads + h) * kk + j];
                                    if a == 0.0 {
                                        continue;
                                    }
                                    let vrow = &mut gv[(i * kk + j) * d + h * dh..(i * kk + j) * d + (h + 1) * dh];
                                    for (x, y) in vrow.iter_mut().zip(grow) {
                                        *x += a * y;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Sinusoid { x, freqs } => {
                    let xd = &nodes[*x].data;
                    let f = freqs.len();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (r, xv) in xd.iter().enumerate() {
                            let mut s = 0.0;
                            for (fi, w) in freqs.iter().enumerate() {
                                let a = xv * w;
                                s += w * (a.cos() * g[r * 2 * f + 2 * fi] - a.sin() * g[r * 2 * f + 2 * fi + 1]);
                            }
                            gx[r] += s;
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (o, &src) in argmax.iter().enumerate() {
                            if src != usize::MAX {
                                gx[src] += g[o];
                            }
                        }
                    }
                }
                Op::Nll {
                    logits,
                    labels,
                    probs,
                } => {
                    let m = nodes[*logits].shape[1];
                    if let Some(gl) = acc(&mut grads, &nodes, *logits) {
                        for (a, &lab) in labels.iter().enumerate() {
                            for c in 0..m {
                                let ind = if c == lab { 1.0 } else { 0.0 };
                                gl[a * m + c] += g[a] * (probs[a * m + c] - ind);
                            }
                        }
                    }
                }
                Op::SmoothL1 { a, b, delta } => {
                    let (a, b) = (*a, *b);
                    let diff: Vec<f64> = nodes[a]
                        .data
                        .iter()
                        .zip(&nodes[b].data)
                        .map(|(x, y)| x - y)
                        .collect();
                    let dl: Vec<f64> = diff
                        .iter()
                        .zip(&g)
                        .map(|(d, go)| {
                            go * if d.abs() < *delta {
                                d / delta
                            } else {
                                d.signum()
                            }
                        })
                        .collect();
                    if let Some(ga) = acc(&mut grads, &nodes, a) {
                        for (x, y) in ga.iter_mut().zip(&dl) {
                            *x += y;
                        }
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, b) {
                        for (x, y) in gb.iter_mut().zip(&dl) {
                            *x -= y;
                        }
                    }
                }
                Op::ClampEach { x, lo, hi } => {
                    let xd = &nodes[*x].data;
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for o in 0..g.len() {
                            if xd[o] >= lo[o] && xd[o] <= hi[o] {
                                gx[o] += g[o];
                            }
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if it was reached.
    pub fn get(&self, v: Value<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Value<'_>) -> Tensor {
        let shape = v.shape();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

impl<'t> Value<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.tape.nodes.borrow()[self.id].shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].data.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].data.clone()
    }

    pub fn tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        Tensor::new(nodes[self.id].shape.clone(), nodes[self.id].data.clone()).expect("node shape")
    }

    /// Single element value; panics unless the node holds exactly one value.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        assert_eq!(nodes[self.id].data.len(), 1, "item() on non-scalar {:?}", nodes[self.id].shape);
        nodes[self.id].data[0]
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Same data, cut from the graph.
    pub fn detach(&self) -> Value<'t> {
        self.tape.constant(self.tensor())
    }

    fn map_unary(self, kind: UnaryKind) -> Value<'t> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let f = |x: f64| match kind {
                UnaryKind::Neg => -x,
                UnaryKind::Relu => x.max(0.0),
                UnaryKind::Tanh => x.tanh(),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Sin => x.sin(),
                UnaryKind::Cos => x.cos(),
                UnaryKind::Sqrt => x.sqrt(),
                UnaryKind::Square => x * x,
                UnaryKind::Scale(c) => x * c,
                UnaryKind::Offset(c) => x + c,
                UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
                UnaryKind::WrapAngle => wrap_angle(x),
            };
            (n.shape.clone(), n.data.iter().map(|&x| f(x)).collect(), n.needs_grad)
        };
        self.tape.push(shape, data, Op::Unary { kind, x: self.id }, ng)
    }

    pub fn relu(self) -> Value<'t> {
        self.map_unary(UnaryKind::Relu)
    }
    pub fn tanh(self) -> Value<'t> {
        self.map_unary(UnaryKind::Tanh)
    }
    pub fn exp(self) -> Value<'t> {
        self.map_unary(UnaryKind::Exp)
    }
    pub fn ln(self) -> Value<'t> {
        self.map_unary(UnaryKind::Log)
    }
    pub fn sin(self) -> Value<'t> {
        self.map_unary(UnaryKind::Sin)
    }
    pub fn cos(self) -> Value<'t> {
        self.map_unary(UnaryKind::Cos)
    }
    pub fn sqrt(self) -> Value<'t> {
        self.map_unary(UnaryKind::Sqrt)
    }
    pub fn square(self) -> Value<'t> {
        self.map_unary(UnaryKind::Square)
    }
    pub fn scale(self, c: f64) -> Value<'t> {
        self.map_unary(UnaryKind::Scale(c))
    }
    pub fn offset(self, c: f64) -> Value<'t> {
        self.map_unary(UnaryKind::Offset(c))
    }

    /// Elementwise clamp; gradient passes unchanged inside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Value<'t> {
        self.map_unary(UnaryKind::Clamp(lo, hi))
    }

    /// Clamp with per-element bounds; gradient passes inside `[lo, hi]`.
    pub fn clamp_each(self, lo: &[f64], hi: &[f64]) -> Value<'t> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            assert!(lo.len() == n.data.len() && hi.len() == n.data.len(), "clamp_each bound length");
            let data = n.data.iter().zip(lo.iter().zip(hi)).map(|(x, (l, h))| x.clamp(*l, *h)).collect();
            (n.shape.clone(), data, n.needs_grad)
        };
        self.tape.push(
            shape,
            data,
            Op::ClampEach {
                x: self.id,
                lo: lo.to_vec(),
                hi: hi.to_vec(),
            },
            ng,
        )
    }

    /// Wraps angles into `(-π, π]` with unit gradient.
    pub fn wrap_angle(self) -> Value<'t> {
        self.map_unary(UnaryKind::WrapAngle)
    }

    fn binary(self, other: Value<'t>, kind: BinKind) -> Result<Value<'t>, NumError> {
        let (shape, data, map_a, map_b, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let shape = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| NumError::Shape {
                op: match kind {
                    BinKind::Add => "add",
                    BinKind::Sub => "sub",
                    BinKind::Mul => "mul",
                    BinKind::Div => "div",
                },
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            })?;
            let map_a = broadcast_map(&shape, &a.shape);
            let map_b = broadcast_map(&shape, &b.shape);
            let numel: usize = shape.iter().product();
            let f = |x: f64, y: f64| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
            let data: Vec<f64> = (0..numel)
                .map(|o| {
                    let ia = map_a.as_ref().map_or(o, |m| m[o]);
                    let ib = map_b.as_ref().map_or(o, |m| m[o]);
                    f(a.data[ia], b.data[ib])
                })
                .collect();
            (shape, data, map_a, map_b, a.needs_grad || b.needs_grad)
        };
        // Broadcast maps are only needed for the backward pass.
        let (map_a, map_b) = if ng { (map_a, map_b) } else { (None, None) };
        Ok(self.tape.push(
            shape,
            data,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                map_a,
                map_b,
            },
            ng,
        ))
    }

    pub fn try_add(self, other: Value<'t>) -> Result<Value<'t>, NumError> {
        self.binary(other, BinKind::Add)
    }
    pub fn try_sub(self, other: Value<'t>) -> Result<Value<'t>, NumError> {
        self.binary(other, BinKind::Sub)
    }
    pub fn try_mul(self, other: Value<'t>) -> Result<Value<'t>, NumError> {
        self.binary(other, BinKind::Mul)
    }
    pub fn try_div(self, other: Value<'t>) -> Result<Value<'t>, NumError> {
        self.binary(other, BinKind::Div)
    }

    pub fn try_matmul(self, other: Value<'t>) -> Result<Value<'t>, NumError> {
        let (m, k, n, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(NumError::Shape {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut c = vec![0.0; m * n];
            if m > 0 && n > 0 && k > 0 {
                gemm(m, k, n, &a.data, false, &b.data, false, &mut c, 0.0);
            }
            (m, k, n, c, a.needs_grad || b.needs_grad)
        };
        let _ = k;
        Ok(self.tape.push(vec![m, n], data, Op::MatMul { a: self.id, b: other.id }, ng))
    }

    /// `self · otherᵀ` for `self: [m, k]`, `other: [n, k]`.
    pub fn matmul_t(self, other: Value<'t>) -> Value<'t> {
        let (m, n, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
                panic!(
                    "{}",
                    NumError::Shape {
                        op: "matmul_t",
                        lhs: a.shape.clone(),
                        rhs: b.shape.clone(),
                    }
                );
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
            let mut c = vec![0.0; m * n];
            if m > 0 && n > 0 && k > 0 {
                gemm(m, k, n, &a.data, false, &b.data, true, &mut c, 0.0);
            }
            (m, n, c, a.needs_grad || b.needs_grad)
        };
        self.tape.push(vec![m, n], data, Op::MatMulT { a: self.id, b: other.id }, ng)
    }

    pub fn matmul(self, other: Value<'t>) -> Value<'t> {
        self.try_matmul(other).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn sum(self) -> Value<'t> {
        let (s, ng) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].data.iter().sum::<f64>(), nodes[self.id].needs_grad)
        };
        self.tape.push(vec![], vec![s], Op::SumAll(self.id), ng)
    }

    pub fn mean(self) -> Value<'t> {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(self) -> Value<'t> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let w = *n.shape.last().expect("sum_last on scalar");
            let rows = if w == 0 { n.shape[..n.shape.len() - 1].iter().product() } else { n.data.len() / w };
            let data: Vec<f64> = (0..rows).map(|r| n.data[r * w..(r + 1) * w].iter().sum()).collect();
            (n.shape[..n.shape.len() - 1].to_vec(), data, n.needs_grad)
        };
        self.tape.push(shape, data, Op::SumLast(self.id), ng)
    }

    pub fn try_reshape(self, shape: &[usize]) -> Result<Value<'t>, NumError> {
        let (data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if shape.iter().product::<usize>() != n.data.len() {
                return Err(NumError::Shape {
                    op: "reshape",
                    lhs: n.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            (n.data.clone(), n.needs_grad)
        };
        Ok(self.tape.push(shape.to_vec(), data, Op::Reshape(self.id), ng))
    }

    pub fn reshape(self, shape: &[usize]) -> Value<'t> {
        self.try_reshape(shape).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn gather_rows(self, idx: &[usize]) -> Value<'t> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let rows = n.shape[0];
            let row: usize = n.shape[1..].iter().product();
            let mut data = Vec::with_capacity(idx.len() * row);
            for &i in idx {
                assert!(i < rows, "gather_rows index {i} out of bounds for {:?}", n.shape);
                data.extend_from_slice(&n.data[i * row..(i + 1) * row]);
            }
            let mut shape = n.shape.clone();
            shape[0] = idx.len();
            (shape, data, n.needs_grad)
        };
        let idx = if ng { idx.to_vec() } else { Vec::new() };
        self.tape.push(shape, data, Op::GatherRows { src: self.id, idx }, ng)
    }

    /// Copy of `self` with rows `idx` replaced by the rows of `upd`.
    pub fn scatter_rows(self, idx: &[usize], upd: Value<'t>) -> Value<'t> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (b, u) = (&nodes[self.id], &nodes[upd.id]);
            assert_eq!(b.shape[1..], u.shape[1..], "scatter_rows trailing shapes differ");
            assert_eq!(u.shape[0], idx.len(), "scatter_rows needs one update row per index");
            let row: usize = b.shape[1..].iter().product();
            let mut data = b.data.clone();
            for (r, &s) in idx.iter().enumerate() {
                data[s * row..(s + 1) * row].copy_from_slice(&u.data[r * row..(r + 1) * row]);
            }
            (b.shape.clone(), data, b.needs_grad || u.needs_grad)
        };
        self.tape.push(
            shape,
            data,
            Op::ScatterRows {
                base: self.id,
                upd: upd.id,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Value<'t> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let w = *n.shape.last().unwrap();
            assert!(start + len <= w, "slice_last {start}+{len} exceeds width {w}");
            let rows = if w == 0 { 0 } else { n.data.len() / w };
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&n.data[r * w + start..r * w + start + len]);
            }
            let mut shape = n.shape.clone();
            *shape.last_mut().unwrap() = len;
            (shape, data, n.needs_grad)
        };
        self.tape.push(shape, data, Op::SliceLast { src: self.id, start }, ng)
    }

    /// Writes [`MASK_VALUE`] where `mask` is true.
    pub fn mask_fill(self, mask: &[bool]) -> Value<'t> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            assert_eq!(mask.len(), n.data.len(), "mask_fill mask length mismatch");
            let data = n
                .data
                .iter()
                .zip(mask)
                .map(|(&x, &m)| if m { MASK_VALUE } else { x })
                .collect();
            (n.shape.clone(), data, n.needs_grad)
        };
        self.tape.push(
            shape,
            data,
            Op::MaskFill {
                src: self.id,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    /// Softmax along the last axis. Entries at or below [`MASK_VALUE`] get
    /// zero probability; fully masked rows come out all zeros.
    pub fn softmax(self) -> Value<'t> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let w = *n.shape.last().expect("softmax on scalar");
            let mut out = vec![0.0; n.data.len()];
            if w > 0 {
                for r in 0..n.data.len() / w {
                    softmax_row(&n.data[r * w..(r + 1) * w], &mut out[r * w..(r + 1) * w]);
                }
            }
            (n.shape.clone(), out, n.needs_grad)
        };
        self.tape.push(shape, data, Op::Softmax(self.id), ng)
    }

    /// Layer normalisation over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(self, gain: Value<'t>, bias: Value<'t>) -> Value<'t> {
        const EPS: f64 = 1e-5;
        let (shape, data, xhat, rstd, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g, b) = (&nodes[self.id], &nodes[gain.id], &nodes[bias.id]);
            let w = *x.shape.last().expect("layer_norm on scalar");
            assert!(w >= 1, "layer_norm needs width >= 1");
            assert_eq!(g.data.len(), w, "layer_norm gain width");
            assert_eq!(b.data.len(), w, "layer_norm bias width");
            let rows = x.data.len() / w;
            let mut xhat = vec![0.0; x.data.len()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; x.data.len()];
            for r in 0..rows {
                let row = &x.data[r * w..(r + 1) * w];
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
                let rs = 1.0 / (var + EPS).sqrt();
                rstd[r] = rs;
                for c in 0..w {
                    let xh = (row[c] - mean) * rs;
                    xhat[r * w + c] = xh;
                    out[r * w + c] = xh * g.data[c] + b.data[c];
                }
            }
            (x.shape.clone(), out, xhat, rstd, x.needs_grad || g.needs_grad || b.needs_grad)
        };
        self.tape.push(
            shape,
            data,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Per-head scaled dot products between each query row and its `k`
    /// gathered key rows.
    ///
    /// `self: [N, D]`, `keys: [N·K, D]` (row `i·K + j` is neighbor `j` of
    /// query `i`) → `[N, heads, K]`.
    pub fn head_dot(self, keys: Value<'t>, heads: usize, scale: f64) -> Value<'t> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (q, k) = (&nodes[self.id], &nodes[keys.id]);
            let (n, d) = (q.shape[0], q.shape[1]);
            assert_eq!(k.shape[1], d, "head_dot width mismatch {:?} vs {:?}", q.shape, k.shape);
            assert!(heads > 0 && d % heads == 0, "head count {heads} must divide {d}");
            let kk = if n == 0 { 0 } else { k.shape[0] / n };
            assert_eq!(kk * n, k.shape[0], "head_dot key rows must be N*K");
            let dh = d / heads;
            let mut out = vec![0.0; n * heads * kk];
            for i in 0..n {
                for h in 0..heads {
                    let qrow = &q.data[i * d + h * dh..i * d + (h + 1) * dh];
                    for j in 0..kk {
                        let krow = &k.data[(i * kk + j) * d + h * dh..(i * kk + j) * d + (h + 1) * dh];
                        out[(i * heads + h) * kk + j] = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                }
            }
            (vec![n, heads, kk], out, q.needs_grad || k.needs_grad)
        };
        self.tape.push(
            shape,
            data,
            Op::HeadDot {
                q: self.id,
                k: keys.id,
                heads,
                scale,
            },
            ng,
        )
    }

    /// Attention-weighted sum of gathered value rows.
    ///
    /// `self: [N, heads, K]` weights, `values: [N·K, D]` → `[N, D]`.
    pub fn head_mix(self, values: Value<'t>) -> Value<'t> {
        let (shape, data, heads, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (a, v) = (&nodes[self.id], &nodes[values.id]);
            let (n, heads, kk) = (a.shape[0], a.shape[1], a.shape[2]);
            let d = v.shape[1];
            assert_eq!(v.shape[0], n * kk, "head_mix value rows must be N*K");
            assert!(d % heads == 0, "head count {heads} must divide {d}");
            let dh = d / heads;
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                for h in 0..heads {
                    for j in 0..kk {
                        let w = a.data[(i * heads + h) * kk + j];
                        if w == 0.0 {
                            continue;
                        }
                        let vrow = &v.data[(i * kk + j) * d + h * dh..(i * kk + j) * d + (h + 1) * dh];
                        for (o, x) in out[i * d + h * dh..i * d + (h + 1) * dh].iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
            (vec![n, d], out, heads, a.needs_grad || v.needs_grad)
        };
        self.tape.push(
            shape,
            data,
            Op::HeadMix {
                alpha: self.id,
                v: values.id,
                heads,
            },
            ng,
        )
    }

    /// Interleaved `(sin(x·f), cos(x·f))` per frequency, appended as a new
    /// last axis of width `2·freqs.len()`.
    pub fn sinusoid(self, freqs: &[f64]) -> Value<'t> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let f = freqs.len();
            let mut out = Vec::with_capacity(n.data.len() * 2 * f);
            for &x in &n.data {
                for &w in freqs {
                    let (s, c) = (x * w).sin_cos();
                    out.push(s);
                    out.push(c);
                }
            }
            let mut shape = n.shape.clone();
            shape.push(2 * f);
            (shape, out, n.needs_grad)
        };
        self.tape.push(
            shape,
            data,
            Op::Sinusoid {
                x: self.id,
                freqs: freqs.to_vec(),
            },
            ng,
        )
    }

    /// Max over axis 1 of `[N, n, D]`, ignoring nodes whose `node_valid`
    /// flag (length `N·n`) is false. Rows with no valid node yield zeros.
    pub fn masked_max_pool(self, node_valid: &[bool]) -> Value<'t> {
        let (shape, data, argmax, ng) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            assert_eq!(x.shape.len(), 3, "masked_max_pool expects [N, n, D]");
            let (n, m, d) = (x.shape[0], x.shape[1], x.shape[2]);
            assert_eq!(node_valid.len(), n * m, "masked_max_pool mask length");
            let mut out = vec![0.0; n * d];
            let mut arg = vec![usize::MAX; n * d];
            for i in 0..n {
                for j in 0..m {
                    if !node_valid[i * m + j] {
                        continue;
                    }
                    for c in 0..d {
                        let src = (i * m + j) * d + c;
                        let o = i * d + c;
                        if arg[o] == usize::MAX || x.data[src] > out[o] {
                            out[o] = x.data[src];
                            arg[o] = src;
                        }
                    }
                }
            }
            (vec![n, d], out, arg, x.needs_grad)
        };
        self.tape.push(shape, data, Op::MaxPool { x: self.id, argmax }, ng)
    }

    /// Negative log-likelihood of `labels` under row-wise softmax of
    /// `self: [A, M]`; masked logits are excluded. Returns `[A]`.
    pub fn nll(self, labels: &[usize]) -> Value<'t> {
        let (data, probs, ng) = {
            let nodes = self.tape.nodes.borrow();
            let l = &nodes[self.id];
            assert_eq!(l.shape.len(), 2, "nll expects [A, M] logits");
            let (a, m) = (l.shape[0], l.shape[1]);
            assert_eq!(labels.len(), a, "nll needs one label per row");
            let mut probs = vec![0.0; a * m];
            let mut out = Vec::with_capacity(a);
            for r in 0..a {
                let row = &l.data[r * m..(r + 1) * m];
                assert!(labels[r] < m && row[labels[r]] > MASK_VALUE, "nll label {} is masked or out of range", labels[r]);
                softmax_row(row, &mut probs[r * m..(r + 1) * m]);
                let max = row.iter().copied().filter(|&v| v > MASK_VALUE).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().filter(|&&v| v > MASK_VALUE).map(|v| (v - max).exp()).sum::<f64>().ln();
                out.push(lse - row[labels[r]]);
            }
            (out, probs, l.needs_grad)
        };
        let n = data.len();
        self.tape.push(
            vec![n],
            data,
            Op::Nll {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Elementwise Huber-style smoothed L1 between `self` and `target`.
    pub fn smooth_l1(self, target: Value<'t>, delta: f64) -> Value<'t> {
        assert!(delta > 0.0, "smooth_l1 delta must be positive");
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[target.id]);
            assert_eq!(a.shape, b.shape, "smooth_l1 shape mismatch");
            let data = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| {
                    let d = (x - y).abs();
                    if d < delta {
                        0.5 * d * d / delta
                    } else {
                        d - 0.5 * delta
                    }
                })
                .collect();
            (a.shape.clone(), data, a.needs_grad || b.needs_grad)
        };
        self.tape.push(
            shape,
            data,
            Op::SmoothL1 {
                a: self.id,
                b: target.id,
                delta,
            },
            ng,
        )
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row
        .iter()
        .copied()
        .filter(|&v| v > MASK_VALUE)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = if v > MASK_VALUE { (v - max).exp() } else { 0.0 };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Concatenates along the last axis; leading dimensions must agree.
pub fn try_concat_last<'t>(values: &[Value<'t>]) -> Result<Value<'t>, NumError> {
    let tape = values.first().expect("concat of nothing").tape;
    let (shape, data, ng) = {
        let nodes = tape.nodes.borrow();
        let lead = nodes[values[0].id].shape[..nodes[values[0].id].shape.len() - 1].to_vec();
        let mut width = 0;
        for v in values {
            let s = &nodes[v.id].shape;
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(NumError::Shape {
                    op: "concat",
                    lhs: nodes[values[0].id].shape.clone(),
                    rhs: s.clone(),
                });
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for v in values {
                let n = &nodes[v.id];
                let w = *n.shape.last().unwrap();
                data.extend_from_slice(&n.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        (shape, data, values.iter().any(|v| nodes[v.id].needs_grad))
    };
    Ok(tape.push(
        shape,
        data,
        Op::Concat {
            inputs: values.iter().map(|v| v.id).collect(),
            last_axis: true,
        },
        ng,
    ))
}

pub fn concat_last<'t>(values: &[Value<'t>]) -> Value<'t> {
    try_concat_last(values).unwrap_or_else(|e| panic!("{e}"))
}

/// Concatenates along axis 0; trailing dimensions must agree.
pub fn try_concat_rows<'t>(values: &[Value<'t>]) -> Result<Value<'t>, NumError> {
    let tape = values.first().expect("concat of nothing").tape;
    let (shape, data, ng) = {
        let nodes = tape.nodes.borrow();
        let trail = nodes[values[0].id].shape[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for v in values {
            let n = &nodes[v.id];
            if n.shape.is_empty() || n.shape[1..] != trail[..] {
                return Err(NumError::Shape {
                    op: "concat_rows",
                    lhs: nodes[values[0].id].shape.clone(),
                    rhs: n.shape.clone(),
                });
            }
            rows += n.shape[0];
            data.extend_from_slice(&n.data);
        }
        let mut shape = vec![rows];
        shape.extend(trail);
        (shape, data, values.iter().any(|v| nodes[v.id].needs_grad))
    };
    Ok(tape.push(
        shape,
        data,
        Op::Concat {
            inputs: values.iter().map(|v| v.id).collect(),
            last_axis: false,
        },
        ng,
    ))
}

pub fn concat_rows<'t>(values: &[Value<'t>]) -> Value<'t> {
    try_concat_rows(values).unwrap_or_else(|e| panic!("{e}"))
}

impl fmt::Debug for Value<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Value#{} {:?}", self.id, self.tensor())
    }
}

macro_rules! impl_binop {
    ($tr:ident, $method:ident, $try:ident) => {
        impl<'t> $tr for Value<'t> {
            type Output = Value<'t>;
            fn $method(self, rhs: Value<'t>) -> Value<'t> {
                self.$try(rhs).unwrap_or_else(|e| panic!("{e}"))
            }
        }
        impl<'t> $tr<f64> for Value<'t> {
            type Output = Value<'t>;
            fn $method(self, rhs: f64) -> Value<'t> {
                let c = self.tape.scalar(rhs);
                self.$try(c).unwrap_or_else(|e| panic!("{e}"))
            }
        }
    };
}

impl_binop!(Add, add, try_add);
impl_binop!(Sub, sub, try_sub);
impl_binop!(Mul, mul, try_mul);
impl_binop!(Div, div, try_div);

impl<'t> Neg for Value<'t> {
    type Output = Value<'t>;
    fn neg(self) -> Value<'t> {
        self.map_unary(UnaryKind::Neg)
    }
}
