//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order, so the backward pass is a
//! single reverse sweep. Nodes that do not depend on any differentiable leaf
//! keep only their value.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::flops;
use super::kernels::{self, axis_split, broadcast_shape, dot, reduce_to_shape, zip_broadcast};
use super::{NumericsError, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul { a: usize, b: usize, batched: bool },
    SwapAxes { x: usize, a0: usize, a1: usize },
    Reshape(usize),
    Concat { xs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Softmax(usize),
    Exp(usize),
    Sqrt(usize),
    Relu(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Sum(usize),
    SumAxis { x: usize, axis: usize },
    Gather { x: usize, indices: Vec<usize> },
    MaskedFill { x: usize, mask: Arc<[bool]> },
    SparseMix { x: usize, entries: Arc<[(usize, usize, f64)]> },
    Attention(Box<AttentionSaved>),
    SsmScan(Box<SsmSaved>),
}

#[derive(Debug)]
struct AttentionSaved {
    q: usize,
    k: usize,
    v: usize,
    windows: Arc<[(usize, usize)]>,
    scale: f64,
    probs: Vec<f64>,
    row_offsets: Vec<usize>,
}

#[derive(Debug)]
struct SsmSaved {
    x: usize,
    abar: usize,
    bbar: usize,
    c: usize,
    states: Vec<f64>,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recording context for differentiable computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_node.get(&var.id)
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().any(|x| x.is_nan()) {
        return Err(NumericsError::NonFinite { op });
    }
    Ok(())
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn push(&self, op_name: &'static str, value: Tensor, parents: &[usize], op: Op) -> Result<Var<'_>> {
        check_finite(op_name, value.data())?;
        let requires_grad = self.needs_grad(parents);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op: if requires_grad { op } else { Op::Leaf } });
        Ok(Var { graph: self, id: nodes.len() - 1 })
    }

    pub fn concat(&self, xs: &[Var<'_>], axis: usize) -> Result<Var<'_>> {
        let first = xs.first().ok_or_else(|| NumericsError::Invalid("concat of nothing".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(NumericsError::Invalid(format!("concat axis {axis} for rank {}", base.len())));
        }
        let vals: Vec<Tensor> = xs.iter().map(|v| v.value()).collect();
        for v in &vals[1..] {
            let s = v.shape();
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &base, s));
            }
        }
        let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &vals {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        self.push("concat", Tensor::from_parts(shape, out), &ids, Op::Concat { xs: ids.clone(), axis })
    }

    /// Windowed scaled dot-product attention.
    ///
    /// `q` is `[B, Lq, dk]` (or `[Lq, dk]`), `k`/`v` are `[Bk, Lk, d]` with
    /// `Bk` equal to 1 (shared across the batch) or `B`. Query row `i` attends
    /// to keys `windows[i].0 ..= windows[i].1`; keys outside the window get
    /// exactly zero weight and are never touched.
    pub fn attention<'g>(
        &'g self,
        q: Var<'g>,
        k: Var<'g>,
        v: Var<'g>,
        windows: Arc<[(usize, usize)]>,
        scale: f64,
    ) -> Result<Var<'g>> {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let dims = AttnDims::new(&qv, &kv, &vv)?;
        if windows.len() != dims.lq {
            return Err(NumericsError::Invalid(format!(
                "attention expects {} windows, got {}",
                dims.lq,
                windows.len()
            )));
        }
        let mut row_offsets = Vec::with_capacity(dims.lq + 1);
        row_offsets.push(0);
        for &(lo, hi) in windows.iter() {
            if lo > hi || hi >= dims.lk {
                return Err(NumericsError::Invalid(format!(
                    "attention window {lo}..={hi} invalid for {} keys",
                    dims.lk
                )));
            }
            row_offsets.push(row_offsets.last().unwrap() + hi - lo + 1);
        }
        let per_batch = *row_offsets.last().unwrap();
        flops::record((dims.b * per_batch * (dims.dk + dims.dv)) as u64);

        let mut probs = vec![0.0; dims.b * per_batch];
        let mut out = vec![0.0; dims.b * dims.lq * dims.dv];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..dims.b {
            let kb = if dims.bk == 1 { 0 } else { b };
            for (i, &(lo, hi)) in windows.iter().enumerate() {
                let qrow = &qd[(b * dims.lq + i) * dims.dk..][..dims.dk];
                let p = &mut probs[b * per_batch + row_offsets[i]..][..hi - lo + 1];
                let mut max = f64::NEG_INFINITY;
                for (slot, j) in p.iter_mut().zip(lo..=hi) {
                    let krow = &kd[(kb * dims.lk + j) * dims.dk..][..dims.dk];
                    *slot = scale * dot(qrow, krow);
                    max = max.max(*slot);
                }
                let mut denom = 0.0;
                for slot in p.iter_mut() {
                    *slot = (*slot - max).exp();
                    denom += *slot;
                }
                let orow = &mut out[(b * dims.lq + i) * dims.dv..][..dims.dv];
                for (slot, j) in p.iter_mut().zip(lo..=hi) {
                    *slot /= denom;
                    let vrow = &vd[(kb * dims.lk + j) * dims.dv..][..dims.dv];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += *slot * x;
                    }
                }
            }
        }
        let mut shape = qv.shape().to_vec();
        *shape.last_mut().unwrap() = dims.dv;
        let needs = self.needs_grad(&[q.id, k.id, v.id]);
        self.push(
            "attention",
            Tensor::from_parts(shape, out),
            &[q.id, k.id, v.id],
            Op::Attention(Box::new(AttentionSaved {
                q: q.id,
                k: k.id,
                v: v.id,
                windows,
                scale,
                probs: if needs { probs } else { Vec::new() },
                row_offsets,
            })),
        )
    }

    /// Diagonal linear recurrence `h_l = abar * h_{l-1} + bbar * x_l`,
    /// `y_l = <c, h_l>` run independently per channel from a zero state.
    ///
    /// `x` is `[B, L, D]`; `abar`, `bbar`, `c` are `[D, S]`.
    pub fn ssm_scan<'g>(&'g self, x: Var<'g>, abar: Var<'g>, bbar: Var<'g>, c: Var<'g>) -> Result<Var<'g>> {
        let (xv, av, bv, cv) = (x.value(), abar.value(), bbar.value(), c.value());
        if xv.rank() != 3 || av.rank() != 2 {
            return Err(mismatch("ssm_scan", xv.shape(), av.shape()));
        }
        let (bsz, len, ch) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let st = av.shape()[1];
        if av.shape() != [ch, st] || bv.shape() != av.shape() || cv.shape() != av.shape() {
            return Err(mismatch("ssm_scan", xv.shape(), av.shape()));
        }
        flops::record((bsz * len * ch * st * 3) as u64);
        let needs = self.needs_grad(&[x.id, abar.id, bbar.id, c.id]);
        let mut states = if needs { vec![0.0; bsz * len * ch * st] } else { Vec::new() };
        let mut y = vec![0.0; bsz * len * ch];
        let mut h = vec![0.0; st];
        let (xd, ad, bd, cd) = (xv.data(), av.data(), bv.data(), cv.data());
        for b in 0..bsz {
            for d in 0..ch {
                h.iter_mut().for_each(|v| *v = 0.0);
                let (a_row, b_row, c_row) = (&ad[d * st..][..st], &bd[d * st..][..st], &cd[d * st..][..st]);
                for l in 0..len {
                    let xi = xd[(b * len + l) * ch + d];
                    for s in 0..st {
                        h[s] = a_row[s] * h[s] + b_row[s] * xi;
                    }
                    y[(b * len + l) * ch + d] = dot(c_row, &h);
                    if needs {
                        states[((b * len + l) * ch + d) * st..][..st].copy_from_slice(&h);
                    }
                }
            }
        }
        self.push(
            "ssm_scan",
            Tensor::from_parts(xv.shape().to_vec(), y),
            &[x.id, abar.id, bbar.id, c.id],
            Op::SsmScan(Box::new(SsmSaved { x: x.id, abar: abar.id, bbar: bbar.id, c: c.id, states })),
        )
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(NumericsError::Invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);
        let mut out = Gradients::default();

        let acc = |grads: &mut Vec<Option<Vec<f64>>>, id: usize, g: Vec<f64>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            let out_shape = node.value.shape();
            match &node.op {
                Op::Leaf => {
                    out.by_node.insert(id, Tensor::from_parts(out_shape.to_vec(), g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, reduce_to_shape(&g, out_shape, val(*a).shape()));
                    acc(&mut grads, *b, reduce_to_shape(&g, out_shape, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, reduce_to_shape(&g, out_shape, val(*a).shape()));
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    acc(&mut grads, *b, reduce_to_shape(&neg, out_shape, val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let ga = zip_broadcast(&g, out_shape, bv.data(), bv.shape(), out_shape, |x, y| x * y);
                        acc(&mut grads, *a, reduce_to_shape(&ga, out_shape, av.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let gb = zip_broadcast(&g, out_shape, av.data(), av.shape(), out_shape, |x, y| x * y);
                        acc(&mut grads, *b, reduce_to_shape(&gb, out_shape, bv.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let ga = zip_broadcast(&g, out_shape, bv.data(), bv.shape(), out_shape, |x, y| x / y);
                    if nodes[*b].requires_grad {
                        // d(a/b)/db = -(a/b)/b, and a/b is this node's value
                        let q =
                            zip_broadcast(node.value.data(), out_shape, bv.data(), bv.shape(), out_shape, |x, y| x / y);
                        let gb: Vec<f64> = g.iter().zip(&q).map(|(x, y)| -x * y).collect();
                        acc(&mut grads, *b, reduce_to_shape(&gb, out_shape, bv.shape()));
                    }
                    acc(&mut grads, *a, reduce_to_shape(&ga, out_shape, av.shape()));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.iter().map(|x| x * s).collect()),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::MatMul { a, b, batched } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (ga, gb) = matmul_backward(&g, av, bv, *batched);
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, ga);
                    }
                    if nodes[*b].requires_grad {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::SwapAxes { x, a0, a1 } => {
                    let (_, back) = kernels::swap_axes(&g, out_shape, *a0, *a1);
                    acc(&mut grads, *x, back);
                }
                Op::Reshape(x) => acc(&mut grads, *x, g),
                Op::Concat { xs, axis } => {
                    let (outer, _, inner) = axis_split(out_shape, *axis);
                    let total = out_shape[*axis] * inner;
                    let mut start = 0;
                    for &x in xs {
                        let w = val(x).shape()[*axis] * inner;
                        let mut part = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            part.extend_from_slice(&g[o * total + start..][..w]);
                        }
                        start += w;
                        acc(&mut grads, x, part);
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let src = val(*x).shape();
                    let (outer, n, inner) = axis_split(src, *axis);
                    let w = out_shape[*axis] * inner;
                    let mut full = vec![0.0; src.iter().product()];
                    for o in 0..outer {
                        full[o * n * inner + start * inner..][..w].copy_from_slice(&g[o * w..][..w]);
                    }
                    acc(&mut grads, *x, full);
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let n = *out_shape.last().unwrap();
                    let mut gx = vec![0.0; y.len()];
                    for ((gr, yr), or) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let s = dot(gr, yr);
                        for ((o, &gi), &yi) in or.iter_mut().zip(gr).zip(yr) {
                            *o = yi * (gi - s);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = g.iter().zip(node.value.data()).map(|(a, b)| a * b).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::Sqrt(x) => {
                    let gx = g.iter().zip(node.value.data()).map(|(a, y)| a / (2.0 * y)).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let gx = g.iter().zip(val(*x).data()).map(|(a, &xi)| if xi > 0.0 { *a } else { 0.0 }).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = node.value.data();
                    let n = *out_shape.last().unwrap();
                    let mut gx = vec![0.0; y.len()];
                    for (r, ((gr, yr), or)) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = dot(gr, yr) / n as f64;
                        for ((o, &gi), &yi) in or.iter_mut().zip(gr).zip(yr) {
                            *o = inv_std[r] * (gi - mg - yi * mgy);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => acc(&mut grads, *x, vec![g[0]; val(*x).len()]),
                Op::SumAxis { x, axis } => {
                    let src = val(*x).shape();
                    let (outer, n, inner) = axis_split(src, *axis);
                    let mut gx = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        for _ in 0..n {
                            gx.extend_from_slice(&g[o * inner..][..inner]);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gather { x, indices } => {
                    let src = val(*x);
                    let row = src.len() / src.shape()[0];
                    let mut gx = vec![0.0; src.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, &gi) in gx[i * row..][..row].iter_mut().zip(&g[r * row..][..row]) {
                            *o += gi;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SparseMix { x, entries } => {
                    let src = val(*x);
                    let row = src.len() / src.shape()[0];
                    let mut gx = vec![0.0; src.len()];
                    for &(o, i, w) in entries.iter() {
                        for (t, &gi) in gx[i * row..][..row].iter_mut().zip(&g[o * row..][..row]) {
                            *t += w * gi;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::MaskedFill { x, mask } => {
                    let gx = g.iter().zip(mask.iter()).map(|(&gi, &m)| if m { 0.0 } else { gi }).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::Attention(s) => {
                    let (gq, gk, gv) = attention_backward(&g, s, val(s.q), val(s.k), val(s.v));
                    acc(&mut grads, s.q, gq);
                    acc(&mut grads, s.k, gk);
                    acc(&mut grads, s.v, gv);
                }
                Op::SsmScan(s) => {
                    let (gx, ga, gb, gc) = ssm_backward(&g, s, val(s.x), val(s.abar), val(s.bbar), val(s.c));
                    acc(&mut grads, s.x, gx);
                    acc(&mut grads, s.abar, ga);
                    acc(&mut grads, s.bbar, gb);
                    acc(&mut grads, s.c, gc);
                }
            }
        }
        Ok(out)
    }
}

struct AttnDims {
    b: usize,
    bk: usize,
    lq: usize,
    lk: usize,
    dk: usize,
    dv: usize,
}

impl AttnDims {
    fn new(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Self> {
        let split = |t: &Tensor| -> Option<(usize, usize, usize)> {
            match t.shape() {
                [l, d] => Some((1, *l, *d)),
                [b, l, d] => Some((*b, *l, *d)),
                _ => None,
            }
        };
        let err = || mismatch("attention", q.shape(), k.shape());
        let (b, lq, dk) = split(q).ok_or_else(err)?;
        let (bk, lk, dk2) = split(k).ok_or_else(err)?;
        let (bv, lv, dv) = split(v).ok_or_else(|| mismatch("attention", k.shape(), v.shape()))?;
        if dk != dk2 || (bk != 1 && bk != b) || bv != bk || lv != lk {
            return Err(err());
        }
        Ok(Self { b, bk, lq, lk, dk, dv })
    }
}

fn attention_backward(
    g: &[f64],
    s: &AttentionSaved,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dims = AttnDims::new(q, k, v).expect("validated in forward");
    let per_batch = *s.row_offsets.last().unwrap();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let mut dp = Vec::new();
    for b in 0..dims.b {
        let kb = if dims.bk == 1 { 0 } else { b };
        for (i, &(lo, hi)) in s.windows.iter().enumerate() {
            let p = &s.probs[b * per_batch + s.row_offsets[i]..][..hi - lo + 1];
            let grow = &g[(b * dims.lq + i) * dims.dv..][..dims.dv];
            dp.clear();
            for (&pj, j) in p.iter().zip(lo..=hi) {
                let vrow = &vd[(kb * dims.lk + j) * dims.dv..][..dims.dv];
                dp.push(dot(grow, vrow));
                for (o, &x) in gv[(kb * dims.lk + j) * dims.dv..][..dims.dv].iter_mut().zip(grow) {
                    *o += pj * x;
                }
            }
            let mean = dot(p, &dp);
            let qrow = &qd[(b * dims.lq + i) * dims.dk..][..dims.dk];
            for ((&pj, &dpj), j) in p.iter().zip(&dp).zip(lo..=hi) {
                let ds = s.scale * pj * (dpj - mean);
                let krow = &kd[(kb * dims.lk + j) * dims.dk..][..dims.dk];
                for (o, &x) in gq[(b * dims.lq + i) * dims.dk..][..dims.dk].iter_mut().zip(krow) {
                    *o += ds * x;
                }
                for (o, &x) in gk[(kb * dims.lk + j) * dims.dk..][..dims.dk].iter_mut().zip(qrow) {
                    *o += ds * x;
                }
            }
        }
    }
    (gq, gk, gv)
}

fn ssm_backward(
    g: &[f64],
    s: &SsmSaved,
    x: &Tensor,
    abar: &Tensor,
    bbar: &Tensor,
    c: &Tensor,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (bsz, len, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let st = abar.shape()[1];
    let (xd, ad, bd, cd) = (x.data(), abar.data(), bbar.data(), c.data());
    let mut gx = vec![0.0; xd.len()];
    let mut ga = vec![0.0; ad.len()];
    let mut gb = vec![0.0; bd.len()];
    let mut gc = vec![0.0; cd.len()];
    let mut gh = vec![0.0; st];
    for b in 0..bsz {
        for d in 0..ch {
            gh.iter_mut().for_each(|v| *v = 0.0);
            let (a_row, b_row, c_row) = (&ad[d * st..][..st], &bd[d * st..][..st], &cd[d * st..][..st]);
            for l in (0..len).rev() {
                let gy = g[(b * len + l) * ch + d];
                let xi = xd[(b * len + l) * ch + d];
                let h = &s.states[((b * len + l) * ch + d) * st..][..st];
                let mut gxi = 0.0;
                for k in 0..st {
                    // gh currently holds abar * gh_{l+1}
                    gh[k] += c_row[k] * gy;
                    gc[d * st + k] += gy * h[k];
                    gb[d * st + k] += gh[k] * xi;
                    gxi += gh[k] * b_row[k];
                    if l > 0 {
                        let hp = s.states[((b * len + l - 1) * ch + d) * st + k];
                        ga[d * st + k] += gh[k] * hp;
                    }
                    gh[k] *= a_row[k];
                }
                gx[(b * len + l) * ch + d] = gxi;
            }
        }
    }
    (gx, ga, gb, gc)
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(bool, usize, usize, usize, usize)> {
    // returns (batched, batch, m, k, n)
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return None;
    }
    if b.len() == 2 {
        let rows: usize = a[..a.len() - 1].iter().product();
        return Some((false, 1, rows, k, n));
    }
    if a.len() == b.len() && a[..a.len() - 2] == b[..b.len() - 2] {
        let batch = a[..a.len() - 2].iter().product();
        return Some((true, batch, m, k, n));
    }
    None
}

fn matmul_backward(g: &[f64], a: &Tensor, b: &Tensor, batched: bool) -> (Vec<f64>, Vec<f64>) {
    let (_, batch, m, k, n) = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    if batched {
        for i in 0..batch {
            let gs = &g[i * m * n..][..m * n];
            kernels::mm_nt(gs, &b.data()[i * k * n..][..k * n], &mut ga[i * m * k..][..m * k], m, n, k);
            kernels::mm_tn(&a.data()[i * m * k..][..m * k], gs, &mut gb[i * k * n..][..k * n], k, m, n);
        }
    } else {
        kernels::mm_nt(g, b.data(), &mut ga, m, n, k);
        kernels::mm_tn(a.data(), g, &mut gb, k, m, n);
    }
    (ga, gb)
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn binary(self, other: Var<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| mismatch(name, a.shape(), b.shape()))?;
        let out = zip_broadcast(a.data(), a.shape(), b.data(), b.shape(), &shape, f);
        self.graph.push(name, Tensor::from_parts(shape, out), &[self.id, other.id], op)
    }

    fn unary(self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'g>> {
        let v = self.value().map(f);
        self.graph.push(name, v, &[self.id], op)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", |x, y| x / y, Op::Div(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        self.unary("scale", |x| x * s, Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'g>> {
        self.unary("add_scalar", |x| x + s, Op::AddScalar(self.id))
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.mul(self)
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.unary("exp", f64::exp, Op::Exp(self.id))
    }

    /// `x * sigmoid(x)`, built from primitive ops.
    pub fn silu(self) -> Result<Var<'g>> {
        self.div(self.neg()?.exp()?.add_scalar(1.0)?)
    }

    pub fn sqrt(self) -> Result<Var<'g>> {
        self.unary("sqrt", f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.unary("relu", |x| x.max(0.0), Op::Relu(self.id))
    }

    /// See [`matmul_dims`]: `[.., M, K] x [K, N]` or same-batch `[B.., M, K] x [B.., K, N]`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let (batched, batch, m, k, n) =
            matmul_dims(a.shape(), b.shape()).ok_or_else(|| mismatch("matmul", a.shape(), b.shape()))?;
        flops::record((batch * m * k * n) as u64);
        let mut out = vec![0.0; batch * m * n];
        if batched {
            for i in 0..batch {
                kernels::mm_nn(
                    &a.data()[i * m * k..][..m * k],
                    &b.data()[i * k * n..][..k * n],
                    &mut out[i * m * n..][..m * n],
                    m,
                    k,
                    n,
                );
            }
        } else {
            kernels::mm_nn(a.data(), b.data(), &mut out, m, k, n);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.graph.push(
            "matmul",
            Tensor::from_parts(shape, out),
            &[self.id, other.id],
            Op::MatMul { a: self.id, b: other.id, batched },
        )
    }

    /// Swap two axes.
    pub fn transpose(self, a0: usize, a1: usize) -> Result<Var<'g>> {
        let v = self.value();
        if a0 >= v.rank() || a1 >= v.rank() {
            return Err(NumericsError::Invalid(format!("transpose axes {a0},{a1} for rank {}", v.rank())));
        }
        let (shape, data) = kernels::swap_axes(v.data(), v.shape(), a0, a1);
        self.graph.push("transpose", Tensor::from_parts(shape, data), &[self.id], Op::SwapAxes { x: self.id, a0, a1 })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        self.graph.push("reshape", v, &[self.id], Op::Reshape(self.id))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let v = self.value();
        if axis >= v.rank() || len == 0 || start + len > v.shape()[axis] {
            return Err(NumericsError::Invalid(format!(
                "narrow axis {axis} [{start}, {}) of shape {:?}",
                start + len,
                v.shape()
            )));
        }
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v.data()[(o * n + start) * inner..][..len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        self.graph.push("narrow", Tensor::from_parts(shape, out), &[self.id], Op::Narrow { x: self.id, axis, start })
    }

    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'g>>> {
        let total = self.shape().get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != total {
            return Err(NumericsError::Invalid(format!("split sizes {sizes:?} do not cover axis of {total}")));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let v = self.narrow(axis, start, s);
                start += s;
                v
            })
            .collect()
    }

    /// Softmax over the last axis. `-inf` entries receive exactly zero weight.
    pub fn softmax(self) -> Result<Var<'g>> {
        let v = self.value();
        let n = *v.shape().last().unwrap();
        let mut out = v.to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                denom += *x;
            }
            for x in row.iter_mut() {
                *x /= denom;
            }
        }
        self.graph.push("softmax", Tensor::from_parts(v.shape().to_vec(), out), &[self.id], Op::Softmax(self.id))
    }

    /// Normalization over the last axis without affine parameters.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'g>> {
        let v = self.value();
        let n = *v.shape().last().unwrap();
        let mut out = Vec::with_capacity(v.len());
        let mut inv_std = Vec::with_capacity(v.len() / n);
        for row in v.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|x| (x - mean) * is));
            inv_std.push(is);
        }
        self.graph.push(
            "layer_norm",
            Tensor::from_parts(v.shape().to_vec(), out),
            &[self.id],
            Op::LayerNorm { x: self.id, inv_std },
        )
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let s = self.value().data().iter().sum();
        self.graph.push("sum", Tensor::scalar(s), &[self.id], Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(NumericsError::Invalid(format!("sum axis {axis} for rank {}", v.rank())));
        }
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for (acc, &x) in out[o * inner..][..inner].iter_mut().zip(&v.data()[(o * n + i) * inner..][..inner]) {
                    *acc += x;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        self.graph.push("sum_axis", Tensor::from_parts(shape, out), &[self.id], Op::SumAxis { x: self.id, axis })
    }

    /// Select rows (first axis) by index.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        let rows = v.shape()[0];
        let row = v.len() / rows;
        if indices.is_empty() {
            return Err(NumericsError::Invalid("gather with no indices".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= rows {
                return Err(NumericsError::Invalid(format!("gather index {i} out of {rows} rows")));
            }
            out.extend_from_slice(&v.data()[i * row..][..row]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        self.graph.push(
            "gather",
            Tensor::from_parts(shape, out),
            &[self.id],
            Op::Gather { x: self.id, indices: indices.to_vec() },
        )
    }

    /// Sparse constant row mixing: output row `o` is the sum of `w * x[i]`
    /// over `entries` `(o, i, w)`, for `out_rows` output rows.
    pub fn sparse_mix(self, entries: Arc<[(usize, usize, f64)]>, out_rows: usize) -> Result<Var<'g>> {
        let v = self.value();
        let rows = v.shape()[0];
        let row = v.len() / rows;
        if out_rows == 0 {
            return Err(NumericsError::Invalid("sparse_mix with no output rows".into()));
        }
        let mut out = vec![0.0; out_rows * row];
        for &(o, i, w) in entries.iter() {
            if o >= out_rows || i >= rows {
                return Err(NumericsError::Invalid(format!("sparse_mix entry ({o}, {i}) out of range")));
            }
            for (t, &x) in out[o * row..][..row].iter_mut().zip(&v.data()[i * row..][..row]) {
                *t += w * x;
            }
        }
        flops::record((entries.len() * row) as u64);
        let mut shape = v.shape().to_vec();
        shape[0] = out_rows;
        self.graph.push("sparse_mix", Tensor::from_parts(shape, out), &[self.id], Op::SparseMix { x: self.id, entries })
    }

    /// Replace entries where `mask` is true by `value` (no gradient flows there).
    pub fn masked_fill(self, mask: Arc<[bool]>, value: f64) -> Result<Var<'g>> {
        let v = self.value();
        if mask.len() != v.len() {
            return Err(NumericsError::Invalid(format!("mask of {} for tensor of {}", mask.len(), v.len())));
        }
        let out = v.data().iter().zip(mask.iter()).map(|(&x, &m)| if m { value } else { x }).collect();
        self.graph.push(
            "masked_fill",
            Tensor::from_parts(v.shape().to_vec(), out),
            &[self.id],
            Op::MaskedFill { x: self.id, mask },
        )
    }
}
