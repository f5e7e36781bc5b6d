//! Raw loops over flat buffers. Every reduction runs left to right over the
//! contracted index so results are reproducible bit for bit.

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Swap axes `a0` and `a1`, returning the new shape and buffer.
pub(crate) fn swap_axes(data: &[f64], shape: &[usize], a0: usize, a1: usize) -> (Vec<usize>, Vec<f64>) {
    let mut new_shape = shape.to_vec();
    new_shape.swap(a0, a1);
    if a0 == a1 {
        return (new_shape, data.to_vec());
    }
    let src_strides = strides(shape);
    let mut perm_strides = src_strides.clone();
    perm_strides.swap(a0, a1);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; new_shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < new_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (new_shape, out)
}

/// Right-aligned broadcast of two shapes where mismatched axes must be 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len()).map(|i| if i < pad || shape[i - pad] == 1 { 0 } else { own[i - pad] }).collect()
}

/// Elementwise binary op with broadcasting.
pub(crate) fn zip_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let n: usize = out_shape.iter().product();
    if a.len() == n && b.len() == 1 {
        let y = b[0];
        return a.iter().map(|&x| f(x, y)).collect();
    }
    if b.len() == n && a.len() == 1 {
        let x = a[0];
        return b.iter().map(|&y| f(x, y)).collect();
    }
    // trailing-suffix broadcast, e.g. [.., d] + [d]
    if a.len() == n && out_shape.ends_with(b_shape) {
        let m = b.len();
        return a.iter().enumerate().map(|(i, &x)| f(x, b[i % m])).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(a[oa], b[ob]));
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sum a gradient of shape `from` down to the broadcast operand shape `to`.
pub(crate) fn reduce_to_shape(g: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return g.to_vec();
    }
    let n_to: usize = to.iter().product();
    let mut out = vec![0.0; n_to];
    if n_to == 1 {
        out[0] = g.iter().sum();
        return out;
    }
    if from.ends_with(to) {
        for (i, &v) in g.iter().enumerate() {
            out[i % n_to] += v;
        }
        return out;
    }
    let st = broadcast_strides(to, from);
    let mut idx = vec![0usize; from.len()];
    let mut off = 0usize;
    for &v in g {
        out[off] += v;
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < from[ax] {
                break;
            }
            off -= st[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Split a shape around `axis` into (outer, axis_len, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
