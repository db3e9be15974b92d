//! Raw numeric kernels over row-major buffers. No graph bookkeeping here.

use super::{broadcast_shapes, numel, strides};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Strides of `shape` viewed inside a broadcast output of rank `rank`;
/// broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let own = strides(shape);
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 && out[i] != 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Visits every output position with the matching offsets into `a` and `b`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..total {
        f(o, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// True when `small` equals the trailing dims of `big` (after stripping
/// leading ones), so `big[i]` pairs with `small[i % small.len()]`.
fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    let s: Vec<usize> = small.iter().copied().skip_while(|&d| d == 1).collect();
    s.len() <= big.len() && big[big.len() - s.len()..] == s[..]
}

pub fn binary<T: Scalar>(
    op: &'static str,
    a: &[T],
    ash: &[usize],
    b: &[T],
    bsh: &[usize],
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<usize>, Vec<T>)> {
    let out = broadcast_shapes(ash, bsh).ok_or_else(|| Error::shape(op, ash, bsh))?;
    let n = numel(&out);
    let data = if ash == bsh {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else if b.len() == 1 && ash == out.as_slice() {
        let y = b[0];
        a.iter().map(|&x| f(x, y)).collect()
    } else if a.len() == 1 && bsh == out.as_slice() {
        let x = a[0];
        b.iter().map(|&y| f(x, y)).collect()
    } else if ash == out.as_slice() && is_suffix(bsh, &out) {
        let m = b.len();
        a.chunks(m)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| f(x, y)))
            .collect()
    } else if bsh == out.as_slice() && is_suffix(ash, &out) {
        let m = a.len();
        b.chunks(m)
            .flat_map(|row| a.iter().zip(row).map(|(&x, &y)| f(x, y)))
            .collect()
    } else {
        let sa = broadcast_strides(ash, &out);
        let sb = broadcast_strides(bsh, &out);
        let mut data = vec![T::zero(); n];
        for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(a[ia], b[ib]));
        data
    };
    Ok((out, data))
}

/// Sums a gradient of broadcast shape `out` back down to `target`.
pub fn reduce_to<T: Scalar>(grad: &[T], out: &[usize], target: &[usize]) -> Vec<T> {
    if out == target {
        return grad.to_vec();
    }
    let m = numel(target);
    let mut acc = vec![T::zero(); m];
    if m == 1 {
        acc[0] = grad.iter().copied().sum();
    } else if is_suffix(target, out) {
        for row in grad.chunks(m) {
            for (a, &g) in acc.iter_mut().zip(row) {
                *a += g;
            }
        }
    } else {
        let st = broadcast_strides(target, out);
        let zeros = vec![0; out.len()];
        for_each_broadcast(out, &st, &zeros, |o, it, _| acc[it] += grad[o]);
    }
    acc
}

pub fn broadcast_to<T: Scalar>(data: &[T], shape: &[usize], target: &[usize]) -> Result<Vec<T>> {
    match broadcast_shapes(shape, target) {
        Some(out) if out == target => {}
        _ => return Err(Error::shape("broadcast_to", shape, target)),
    }
    let st = broadcast_strides(shape, target);
    let zeros = vec![0; target.len()];
    let mut out = vec![T::zero(); numel(target)];
    for_each_broadcast(target, &st, &zeros, |o, i, _| out[o] = data[i]);
    Ok(out)
}

pub fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src = strides(shape);
    let perm_strides: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out_shape, out);
    }
    if rank == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    // Innermost run that stays contiguous is copied as a slice.
    let inner = if perm[rank - 1] == rank - 1 { out_shape[rank - 1] } else { 1 };
    let outer_rank = if inner > 1 { rank - 1 } else { rank };
    let mut idx = vec![0usize; outer_rank];
    let mut off = 0usize;
    let count = numel(&out_shape[..outer_rank]);
    for _ in 0..count {
        if inner > 1 {
            out.extend_from_slice(&data[off..off + inner]);
        } else {
            out.push(data[off]);
        }
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            off += perm_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= perm_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Batch bookkeeping for a broadcasting matmul.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (out batch, a batch, b batch) index triples.
    pairs: Vec<(usize, usize, usize)>,
    /// `b` is a single matrix and `a`'s batch is laid out contiguously.
    fold_a: bool,
}

fn plan_matmul(ash: &[usize], bsh: &[usize]) -> Result<MatmulPlan> {
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(Error::shape("matmul", ash, bsh));
    }
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", ash, bsh));
    }
    let ba = &ash[..ash.len() - 2];
    let bb = &bsh[..bsh.len() - 2];
    let batch = broadcast_shapes(ba, bb).ok_or_else(|| Error::shape("matmul", ash, bsh))?;
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    let sa = broadcast_strides(ba, &batch);
    let sb = broadcast_strides(bb, &batch);
    let mut pairs = Vec::with_capacity(numel(&batch));
    if batch.is_empty() {
        pairs.push((0, 0, 0));
    } else {
        for_each_broadcast(&batch, &sa, &sb, |o, ia, ib| pairs.push((o, ia, ib)));
    }
    let fold_a = numel(bb) == 1 && numel(ba) == numel(&batch);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        pairs,
        fold_a,
    })
}

/// `c (m×n) (+)= a (m×k) · b (k×n)` with optional transposed views.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], a_t: bool, b: &[T], b_t: bool, c: &mut [T], accumulate: bool) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slice lengths checked above, c is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

pub fn matmul_forward<T: Scalar>(a: &[T], ash: &[usize], b: &[T], bsh: &[usize]) -> Result<(Vec<usize>, Vec<T>)> {
    let p = plan_matmul(ash, bsh)?;
    let mut out = vec![T::zero(); numel(&p.out_shape)];
    if p.fold_a {
        let rows = p.pairs.len() * p.m;
        gemm(rows, p.k, p.n, a, false, b, false, &mut out, false);
    } else {
        let (sa, sb, so) = (p.m * p.k, p.k * p.n, p.m * p.n);
        for &(o, ia, ib) in &p.pairs {
            gemm(
                p.m,
                p.k,
                p.n,
                &a[ia * sa..(ia + 1) * sa],
                false,
                &b[ib * sb..(ib + 1) * sb],
                false,
                &mut out[o * so..(o + 1) * so],
                false,
            );
        }
    }
    Ok((p.out_shape, out))
}

/// Gradients of `a · b` given the output gradient.
pub fn matmul_backward<T: Scalar>(
    a: &[T],
    ash: &[usize],
    b: &[T],
    bsh: &[usize],
    grad: &[T],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = plan_matmul(ash, bsh).expect("shapes validated in forward");
    let (sa, sb, so) = (p.m * p.k, p.k * p.n, p.m * p.n);
    let ga = need_a.then(|| {
        let mut ga = vec![T::zero(); a.len()];
        if p.fold_a {
            let rows = p.pairs.len() * p.m;
            gemm(rows, p.n, p.k, grad, false, b, true, &mut ga, false);
        } else {
            for &(o, ia, ib) in &p.pairs {
                gemm(
                    p.m,
                    p.n,
                    p.k,
                    &grad[o * so..(o + 1) * so],
                    false,
                    &b[ib * sb..(ib + 1) * sb],
                    true,
                    &mut ga[ia * sa..(ia + 1) * sa],
                    true,
                );
            }
        }
        ga
    });
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); b.len()];
        if p.fold_a {
            let rows = p.pairs.len() * p.m;
            gemm(p.k, rows, p.n, a, true, grad, false, &mut gb, false);
        } else {
            for &(o, ia, ib) in &p.pairs {
                gemm(
                    p.k,
                    p.m,
                    p.n,
                    &a[ia * sa..(ia + 1) * sa],
                    true,
                    &grad[o * so..(o + 1) * so],
                    false,
                    &mut gb[ib * sb..(ib + 1) * sb],
                    true,
                );
            }
        }
        gb
    });
    (ga, gb)
}

/// `(outer, axis, inner)` decomposition around `axis`.
pub fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub fn sum_axis<T: Scalar>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_at_axis(shape, axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Spreads a reduced gradient back along `axis`, scaled by `scale`.
pub fn expand_axis<T: Scalar>(grad: &[T], shape: &[usize], axis: usize, scale: T) -> Vec<T> {
    let (outer, len, inner) = split_at_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let src = &grad[o * inner..(o + 1) * inner];
        for _ in 0..len {
            out.extend(src.iter().map(|&g| g * scale));
        }
    }
    out
}

/// Max along `axis` plus the flat source offset of the winning element
/// (first occurrence on ties).
pub fn max_axis<T: Scalar>(data: &[T], shape: &[usize], axis: usize) -> (Vec<T>, Vec<usize>) {
    let (outer, len, inner) = split_at_axis(shape, axis);
    let mut vals = vec![T::neg_infinity(); outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let slot = o * inner + i;
            for l in 0..len {
                let off = (o * len + l) * inner + i;
                if l == 0 || data[off] > vals[slot] {
                    vals[slot] = data[off];
                    arg[slot] = off;
                }
            }
        }
    }
    (vals, arg)
}

pub fn slice_axis<T: Scalar>(data: &[T], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, full, inner) = split_at_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&data[base..base + len * inner]);
    }
    out
}

pub fn unslice_axis<T: Scalar>(grad: &[T], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, full, inner) = split_at_axis(shape, axis);
    let mut out = vec![T::zero(); numel(shape)];
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out[base..base + len * inner].copy_from_slice(&grad[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

pub fn softmax_rows<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    if cols == 0 {
        return out;
    }
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        let inv = T::one() / total;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    out
}

pub fn softmax_rows_backward<T: Scalar>(y: &[T], grad: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(cols).zip(grad.chunks(cols)).zip(out.chunks_mut(cols)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (g - dot);
        }
    }
    out
}

pub fn log_softmax_rows<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    if cols == 0 {
        return out;
    }
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = src.iter().map(|&s| (s - max).exp()).sum::<T>().ln() + max;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

pub fn log_softmax_rows_backward<T: Scalar>(y: &[T], grad: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(cols).zip(grad.chunks(cols)).zip(out.chunks_mut(cols)) {
        let total: T = gr.iter().copied().sum();
        for ((d, &yv), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *d = g - yv.exp() * total;
        }
    }
    out
}

/// Normalises each row to zero mean and unit variance; returns the
/// normalised rows and the per-row reciprocal standard deviations.
pub fn normalize_rows<T: Scalar>(data: &[T], cols: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = if cols == 0 { 0 } else { data.len() / cols };
    let mut out = vec![T::zero(); data.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_n = T::one() / T::from_usize(cols.max(1)).unwrap();
    for (r, (src, dst)) in data.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let mean = src.iter().copied().sum::<T>() * inv_n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rs = T::one() / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * rs;
        }
        rstd[r] = rs;
    }
    (out, rstd)
}

pub fn normalize_rows_backward<T: Scalar>(xhat: &[T], rstd: &[T], grad: &[T], cols: usize) -> Vec<T> {
    let inv_n = T::one() / T::from_usize(cols.max(1)).unwrap();
    let mut out = vec![T::zero(); xhat.len()];
    for (((xr, gr), dr), &rs) in xhat
        .chunks(cols)
        .zip(grad.chunks(cols))
        .zip(out.chunks_mut(cols))
        .zip(rstd)
    {
        let mean_g = gr.iter().copied().sum::<T>() * inv_n;
        let mean_gx = xr.iter().zip(gr).map(|(&x, &g)| x * g).sum::<T>() * inv_n;
        for ((d, &x), &g) in dr.iter_mut().zip(xr).zip(gr) {
            *d = rs * (g - mean_g - x * mean_gx);
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}
