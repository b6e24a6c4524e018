//! Numpy-style broadcasting: shapes are right-aligned and extents of 1
//! stretch to match.

use crate::scalar::Scalar;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides for reading an operand of `shape` while iterating over `out`;
/// broadcast axes get stride 0.
pub(crate) fn read_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + nd - shape.len();
        strides[o] = if shape[i] == 1 && out[o] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `out` with the matching offsets into two operands.
/// The innermost axis is handed over as a run to keep the hot loop tight.
pub(crate) fn for_each_pair(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0, 1, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let outer: usize = out[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        f(o * inner, oa, ob, inner, ia, ib);
        for d in (0..nd - 1).rev() {
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

pub(crate) fn broadcast_map<T: Scalar>(
    a: &[T],
    ashape: &[usize],
    b: &[T],
    bshape: &[usize],
    out: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if ashape == bshape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 {
        let y = b[0];
        if ashape == out {
            return a.iter().map(|&x| f(x, y)).collect();
        }
    }
    if a.len() == 1 {
        let x = a[0];
        if bshape == out {
            return b.iter().map(|&y| f(x, y)).collect();
        }
    }
    let sa = read_strides(ashape, out);
    let sb = read_strides(bshape, out);
    let n: usize = out.iter().product();
    let mut res = vec![T::zero(); n];
    for_each_pair(out, &sa, &sb, |o, oa, ob, len, ia, ib| {
        for k in 0..len {
            res[o + k] = f(a[oa + k * ia], b[ob + k * ib]);
        }
    });
    res
}

/// Sums `src` (of shape `out`) down to `target`, which must broadcast to `out`.
pub(crate) fn reduce_to<T: Scalar>(src: &[T], out: &[usize], target: &[usize]) -> Vec<T> {
    let n: usize = target.iter().product();
    if target == out {
        return src.to_vec();
    }
    if n == 1 {
        return vec![src.iter().copied().sum()];
    }
    let st = read_strides(target, out);
    let zero = vec![0; out.len()];
    let mut res = vec![T::zero(); n];
    for_each_pair(out, &st, &zero, |o, ot, _, len, it, _| {
        if it == 0 {
            let mut acc = T::zero();
            for k in 0..len {
                acc = acc + src[o + k];
            }
            res[ot] = res[ot] + acc;
        } else {
            for k in 0..len {
                res[ot + k * it] = res[ot + k * it] + src[o + k];
            }
        }
    });
    res
}

/// Repeats `src` (of shape `shape`) over `out`.
pub(crate) fn expand<T: Scalar>(src: &[T], shape: &[usize], out: &[usize]) -> Vec<T> {
    if shape == out {
        return src.to_vec();
    }
    let n: usize = out.iter().product();
    if src.len() == 1 {
        return vec![src[0]; n];
    }
    let ss = read_strides(shape, out);
    let zero = vec![0; out.len()];
    let mut res = vec![T::zero(); n];
    for_each_pair(out, &ss, &zero, |o, os, _, len, is, _| {
        for k in 0..len {
            res[o + k] = src[os + k * is];
        }
    });
    res
}
