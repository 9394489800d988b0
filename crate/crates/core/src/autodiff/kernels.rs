//! Slice-level numeric routines shared by forward and backward passes.
//!
//! Every accumulation runs in increasing index order.

use crate::tensor::Element;

/// `out[m×n] += a[m×k] · b[k×n]`, summing over `k` in increasing order.
pub(crate) fn matmul_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · g` for `a: [m×k]`, `g: [m×n]`, summing over `m` in order.
pub(crate) fn matmul_tn_acc<T: Element>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

pub(crate) fn transpose<T: Element>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = x[r * n + c];
        }
    }
    out
}

pub(crate) fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// In-place stable softmax of one row; masked-out entries become exactly 0.
pub(crate) fn softmax_row<T: Element>(row: &mut [T], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            sum = sum + *v;
        } else {
            *v = T::zero();
        }
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub(crate) fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    max + sum.ln()
}

/// Same-padded 1-D convolution; `w` is laid out `[k][cin][cout]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_forward<T: Element>(
    x: &[T],
    w: &[T],
    bias: &[T],
    out: &mut [T],
    len: usize,
    cin: usize,
    cout: usize,
    k: usize,
) {
    let pad = k / 2;
    for t in 0..len {
        let orow = &mut out[t * cout..(t + 1) * cout];
        orow.copy_from_slice(bias);
        for tap in 0..k {
            let Some(src) = (t + tap).checked_sub(pad).filter(|&s| s < len) else {
                continue;
            };
            for c in 0..cin {
                let xv = x[src * cin + c];
                let wrow = &w[(tap * cin + c) * cout..(tap * cin + c + 1) * cout];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o = *o + xv * wv;
                }
            }
        }
    }
}

pub(crate) fn conv1d_grad_input<T: Element>(
    g: &[T],
    w: &[T],
    gx: &mut [T],
    len: usize,
    cin: usize,
    cout: usize,
    k: usize,
) {
    let pad = k / 2;
    for t in 0..len {
        let grow = &g[t * cout..(t + 1) * cout];
        for tap in 0..k {
            let Some(src) = (t + tap).checked_sub(pad).filter(|&s| s < len) else {
                continue;
            };
            for c in 0..cin {
                let wrow = &w[(tap * cin + c) * cout..(tap * cin + c + 1) * cout];
                let mut s = T::zero();
                for (&gv, &wv) in grow.iter().zip(wrow) {
                    s = s + gv * wv;
                }
                gx[src * cin + c] = gx[src * cin + c] + s;
            }
        }
    }
}

pub(crate) fn conv1d_grad_weight<T: Element>(
    g: &[T],
    x: &[T],
    gw: &mut [T],
    len: usize,
    cin: usize,
    cout: usize,
    k: usize,
) {
    let pad = k / 2;
    for t in 0..len {
        let grow = &g[t * cout..(t + 1) * cout];
        for tap in 0..k {
            let Some(src) = (t + tap).checked_sub(pad).filter(|&s| s < len) else {
                continue;
            };
            for c in 0..cin {
                let xv = x[src * cin + c];
                let wrow = &mut gw[(tap * cin + c) * cout..(tap * cin + c + 1) * cout];
                for (o, &gv) in wrow.iter_mut().zip(grow) {
                    *o = *o + xv * gv;
                }
            }
        }
    }
}
