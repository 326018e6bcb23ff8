//! Slice-level forward and backward kernels. All loops run in a fixed
//! index order so results are bitwise reproducible.

use crate::scalar::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out[m×k] += g[m×n] · bᵀ` where `b` is `[k×n]`.
pub(crate) fn matmul_a_bt_acc<T: Scalar>(
    g: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc = acc + gv * bv;
            }
            out[i * k + p] = out[i * k + p] + acc;
        }
    }
}

/// `out[k×n] += aᵀ · g` where `a` is `[m×k]` and `g` is `[m×n]`.
pub(crate) fn matmul_at_b_acc<T: Scalar>(
    a: &[T],
    g: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
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

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Tanh-approximated GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let k: T = c(0.797_884_560_802_865_4);
    let a: T = c(0.044_715);
    let half: T = c(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let k: T = c(0.797_884_560_802_865_4);
    let a: T = c(0.044_715);
    let half: T = c(0.5);
    let three: T = c(3.0);
    let t = (k * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * a * x * x)
}

/// Row-wise softmax over rows of width `n`, subtracting the row max.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        softmax_into(row, orow);
    }
    out
}

pub(crate) fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = if v == T::neg_infinity() {
            T::zero()
        } else {
            (v - max).exp()
        };
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// `dx = y ⊙ (dy − Σ dy⊙y)` per row.
pub(crate) fn softmax_backward_rows<T: Scalar>(y: &[T], dy: &[T], n: usize, dx: &mut [T]) {
    for ((yr, gr), dr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot = yr
            .iter()
            .zip(gr)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = *d + yv * (gv - dot);
        }
    }
}

/// Normalizes each row to zero mean and unit variance. Returns the output
/// and the per-row `1 / sqrt(var + eps)`.
pub(crate) fn layer_norm_rows<T: Scalar>(x: &[T], n: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let nf = T::from_usize(n).expect("width");
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / n);
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / nf;
        let inv = T::one() / (var + eps).sqrt();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

/// `dx = inv · (dy − mean(dy) − y · mean(dy ⊙ y))` per row.
pub(crate) fn layer_norm_backward_rows<T: Scalar>(
    y: &[T],
    inv_std: &[T],
    dy: &[T],
    n: usize,
    dx: &mut [T],
) {
    let nf = T::from_usize(n).expect("width");
    for (((yr, gr), dr), &inv) in y
        .chunks(n)
        .zip(dy.chunks(n))
        .zip(dx.chunks_mut(n))
        .zip(inv_std)
    {
        let mean_g = gr.iter().fold(T::zero(), |a, &v| a + v) / nf;
        let mean_gy = gr.iter().zip(yr).fold(T::zero(), |a, (&g, &yv)| a + g * yv) / nf;
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = *d + inv * (gv - mean_g - yv * mean_gy);
        }
    }
}
