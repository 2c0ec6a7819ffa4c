//! Flat-slice compute kernels shared by tape forward and backward passes.
//!
//! All matrices are row-major. The matmul variants use an axpy inner loop
//! over contiguous rows so the compiler can vectorize them.

/// C[m,n] = A[m,k] * B[k,n]. `out` must be zeroed by the caller.
pub fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// C[m,k] += A[m,n] * B[k,n]^T (row-by-row dot products).
pub fn mm_nt_acc(a: &[f32], b: &[f32], m: usize, n: usize, k: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let o_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in o_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0f32;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n] (rank-1 updates per row pair).
pub fn mm_tn_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub const GELU_SQRT_2_OVER_PI: f32 = 0.797_884_56;
pub const GELU_COEF: f32 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu(x: f32) -> f32 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

/// d gelu / dx for the tanh approximation.
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise softmax over the last axis with an optional boolean allow mask.
/// Disallowed entries get weight zero; fully disallowed rows come out all-zero.
pub fn softmax_rows(x: &[f32], rows: usize, width: usize, allow: Option<&[bool]>, out: &mut [f32]) {
    for r in 0..rows {
        let xs = &x[r * width..(r + 1) * width];
        let os = &mut out[r * width..(r + 1) * width];
        let row_allow = allow.map(|a| &a[r * width..(r + 1) * width]);
        let mut max = f32::NEG_INFINITY;
        for (j, &v) in xs.iter().enumerate() {
            if row_allow.map_or(true, |a| a[j]) && v > max {
                max = v;
            }
        }
        if max == f32::NEG_INFINITY {
            os.fill(0.0);
            continue;
        }
        let mut sum = 0.0f32;
        for (j, &v) in xs.iter().enumerate() {
            if row_allow.map_or(true, |a| a[j]) && v != f32::NEG_INFINITY {
                let e = (v - max).exp();
                os[j] = e;
                sum += e;
            } else {
                os[j] = 0.0;
            }
        }
        if sum > 0.0 {
            let inv = 1.0 / sum;
            for o in os.iter_mut() {
                *o *= inv;
            }
        }
    }
}

/// Backward of row softmax: dx = y .* (dy - sum(dy .* y)) per row.
/// Rows that were fully masked have y == 0 and so produce zero gradient.
pub fn softmax_rows_grad(y: &[f32], dy: &[f32], rows: usize, width: usize, dx: &mut [f32]) {
    for r in 0..rows {
        let ys = &y[r * width..(r + 1) * width];
        let dys = &dy[r * width..(r + 1) * width];
        let dxs = &mut dx[r * width..(r + 1) * width];
        let mut dot = 0.0f32;
        for (&yv, &dv) in ys.iter().zip(dys) {
            dot += yv * dv;
        }
        for j in 0..width {
            dxs[j] += ys[j] * (dys[j] - dot);
        }
    }
}

/// Source coordinate mapping for align-corners-false bilinear interpolation.
/// Returns (low index, high index, weight of the high sample).
pub fn bilerp_coords(dst: usize, factor: usize, src_len: usize) -> (usize, usize, f32) {
    let s = (dst as f32 + 0.5) / factor as f32 - 0.5;
    let s = s.max(0.0);
    let lo = (s.floor() as usize).min(src_len - 1);
    let hi = (lo + 1).min(src_len - 1);
    let w = if hi == lo { 0.0 } else { s - lo as f32 };
    (lo, hi, w)
}
