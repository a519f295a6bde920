//! Plain matrix kernels over row-major slices. Each output row depends only on
//! the matching input row, so batching rows never changes a row's result.

use super::Real;

/// out[m,n] += a[m,k] · b[k,n]
pub fn gemm_nn<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == R::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub fn gemm_nt<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = R::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[m,n] += a[k,m]ᵀ · b[k,n]
pub fn gemm_tn<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == R::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn gelu<R: Real>(x: R) -> R {
    let c = R::of((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + R::of(0.044715) * x * x * x);
    R::of(0.5) * x * (R::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::of((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + R::of(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (R::one() + R::of(3.0 * 0.044715) * x * x);
    R::of(0.5) * (R::one() + t) + R::of(0.5) * x * (R::one() - t * t) * dinner
}

#[inline]
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// In-place softmax of one row; `allowed` hides entries when false.
pub fn softmax_row<R: Real>(row: &mut [R], allowed: Option<&[bool]>) {
    let visible = |j: usize| allowed.is_none_or(|m| m[j]);
    let mut max = R::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if visible(j) && v > max {
            max = v;
        }
    }
    let mut sum = R::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if visible(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = R::zero();
        }
    }
    if sum > R::zero() {
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut nn = vec![0.0; 8];
        gemm_nn(&a, &b, &mut nn, 2, 3, 4);

        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut nt = vec![0.0; 8];
        gemm_nt(&a, &bt, &mut nt, 2, 3, 4);
        assert_eq!(nn, nt);

        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut tn = vec![0.0; 8];
        gemm_tn(&at, &b, &mut tn, 2, 3, 4);
        assert_eq!(nn, tn);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
    }
}
