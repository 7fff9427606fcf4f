//! Kernels behind the tape operations. All are single threaded with a
//! fixed evaluation order, so results are bit-reproducible on one machine.

use crate::scalar::Scalar;

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if k > 0 {
        T::gemm(m, k, n, (a, k as isize, 1), (b, n as isize, 1), T::zero(), (&mut out, n as isize, 1));
    }
    out
}

/// `da[m×k] += dc[m×n] · bᵀ`
pub fn matmul_grad_lhs<T: Scalar>(da: &mut [T], dc: &[T], b: &[T], m: usize, k: usize, n: usize) {
    if n > 0 {
        T::gemm(m, n, k, (dc, n as isize, 1), (b, 1, n as isize), T::one(), (da, k as isize, 1));
    }
}

/// `db[k×n] += aᵀ · dc[m×n]`
pub fn matmul_grad_rhs<T: Scalar>(db: &mut [T], dc: &[T], a: &[T], m: usize, k: usize, n: usize) {
    if m > 0 {
        T::gemm(k, m, n, (a, 1, k as isize), (dc, n as isize, 1), T::one(), (db, n as isize, 1));
    }
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    // Branch on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn hardtanh<T: Scalar>(v: T) -> T {
    v.max(-T::one()).min(T::one())
}

#[inline]
pub fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] · [5 6; 7 8]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        out
    }

    #[test]
    fn gemm_paths_match_loops() {
        let (m, k, n) = (7, 13, 5);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 17 % 7) as f64 - 3.0) / 2.0).collect();
        let g: Vec<f64> = (0..m * n).map(|i| ((i * 5 % 9) as f64 - 4.0) / 4.0).collect();
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&matmul(&a, &b, m, k, n), &naive(&a, &b, m, k, n)));

        let mut da = vec![1.0; m * k];
        matmul_grad_lhs(&mut da, &g, &b, m, k, n);
        let bt = transpose(&b, k, n);
        let want: Vec<f64> = naive(&g, &bt, m, n, k).iter().map(|v| v + 1.0).collect();
        assert!(close(&da, &want));

        let mut db = vec![0.0; k * n];
        matmul_grad_rhs(&mut db, &g, &a, m, k, n);
        let at = transpose(&a, m, k);
        assert!(close(&db, &naive(&at, &g, k, m, n)));
    }

    #[test]
    fn transpose_rect() {
        let t = transpose(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3);
        assert_eq!(t, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn activation_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
        assert_eq!(hardtanh(-3.0f64), -1.0);
        assert_eq!(hardtanh(0.4f64), 0.4);
        assert_eq!(hardtanh(7.0f64), 1.0);
        assert_eq!(relu(-2.0f64), 0.0);
        assert_eq!(relu(2.5f64), 2.5);
    }
}
