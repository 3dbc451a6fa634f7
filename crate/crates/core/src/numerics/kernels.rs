//! Flat matrix kernels shared by forward and backward passes.
//!
//! All loops accumulate sequentially in index order so results are
//! bit-reproducible on a single platform.

use super::tensor::Scalar;

/// C (m,n) += A (m,k) · B (k,n)
pub fn matmul_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + av * b_row[j];
            }
        }
    }
}

/// C (m,n) += A (m,k) · Bᵀ where B is (n,k)
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for p in 0..k {
                acc = acc + a_row[p] * b_row[p];
            }
            c_row[j] = c_row[j] + acc;
        }
    }
}

/// C (m,n) += Aᵀ · B where A is (k,m), B is (k,n)
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a_row[i];
            if av == S::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + av * b_row[j];
            }
        }
    }
}

/// out (n) += column sums of A (m,n)
pub fn col_sum<S: Scalar>(a: &[S], out: &mut [S], m: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), n);
    for i in 0..m {
        let row = &a[i * n..(i + 1) * n];
        for j in 0..n {
            out[j] = out[j] + row[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        matmul_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // A (2,3) · Bᵀ with B (2,3): same as A·B' where B' is 3x2 transposed form
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0]; // (2,3) whose transpose is b
        let mut c2 = [0.0f64; 4];
        matmul_nt(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c2, [58.0, 64.0, 139.0, 154.0]);

        // Aᵀ·B with A (3,2) being transpose of a
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0]; // (3,2), transpose of a
        let mut c3 = [0.0f64; 4];
        matmul_tn(&at, &b, &mut c3, 2, 3, 2);
        assert_eq!(c3, [58.0, 64.0, 139.0, 154.0]);
    }
}
