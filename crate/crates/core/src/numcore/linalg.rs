//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub rs: usize,
    pub cs: usize,
}

impl Strides {
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    pub fn transposed(self) -> Self {
        Self {
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_offset(self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = a * b + beta * c` for an `m x k` times `k x n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * sc.rs + j * sc.cs] *= beta;
            }
        }
        return;
    }
    assert!(sa.max_offset(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(sb.max_offset(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(sc.max_offset(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above,
    // and `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.rs as isize,
            sa.cs as isize,
            b.as_ptr(),
            sb.rs as isize,
            sb.cs as isize,
            beta,
            c.as_mut_ptr(),
            sc.rs as isize,
            sc.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, Strides::row_major(3), &b, Strides::row_major(2), 0.0, &mut c, Strides::row_major(2));
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_operand() {
        // a stored 3x2, used as its 2x3 transpose
        let a = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, Strides::row_major(2).transposed(), &b, Strides::row_major(2), 0.0, &mut c, Strides::row_major(2));
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }
}
