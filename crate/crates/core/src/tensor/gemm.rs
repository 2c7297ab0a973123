//! Safe strided wrappers over `matrixmultiply::dgemm`.

/// Read-only strided matrix view starting at `offset` within `data`.
pub(crate) struct View<'a> {
    data: &'a [f64],
    offset: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    pub(crate) fn new(data: &'a [f64], offset: usize, rs: usize, cs: usize) -> Self {
        View {
            data,
            offset,
            rs,
            cs,
        }
    }

    pub(crate) fn row_major(data: &'a [f64], offset: usize, cols: usize) -> Self {
        View::new(data, offset, cols, 1)
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "gemm view out of bounds");
        }
    }
}

pub(crate) struct ViewMut<'a> {
    data: &'a mut [f64],
    offset: usize,
    rs: usize,
    cs: usize,
}

impl<'a> ViewMut<'a> {
    pub(crate) fn new(data: &'a mut [f64], offset: usize, rs: usize, cs: usize) -> Self {
        ViewMut {
            data,
            offset,
            rs,
            cs,
        }
    }

    pub(crate) fn row_major(data: &'a mut [f64], offset: usize, cols: usize) -> Self {
        ViewMut::new(data, offset, cols, 1)
    }
}

/// `c = alpha * a[m x k] * b[k x n] + beta * c[m x n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: View, b: View, beta: f64, c: ViewMut) {
    a.check(m, k);
    b.check(k, n);
    if m > 0 && n > 0 {
        let last = c.offset + (m - 1) * c.rs + (n - 1) * c.cs;
        assert!(last < c.data.len(), "gemm output view out of bounds");
        // Distinct (row, col) pairs of the output must map to distinct cells.
        assert!(c.rs != c.cs || m == 1 || n == 1);
    }
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds of all three views were checked above, and `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}
