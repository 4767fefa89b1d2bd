//! Dense kernels shared by the forward and backward passes.

/// Strided view of a matrix: `(row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    pub fn transposed(self) -> Self {
        Self {
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `c = a·b` (or `c += a·b` when `accumulate`) for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    lc: Layout,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(la.span(m, k) <= a.len(), "gemm: lhs out of bounds");
    assert!(lb.span(k, n) <= b.len(), "gemm: rhs out of bounds");
    assert!(lc.span(m, n) <= c.len(), "gemm: output out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every access stays inside the spans checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

pub(crate) fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Geometry of a 2D convolution over `(T, V)` with padding along `T` only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub t: usize,
    pub v: usize,
    pub kt: usize,
    pub kv: usize,
    pub stride: usize,
    pub pad: usize,
    pub t_out: usize,
    pub v_out: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kt == 1 && self.kv == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kt * self.kv
    }

    pub fn col_cols(&self) -> usize {
        self.t_out * self.v_out
    }

    /// Unfolds one sample `[cin, t, v]` into `[cin·kt·kv, t_out·v_out]`.
    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ncol = self.col_cols();
        for ci in 0..self.cin {
            for dt in 0..self.kt {
                for dv in 0..self.kv {
                    let row = (ci * self.kt + dt) * self.kv + dv;
                    let out = &mut cols[row * ncol..(row + 1) * ncol];
                    for to in 0..self.t_out {
                        let ti = (to * self.stride + dt) as isize - self.pad as isize;
                        let dst = &mut out[to * self.v_out..(to + 1) * self.v_out];
                        if ti < 0 || ti as usize >= self.t {
                            dst.fill(0.0);
                        } else {
                            let base = (ci * self.t + ti as usize) * self.v + dv;
                            dst.copy_from_slice(&x[base..base + self.v_out]);
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-adds columns back into `[cin, t, v]`.
    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let ncol = self.col_cols();
        for ci in 0..self.cin {
            for dt in 0..self.kt {
                for dv in 0..self.kv {
                    let row = (ci * self.kt + dt) * self.kv + dv;
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    for to in 0..self.t_out {
                        let ti = (to * self.stride + dt) as isize - self.pad as isize;
                        if ti < 0 || ti as usize >= self.t {
                            continue;
                        }
                        let base = (ci * self.t + ti as usize) * self.v + dv;
                        add_assign(
                            &mut dx[base..base + self.v_out],
                            &src[to * self.v_out..(to + 1) * self.v_out],
                        );
                    }
                }
            }
        }
    }
}
