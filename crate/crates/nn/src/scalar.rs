use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::Debug;
use std::iter::Sum;

/// Floating point element type supported by the engine.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    /// `C = alpha * A * B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing (for `c`)
    /// matrices of the given dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided matrix view used by [`matmul`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl Mat {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// Safe wrapper: `c = alpha * a * b + beta * c` where each operand is a
/// strided view into a slice starting at the given offset.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<S: Scalar>(
    alpha: S,
    a: &[S],
    a_off: usize,
    am: Mat,
    b: &[S],
    b_off: usize,
    bm: Mat,
    beta: S,
    c: &mut [S],
    c_off: usize,
    cm: Mat,
) {
    assert_eq!(am.cols, bm.rows, "inner dimensions");
    assert_eq!(am.rows, cm.rows, "output rows");
    assert_eq!(bm.cols, cm.cols, "output cols");
    assert!(am.rs >= 0 && am.cs >= 0 && bm.rs >= 0 && bm.cs >= 0 && cm.rs >= 0 && cm.cs >= 0);
    if cm.rows == 0 || cm.cols == 0 {
        return;
    }
    if am.cols == 0 {
        // Empty reduction; gemm would still scale by beta.
        for r in 0..cm.rows {
            for q in 0..cm.cols {
                let idx = c_off + r * cm.rs as usize + q * cm.cs as usize;
                c[idx] = beta * c[idx];
            }
        }
        return;
    }
    assert!(a_off + am.max_offset() < a.len(), "lhs out of bounds");
    assert!(b_off + bm.max_offset() < b.len(), "rhs out of bounds");
    assert!(c_off + cm.max_offset() < c.len(), "out out of bounds");
    // SAFETY: bounds verified above; `c` is a unique borrow distinct from `a`/`b`.
    unsafe {
        S::gemm(
            am.rows,
            am.cols,
            bm.cols,
            alpha,
            a.as_ptr().add(a_off),
            am.rs,
            am.cs,
            b.as_ptr().add(b_off),
            bm.rs,
            bm.cs,
            beta,
            c.as_mut_ptr().add(c_off),
            cm.rs,
            cm.cs,
        )
    }
}
