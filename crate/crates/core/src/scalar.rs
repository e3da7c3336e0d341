//! Floating-point element types the engine can be instantiated with.

use std::fmt::{Debug, Display};
use std::io::{self, Read, Write};

use num_traits::{Float, FromPrimitive, NumAssignOps, NumCast};

/// Element type of a [`Tensor`](crate::Tensor): `f32` for training, `f64`
/// for shadow arithmetic in gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + NumAssignOps
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Width in bytes when serialized.
    const WIDTH: u8;

    /// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le<W: Write>(self, w: &mut W) -> io::Result<()>;

    fn read_le<R: Read>(r: &mut R) -> io::Result<Self>;

    /// Lossy conversion helper used at data boundaries.
    fn of(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("finite f64 converts to any Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_gemm_bounds<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    c: &[T],
    rsc: isize,
    csc: isize,
) {
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    };
    assert!(span(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
    assert!(span(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
    assert!(span(m, n, rsc, csc) <= c.len(), "gemm: output out of bounds");
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        // SAFETY: every index touched by the kernel is inside the slices, checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn write_le<W: Write>(self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.to_le_bytes())
    }

    fn read_le<R: Read>(r: &mut R) -> io::Result<Self> {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        Ok(f32::from_le_bytes(buf))
    }
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        // SAFETY: every index touched by the kernel is inside the slices, checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn write_le<W: Write>(self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.to_le_bytes())
    }

    fn read_le<R: Read>(r: &mut R) -> io::Result<Self> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }
}
