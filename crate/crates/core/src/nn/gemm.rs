//! Cache-blocked, packed matrix multiply.
//!
//! `C[m x n] += A[m x k] * B[k x n]` where A and B are addressed through
//! arbitrary row/column strides (so transposed operands cost nothing extra)
//! and C is row-major with leading dimension `ldc`.
//!
//! Loop nest follows the usual five-loop scheme: `NC` column blocks of B,
//! `KC` depth blocks packed into `NR`-wide panels, `MC` row blocks of A packed
//! into `MR`-tall panels, and an `MR x NR` register-tile microkernel.

use crate::scalar::Scalar;

const MR: usize = 8;
const NR: usize = 8;
const MC: usize = 128;
const KC: usize = 256;
const NC: usize = 1024;

/// Strided read-only view of a matrix.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T: Copy> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    #[inline(always)]
    fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.row_stride + c * self.col_stride]
    }
}

/// Scratch buffers for packed panels; reuse across calls to avoid reallocating.
#[derive(Default)]
pub struct GemmScratch<T> {
    a_pack: Vec<T>,
    b_pack: Vec<T>,
}

impl<T: Scalar> GemmScratch<T> {
    pub fn new() -> Self {
        GemmScratch {
            a_pack: vec![T::zero(); MC * KC],
            b_pack: vec![T::zero(); KC * NC],
        }
    }
}

/// `c += a * b`. `c` is row-major, `a.rows x b.cols`, leading dimension `ldc`.
pub fn gemm_acc<T: Scalar>(
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    ldc: usize,
    scratch: &mut GemmScratch<T>,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n, "output buffer too small");
    if scratch.a_pack.len() < MC * KC {
        scratch.a_pack.resize(MC * KC, T::zero());
    }
    if scratch.b_pack.len() < KC * NC {
        scratch.b_pack.resize(KC * NC, T::zero());
    }

    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            pack_b(&b, pc, kc, jc, nc, &mut scratch.b_pack);
            for ic in (0..m).step_by(MC) {
                let mc = MC.min(m - ic);
                pack_a(&a, ic, mc, pc, kc, &mut scratch.a_pack);
                macro_kernel(
                    &scratch.a_pack,
                    &scratch.b_pack,
                    mc,
                    nc,
                    kc,
                    &mut c[ic * ldc + jc..],
                    ldc,
                );
            }
        }
    }
}

/// Packs `mc x kc` of A into MR-tall panels, k-major inside each panel.
/// The ragged last panel is zero-padded.
fn pack_a<T: Scalar>(a: &MatRef<'_, T>, i0: usize, mc: usize, p0: usize, kc: usize, out: &mut [T]) {
    let mut idx = 0;
    for ir in (0..mc).step_by(MR) {
        let mr = MR.min(mc - ir);
        if a.row_stride == 1 && mr == MR {
            for p in 0..kc {
                let base = (i0 + ir) + (p0 + p) * a.col_stride;
                out[idx..idx + MR].copy_from_slice(&a.data[base..base + MR]);
                idx += MR;
            }
        } else {
            for p in 0..kc {
                for r in 0..MR {
                    out[idx] = if r < mr { a.at(i0 + ir + r, p0 + p) } else { T::zero() };
                    idx += 1;
                }
            }
        }
    }
}

/// Packs `kc x nc` of B into NR-wide panels, k-major inside each panel.
fn pack_b<T: Scalar>(b: &MatRef<'_, T>, p0: usize, kc: usize, j0: usize, nc: usize, out: &mut [T]) {
    let mut idx = 0;
    for jr in (0..nc).step_by(NR) {
        let nr = NR.min(nc - jr);
        if b.col_stride == 1 && nr == NR {
            for p in 0..kc {
                let base = (p0 + p) * b.row_stride + j0 + jr;
                out[idx..idx + NR].copy_from_slice(&b.data[base..base + NR]);
                idx += NR;
            }
        } else {
            for p in 0..kc {
                for cc in 0..NR {
                    out[idx] = if cc < nr { b.at(p0 + p, j0 + jr + cc) } else { T::zero() };
                    idx += 1;
                }
            }
        }
    }
}

fn macro_kernel<T: Scalar>(
    a_pack: &[T],
    b_pack: &[T],
    mc: usize,
    nc: usize,
    kc: usize,
    c: &mut [T],
    ldc: usize,
) {
    for jr in (0..nc).step_by(NR) {
        let nr = NR.min(nc - jr);
        let bp = &b_pack[(jr / NR) * NR * kc..][..NR * kc];
        for ir in (0..mc).step_by(MR) {
            let mr = MR.min(mc - ir);
            let ap = &a_pack[(ir / MR) * MR * kc..][..MR * kc];
            let acc = micro_kernel(ap, bp, kc);
            for r in 0..mr {
                let row = &mut c[(ir + r) * ldc + jr..][..nr];
                for (dst, &v) in row.iter_mut().zip(&acc[r][..nr]) {
                    *dst += v;
                }
            }
        }
    }
}

#[inline(always)]
fn micro_kernel<T: Scalar>(ap: &[T], bp: &[T], kc: usize) -> [[T; NR]; MR] {
    let mut acc = [[T::zero(); NR]; MR];
    for p in 0..kc {
        let a: &[T; MR] = ap[p * MR..p * MR + MR].try_into().unwrap();
        let b: &[T; NR] = bp[p * NR..p * NR + NR].try_into().unwrap();
        for r in 0..MR {
            let ar = a[r];
            for cc in 0..NR {
                acc[r][cc] = acc[r][cc] + ar * b[cc];
            }
        }
    }
    acc
}
